"""Freeze masks, freezing schedules and mask refresh policies."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError


class Mask:
    """Boolean freeze mask (True = frozen, evaluated through sign)."""

    __slots__ = ("bits", "_count")

    def __init__(self, shape, bits=None):
        if bits is None:
            bits = np.zeros(shape, dtype=bool)
        else:
            bits = np.array(bits, dtype=bool).reshape(shape)
        self.bits = bits
        self._count = int(bits.sum())

    @classmethod
    def from_bits(cls, bits):
        bits = np.asarray(bits, dtype=bool)
        return cls(bits.shape, bits)

    @property
    def shape(self):
        return self.bits.shape

    @property
    def n(self):
        return self.bits.size

    @property
    def frozen_count(self):
        return self._count

    @property
    def frozen_fraction(self):
        return self._count / self.bits.size

    def check(self):
        """Recount the bits and compare with the cached count."""
        actual = int(self.bits.sum())
        if actual != self._count:
            raise ContractError(f"mask frozen_count {self._count} != actual {actual}")
        return True

    def fill(self, value: bool) -> None:
        self.bits.fill(bool(value))
        self._count = self.bits.size if value else 0

    def copy(self) -> "Mask":
        return Mask(self.shape, self.bits.copy())

    def is_full(self):
        return self._count == self.bits.size

    def is_empty(self):
        return self._count == 0

    def __eq__(self, other):
        return isinstance(other, Mask) and self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"Mask(shape={self.shape}, frozen={self._count}/{self.n})"


# -- schedules ----------------------------------------------------------------

class ScheduleKind(enum.Enum):
    COSINE = "cosine"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    CUBIC = "cubic"
    FLIPPED_QUADRATIC = "flipped_quadratic"


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind
    T: int

    def __post_init__(self):
        if self.T < 1:
            raise ContractError(f"schedule needs T >= 1, got {self.T}")

    def __call__(self, t: int) -> float:
        return schedule_p(self, t)


def schedule_p(s: Schedule, t: int) -> float:
    """Target frozen fraction at step ``t`` of ``s.T``."""
    if not 0 <= t <= s.T:
        raise ContractError(f"schedule step {t} outside [0, {s.T}]")
    x = t / s.T
    k = s.kind
    if k is ScheduleKind.CUBIC:
        return x**3
    if k is ScheduleKind.LINEAR:
        return x
    if k is ScheduleKind.QUADRATIC:
        return x * x
    if k is ScheduleKind.FLIPPED_QUADRATIC:
        return 2 * x - x * x
    if k is ScheduleKind.COSINE:
        if t == s.T:
            return 1.0
        return 0.5 - 0.5 * math.cos(math.pi * x)
    raise ContractError(f"unknown schedule {k!r}")


# -- refresh policies ---------------------------------------------------------

@dataclass(frozen=True)
class RefreshConfig:
    r: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ContractError(f"refresh divisor must be a positive integer, got {self.r}")


def resample_count(n: int, r: int) -> int:
    return max(1, n // r)


def sample_distinct(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct uniform indices from range(n) by a sparse partial Fisher-Yates."""
    if not 0 <= k <= n:
        raise ContractError(f"cannot draw {k} distinct indices from {n}")
    offsets = rng.integers(0, n - np.arange(k)) if k else np.empty(0, dtype=np.int64)
    swapped: dict[int, int] = {}
    out = []
    get = swapped.get
    for i, off in enumerate(offsets.tolist()):
        j = i + off
        out.append(get(j, j))
        swapped[j] = get(i, i)
    return np.array(out, dtype=np.int64)


def soft_refresh(m: Mask, p: float, cfg: RefreshConfig, rng: np.random.Generator) -> Mask:
    """Redraw k = max(1, n // r) random bits from Bernoulli(p); keep the rest."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"freeze probability {p} outside [0, 1]")
    k = resample_count(m.n, cfg.r)
    idx = sample_distinct(m.n, k, rng)
    draws = rng.random(k) < p
    out = m.copy()
    flat = out.bits.reshape(-1)
    before = int(flat[idx].sum())
    flat[idx] = draws
    out._count += int(draws.sum()) - before
    return out


def deterministic_refresh(weights, p: float) -> Mask:
    """Freeze the ceil(p*n) entries closest to +-1; ties go to the lower flat index."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"freeze probability {p} outside [0, 1]")
    w = np.asarray(getattr(weights, "data", weights))
    n = w.size
    # guard against p*n landing a hair above an integer
    count = min(n, max(0, math.ceil(p * n - 1e-9)))
    dist = np.abs(np.abs(w.reshape(-1).astype(np.float64)) - 1.0)
    order = np.argsort(dist, kind="stable")
    bits = np.zeros(n, dtype=bool)
    bits[order[:count]] = True
    return Mask(w.shape, bits)


def finalize(m: Mask) -> Mask:
    out = m.copy()
    out.fill(True)
    return out


# -- serialization ------------------------------------------------------------
#
# RLE layout, all integers little-endian:
#   u8  ndim
#   u32 dims[ndim]
#   u8  first bit value (0 or 1)
#   u32 run count R
#   u32 run lengths[R]   (alternating values starting at the first bit)

def encode_mask_rle(m: Mask) -> bytes:
    flat = m.bits.reshape(-1)
    head = struct.pack("<B", m.bits.ndim) + struct.pack(f"<{m.bits.ndim}I", *m.shape)
    if flat.size == 0:
        return head + struct.pack("<BI", 0, 0)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges).astype("<u4")
    return head + struct.pack("<BI", int(flat[0]), runs.size) + runs.tobytes()


def decode_mask_rle(buf: bytes, offset: int = 0):
    """Return ``(mask, next_offset)``."""
    try:
        (ndim,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        first, nruns = struct.unpack_from("<BI", buf, offset)
        offset += 5
        runs = np.frombuffer(buf, dtype="<u4", count=nruns, offset=offset)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated mask record: {exc}", offset) from None
    offset += 4 * nruns
    n = int(np.prod(dims)) if ndim else 1
    if int(runs.sum()) != n:
        raise FormatError(f"mask runs cover {int(runs.sum())} bits, shape needs {n}", offset)
    values = (np.arange(nruns) + first) % 2
    bits = np.repeat(values.astype(bool), runs)
    return Mask(tuple(dims), bits), offset
