"""Binary model files: deployable snapshots and resumable checkpoints.

Layout (little-endian)::

    b"BNFZ" | u16 version | u16 kind | u32 header_len | header JSON | u32 entries
    entry:  u16 name_len | name | u8 role | u8 encoding | u8 ndim | u32 dims... | u32 payload_len | payload

Scheduled weights in a snapshot are sign bits packed 8 per byte, MSB first,
+1 -> 1.  Everything else is raw float32.  Checkpoints keep latent weights
as float32 and add the masks as RLE sections.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .masking import decode_mask_rle, encode_mask_rle
from .model import ArchSpec, Model, QuantMode, build

MAGIC = b"BNFZ"
VERSION = 1
KIND_SNAPSHOT, KIND_CHECKPOINT = 0, 1
ROLE_FP, ROLE_SCHEDULED, ROLE_BUFFER, ROLE_WMASK, ROLE_AMASK = range(5)
ENC_F32, ENC_SIGNBITS, ENC_RLE = range(3)


def pack_signs(w: np.ndarray) -> bytes:
    return np.packbits((np.asarray(w).ravel() >= 0).astype(np.uint8)).tobytes()


def unpack_signs(payload: bytes, shape) -> np.ndarray:
    n = int(np.prod(shape))
    if len(payload) != (n + 7) // 8:
        raise FormatError(f"sign payload of {len(payload)} bytes cannot hold {n} bits")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=n)
    return np.where(bits == 1, 1.0, -1.0).astype(np.float32).reshape(shape)


def _entry(name, role, enc, shape, payload):
    nb = name.encode("utf-8")
    return (struct.pack("<H", len(nb)) + nb + struct.pack("<BBB", role, enc, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<I", len(payload)) + payload)


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _header(model, kind):
    meta = {"arch": model.arch.to_dict(), "mode": model.mode.value,
            "bn_eps": model.bn_eps, "bn_momentum": model.bn_momentum}
    h = json.dumps(meta, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<HHI", VERSION, kind, len(h)) + h


def phase_report(model: Model) -> list:
    """Units whose masks are not all ones, as readable strings."""
    out = []
    for u in model.units:
        pending = [(role, m.frozen_fraction) for role, m in (("weight", u.weight_mask), ("activation", u.act_mask))
                   if m is not None and not m.is_full()]
        if pending:
            desc = ", ".join(f"{r} mask {f:.3f} frozen" for r, f in pending)
            out.append(f"unit {u.index} ({u.phase.value}): {desc}")
    return out


def snapshot_binary(model: Model) -> bytes:
    """Serialize the deployable network; refuses if any scheduled mask is unfinalized."""
    report = phase_report(model)
    if report:
        raise ContractError("cannot snapshot, masks not finalized:\n  " + "\n  ".join(report))
    scheduled = model.scheduled_weight_names()
    entries = []
    for name, t in model.named_parameters():
        if name in scheduled:
            entries.append(_entry(name, ROLE_SCHEDULED, ENC_SIGNBITS, t.shape, pack_signs(t.data)))
        else:
            entries.append(_entry(name, ROLE_FP, ENC_F32, t.shape, _f32(t.data)))
    for name, b in model.named_buffers():
        entries.append(_entry(name, ROLE_BUFFER, ENC_F32, b.shape, _f32(b)))
    return _header(model, KIND_SNAPSHOT) + struct.pack("<I", len(entries)) + b"".join(entries)


def checkpoint_bytes(model: Model) -> bytes:
    """Latent float32 weights, buffers and every mask (RLE)."""
    entries = [_entry(n, ROLE_FP, ENC_F32, t.shape, _f32(t.data)) for n, t in model.named_parameters()]
    entries += [_entry(n, ROLE_BUFFER, ENC_F32, b.shape, _f32(b)) for n, b in model.named_buffers()]
    for u in model.units:
        for role, suffix, m in ((ROLE_WMASK, "wmask", u.weight_mask), (ROLE_AMASK, "amask", u.act_mask)):
            if m is not None:
                entries.append(_entry(f"unit{u.index}.{suffix}", role, ENC_RLE, m.shape, encode_mask_rle(m)))
    return _header(model, KIND_CHECKPOINT) + struct.pack("<I", len(entries)) + b"".join(entries)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("file truncated", self.pos)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"payload truncated: need {n} bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def _parse(buf: bytes):
    r = _Reader(buf)
    if r.raw(4) != MAGIC:
        raise FormatError("bad magic, expected BNFZ", 0)
    version, kind, hlen = r.take("<HHI")
    if version != VERSION:
        raise FormatError(f"unsupported snapshot version {version}", 4)
    try:
        meta = json.loads(r.raw(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt header", 12) from None
    (count,) = r.take("<I")
    entries = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode("utf-8")
        role, enc, ndim = r.take("<BBB")
        shape = r.take(f"<{ndim}I")
        (plen,) = r.take("<I")
        payload = r.raw(plen)
        entries[name] = (role, enc, tuple(shape), payload, start)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last entry", r.pos)
    return kind, meta, entries


def _decode(name, role, enc, shape, payload, start):
    if enc == ENC_F32:
        if len(payload) != 4 * int(np.prod(shape)):
            raise FormatError(f"{name}: float payload size mismatch", start)
        return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if enc == ENC_SIGNBITS:
        return unpack_signs(payload, shape)
    if enc == ENC_RLE:
        mask, end = decode_mask_rle(payload, 0)
        if end != len(payload) or mask.shape != shape:
            raise FormatError(f"{name}: bad mask section", start)
        return mask
    raise FormatError(f"{name}: unknown encoding {enc}", start)


def _restore(buf: bytes, expect_kind: int) -> Model:
    kind, meta, entries = _parse(buf)
    if kind != expect_kind:
        raise FormatError(f"file kind {kind}, expected {expect_kind}", 6)
    model = build(ArchSpec.from_dict(meta["arch"]), QuantMode(meta["mode"]), 0, meta["bn_eps"], meta["bn_momentum"])
    targets = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, t in targets.items():
        if name not in entries:
            raise FormatError(f"missing entry {name}")
        val = _decode(name, *entries[name])
        if val.shape != t.shape:
            raise FormatError(f"{name}: shape {val.shape}, model expects {t.shape}", entries[name][4])
        t.data = val.copy()
    for name, b in buffers.items():
        if name not in entries:
            raise FormatError(f"missing entry {name}")
        b[...] = _decode(name, *entries[name])
    for u in model.units:
        for attr, suffix in (("weight_mask", "wmask"), ("act_mask", "amask")):
            cur = getattr(u, attr)
            if cur is None:
                continue
            key = f"unit{u.index}.{suffix}"
            if expect_kind == KIND_CHECKPOINT:
                if key not in entries:
                    raise FormatError(f"missing entry {key}")
                setattr(u, attr, _decode(key, *entries[key]))
            else:
                cur.fill(True)
    return model


def load_snapshot(buf: bytes) -> Model:
    """Rebuild a deployable model; scheduled weights come back as exact +/-1."""
    return _restore(buf, KIND_SNAPSHOT)


def load_checkpoint(buf: bytes) -> Model:
    return _restore(buf, KIND_CHECKPOINT)


def write_snapshot(model: Model, path) -> int:
    data = snapshot_binary(model)
    Path(path).write_bytes(data)
    return len(data)


def read_snapshot(path) -> Model:
    return load_snapshot(Path(path).read_bytes())
