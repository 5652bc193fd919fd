"""Masked binarization and the straight-through baseline.

``masked_forward`` evaluates ``M*sign(u) + (1-M)*smooth(u)`` and registers a
backward rule that only differentiates the smooth branch; frozen entries get
exactly zero gradient.  No backward rule exists for ``sign`` itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, emit, register_backward


class SmoothKind(enum.Enum):
    CLIP = "clip"
    IDENTITY = "identity"


def _sign(u: np.ndarray) -> np.ndarray:
    # sign(0) := +1
    return np.where(u >= 0, 1, -1).astype(u.dtype)


def sign_apply(u: Tensor) -> Tensor:
    """Hard sign as a constant: the result carries no tape history."""
    return Tensor(_sign(u.data), dtype=u.dtype)


def clip_apply(u: Tensor) -> Tensor:
    return Tensor(np.clip(u.data, -1, 1), dtype=u.dtype)


def smooth_values(u: np.ndarray, kind: SmoothKind) -> np.ndarray:
    if kind is SmoothKind.CLIP:
        return np.clip(u, -1, 1)
    return u


def smooth_derivative(u: np.ndarray, kind: SmoothKind) -> np.ndarray:
    """Clip' is 1 on the open interval (-1, 1) and 0 elsewhere; Identity' is 1."""
    if kind is SmoothKind.CLIP:
        return (np.abs(u) < 1).astype(u.dtype)
    return np.ones_like(u)


@dataclass
class MaskedValue:
    """A latent tensor paired with its freeze mask and smooth proxy.

    ``mask`` is either congruent with ``latent`` (weights) or congruent with
    ``latent.shape[1:]`` and broadcast over the batch axis (activations).
    """

    latent: Tensor
    mask: np.ndarray
    smooth: SmoothKind

    def broadcast_mask(self) -> np.ndarray:
        return broadcast_mask(self.mask, self.latent.shape)


def broadcast_mask(mask: np.ndarray, shape) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape == tuple(shape):
        return mask
    if mask.shape == tuple(shape[1:]):
        return mask[None, ...]
    raise DimensionError(f"mask of shape {mask.shape} incompatible with values of shape {tuple(shape)}")


def masked_forward(v: MaskedValue) -> Tensor:
    u = v.latent.data
    m = v.broadcast_mask()
    if m.dtype != np.bool_:
        if np.any((m != 0) & (m != 1)):
            raise ValueError("mask entries must be 0 or 1")
        m = m.astype(bool)
    out = np.where(m, _sign(u), smooth_values(u, v.smooth)).astype(u.dtype)
    return emit("masked_binarize", out, (v.latent,), (m, u, v.smooth))


def masked_backward(g_out: np.ndarray, v: MaskedValue) -> np.ndarray:
    """Gradient w.r.t. the latent: ``(1-M) * g_out * smooth'(u)``."""
    m = v.broadcast_mask().astype(bool)
    return _masked_grad(g_out, m, v.latent.data, v.smooth)


def _masked_grad(g, m, u, kind):
    return np.where(m, 0, g * smooth_derivative(u, kind)).astype(g.dtype)


@register_backward("masked_binarize")
def _masked_binarize_bw(ctx, g):
    m, u, kind = ctx
    return (_masked_grad(g, m, u, kind),)


def ste_binarize(u: Tensor) -> Tensor:
    """sign(u) forward, identity surrogate backward."""
    return emit("ste_sign", _sign(u.data), (u,), None)


@register_backward("ste_sign")
def _ste_sign_bw(ctx, g):
    return (g,)


def clamp_latent_(w: Tensor) -> None:
    """In-place clamp of an STE latent to [-1, 1] after an optimizer step."""
    np.clip(w.data, -1, 1, out=w.data)
