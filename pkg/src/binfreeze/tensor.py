"""Dense tensors with a define-by-run reverse-mode tape.

Every differentiable operation is a forward function that computes a value
and a backward rule registered by name in ``BACKWARD_RULES``.  While a
:class:`Tape` is active, each operation whose inputs require gradients is
appended to it; :func:`backward` replays the tape in exact reverse order.

Only two broadcasting forms are supported by the elementwise kinds: identical
shapes and scalar-with-tensor.  The per-channel forms the models need
(bias add, batch norm) are dedicated operations.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, LabelError

DTYPE = np.float32

BACKWARD_RULES: dict[str, Callable] = {}


def register_backward(name: str):
    """Register ``fn(ctx, grad_out) -> tuple of input grads`` under ``name``."""

    def deco(fn):
        if name in BACKWARD_RULES:
            raise ContractError(f"backward rule {name!r} already registered")
        BACKWARD_RULES[name] = fn
        return fn

    return deco


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else DTYPE)
        if dtype is None and arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._op is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass(eq=False)
class Op:
    name: str
    inputs: tuple
    output: Tensor
    ctx: object
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered record of the operations of one forward pass.

    Tapes are per-thread: entering a tape makes it current for the calling
    thread only, so independent runs on separate workers never share one.
    """

    ops: list = field(default_factory=list)

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()
        return False

    def op_names(self):
        return [op.name for op in self.ops]

    def __len__(self):
        return len(self.ops)


_local = threading.local()


def _stack():
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def current_tape():
    s = _stack()
    return s[-1] if s else None


def emit(name: str, value: np.ndarray, inputs: Sequence[Tensor], ctx=None) -> Tensor:
    """Wrap ``value`` as the output of op ``name`` and record it if needed."""
    out = Tensor(value, dtype=value.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if name not in BACKWARD_RULES:
            raise ContractError(f"no backward rule registered for {name!r}")
        out.requires_grad = True
        op = Op(name, tuple(inputs), out, ctx, tape)
        out._op = op
        tape.ops.append(op)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Walks the loss's tape in reverse recording order; fan-out gradients are
    summed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._op is None:
        raise ContractError("loss was not produced by an operation recorded on a tape")
    pending = {id(loss): np.ones_like(loss.data)}
    for op in reversed(loss._op.tape.ops):
        g = pending.pop(id(op.output), None)
        if g is None:
            continue
        grads = BACKWARD_RULES[op.name](op.ctx, g)
        for inp, gi in zip(op.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._op is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


# -- elementwise --------------------------------------------------------------

def _binary_operands(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return emit("add", a.data + b.data, (a, b), (a.shape, b.shape))


@register_backward("add")
def _add_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return emit("sub", a.data - b.data, (a, b), (a.shape, b.shape))


@register_backward("sub")
def _sub_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return emit("mul", a.data * b.data, (a, b), (a.data, b.data))


@register_backward("mul")
def _mul_bw(ctx, g):
    av, bv = ctx
    return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return emit("scale", x.data * x.data.dtype.type(c), (x,), c)


@register_backward("scale")
def _scale_bw(c, g):
    return (g * g.dtype.type(c),)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return emit("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), pos)


@register_backward("relu")
def _relu_bw(pos, g):
    return (np.where(pos, g, 0).astype(g.dtype),)


def hardtanh(x: Tensor) -> Tensor:
    """max(-1, min(1, x)); derivative 1 on the open interval (-1, 1)."""
    inside = np.abs(x.data) < 1
    return emit("hardtanh", np.clip(x.data, -1, 1), (x,), inside)


@register_backward("hardtanh")
def _hardtanh_bw(inside, g):
    return (np.where(inside, g, 0).astype(g.dtype),)


def elementwise(kind: str, *args):
    """Dispatch by kind name: relu, add, sub, mul, scale."""
    table = {"relu": relu, "add": add, "sub": sub, "mul": mul, "scale": scale, "hardtanh": hardtanh}
    if kind not in table:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias of shape {b.shape} does not match {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return emit("add_bias", x.data + b.data.reshape(shape), (x, b), axes)


@register_backward("add_bias")
def _add_bias_bw(axes, g):
    return g, g.sum(axis=axes)


# -- reductions and reshapes --------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), x.shape)


@register_backward("sum")
def _sum_bw(shape, g):
    return (np.broadcast_to(g, shape).copy(),)


def reshape(x: Tensor, shape) -> Tensor:
    return emit("reshape", x.data.reshape(shape), (x,), x.shape)


@register_backward("reshape")
def _reshape_bw(shape, g):
    return (g.reshape(shape),)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C by spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    return emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), x.shape)


@register_backward("global_avg_pool")
def _gap_bw(shape, g):
    n, c, h, w = shape
    out = np.broadcast_to(g[:, :, None, None] / g.dtype.type(h * w), shape)
    return (out.copy(),)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return emit("matmul", a.data @ b.data, (a, b), (a.data, b.data))


@register_backward("matmul")
def _matmul_bw(ctx, g):
    av, bv = ctx
    return g @ bv.T, av.T @ g


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for a weight stored as out_features x in_features."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    return emit("linear", x.data @ w.data.T, (x, w), (x.data, w.data))


@register_backward("linear")
def _linear_bw(ctx, g):
    xv, wv = ctx
    return g @ wv, g.T @ xv


def _conv_geometry(xshape, kshape, stride, pad):
    if len(xshape) != 4 or len(kshape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {xshape} and {kshape}")
    n, c, h, w = xshape
    o, ck, kh, kw = kshape
    if c != ck:
        raise DimensionError(f"conv2d channel mismatch: input {xshape}, kernel {kshape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"kernel {kshape} larger than padded input {xshape} with pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return n, c, h, w, o, kh, kw, ho, wo


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0, impl: str = "im2col") -> Tensor:
    """Zero-padded cross-correlation of N x C x H x W with O x C x Kh x Kw.

    ``impl`` picks the forward kernel: ``"im2col"`` (one GEMM over unfolded
    patches), ``"direct"`` (one product per kernel tap) or ``"blocked"``
    (tensordot over a strided window view).  All share one backward rule.
    """
    n, c, h, w, o, kh, kw, ho, wo = _conv_geometry(x.shape, k.shape, stride, pad)
    xp = _pad(x.data, pad)
    if impl == "im2col":
        cols = _unfold(xp, kh, kw, stride, ho, wo)
        out = (cols @ k.data.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    elif impl == "direct":
        out = _conv_direct(xp, k.data, stride, ho, wo)
    elif impl == "blocked":
        out = _conv_blocked(xp, k.data, stride, ho, wo)
    else:
        raise ContractError(f"unknown conv2d impl {impl!r}")
    return emit("conv2d", out, (x, k), (xp, k.data, stride, pad))


def _unfold(xp, kh, kw, stride, ho, wo):
    """Patches as a (N*Ho*Wo) x (C*Kh*Kw) matrix."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _tap(xp, i, j, stride, ho, wo):
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _conv_direct(xp, kv, stride, ho, wo):
    n, c = xp.shape[:2]
    o, _, kh, kw = kv.shape
    acc = np.zeros((n, ho, wo, o), dtype=np.result_type(xp, kv))
    for i in range(kh):
        for j in range(kw):
            xs = _tap(xp, i, j, stride, ho, wo).transpose(0, 2, 3, 1)
            acc += xs @ kv[:, :, i, j].T
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _conv_blocked(xp, kv, stride, ho, wo):
    o, c, kh, kw = kv.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, kv, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


@register_backward("conv2d")
def _conv2d_bw(ctx, g):
    xp, kv, stride, pad = ctx
    n, c = xp.shape[:2]
    o, _, kh, kw = kv.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = _unfold(xp, kh, kw, stride, ho, wo)
    dk = (g2.T @ cols).reshape(kv.shape)
    dcols = (g2 @ kv.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            _tap(dxp, i, j, stride, ho, wo)[...] += dcols[..., i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dk


# -- normalization ------------------------------------------------------------

class BatchNormState:
    """Affine parameters and running statistics for one batch-norm layer."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, name: str = "bn"):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self):
        return self.gamma.shape[0]


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, momentum: float = 0.1,
              training: bool = True, running_mean=None, running_var=None) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    In training mode batch statistics are used and, when running buffers are
    given, they are updated in place with the usual exponential average
    (unbiased variance).  Eval mode normalizes with the running buffers.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm parameters {gamma.shape}/{beta.shape} do not match {x.shape}")
    if eps <= 0:
        raise ContractError("batchnorm eps must be positive")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xv = x.data
    if training:
        m = xv.size // xv.shape[1]
        if m <= 1:
            raise DegenerateBatchError(f"batchnorm over a single element per channel (input {x.shape})")
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        if running_mean is None or running_var is None:
            raise ContractError("eval-mode batchnorm needs running statistics")
        mean, var, m = running_mean, running_var, None
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return emit("batchnorm", out.astype(xv.dtype), (x, gamma, beta),
                (xhat, inv, gamma.data, axes, bshape, training))


@register_backward("batchnorm")
def _batchnorm_bw(ctx, g):
    xhat, inv, gv, axes, bshape, training = ctx
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * gv.reshape(bshape)
    if training:
        m = g.size // g.shape[1]
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
    else:
        dx = dxhat * inv.reshape(bshape)
    return dx.astype(g.dtype), dgamma, dbeta


def batchnorm_layer(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    return batchnorm(x, state.gamma, state.beta, state.eps, state.momentum, training,
                     state.running_mean, state.running_var)


# -- loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label], max-subtracted."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = int(labels[(labels < 0) | (labels >= c)][0])
        raise LabelError(f"label {bad} outside [0, {c})")
    z = logits.data.astype(np.float64) - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()
    probs = np.exp(z - lse[:, None])
    return emit("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,),
                (probs, labels, logits.dtype))


@register_backward("softmax_cross_entropy")
def _sce_bw(ctx, g):
    probs, labels, dtype = ctx
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return ((d * (float(g) / n)).astype(dtype),)
