"""Desk-scale binary networks under a precision policy and quantization mode.

Layout of both families::

    stem (FP weight, BN, FP activation)
    unit 0 .. unit D-1 (scheduled: binarizable weight + BN + activation)
    head (FP classifier with bias)

In ``rescnn`` every unit is a residual block ``h <- act(BN(conv(h))) + skip(h)``
where ``skip`` is the identity or, when the block changes width or
resolution, a full-precision 1x1 projection with its own BN.  Projections,
stem and head never pass through sign.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .binarize import MaskedValue, SmoothKind, masked_forward, sign_apply, ste_binarize
from .errors import ConfigError, ContractError, DimensionError
from .masking import Mask
from .rng import Role, stream
from .tensor import BatchNormState, Tensor


class Rule(enum.Enum):
    FP = "fp"
    STE = "ste"
    STOMPP = "stompp"


class QuantMode(enum.Enum):
    FP = "fp"
    STE_BWN = "ste_bwn"
    STE_BNN = "ste_bnn"
    STOMPP_BWN = "stompp_bwn"
    STOMPP_BNN = "stompp_bnn"
    HYBRID_AW = "hybrid_aw"
    HYBRID_WA = "hybrid_wa"

    @property
    def weight_rule(self) -> Rule:
        return _RULES[self][0]

    @property
    def act_rule(self) -> Rule:
        return _RULES[self][1]

    @property
    def binary_activations(self) -> bool:
        return self.act_rule is not Rule.FP

    @property
    def uses_stompp(self) -> bool:
        return Rule.STOMPP in _RULES[self]


_RULES = {
    QuantMode.FP: (Rule.FP, Rule.FP),
    QuantMode.STE_BWN: (Rule.STE, Rule.FP),
    QuantMode.STE_BNN: (Rule.STE, Rule.STE),
    QuantMode.STOMPP_BWN: (Rule.STOMPP, Rule.FP),
    QuantMode.STOMPP_BNN: (Rule.STOMPP, Rule.STOMPP),
    # A/W: StoMPP activations, STE weights; W/A: StoMPP weights, STE activations
    QuantMode.HYBRID_AW: (Rule.STE, Rule.STOMPP),
    QuantMode.HYBRID_WA: (Rule.STOMPP, Rule.STE),
}


class LayerPhase(enum.Enum):
    FROZEN_PREFIX = "frozen_prefix"
    TRANSITION = "transition"
    UNFROZEN_SUFFIX = "unfrozen_suffix"


@dataclass(frozen=True)
class ArchSpec:
    family: str
    depth: int
    width: int
    input_shape: tuple
    num_classes: int
    batchnorm: bool = True

    def __post_init__(self):
        if self.family not in ("mlp", "rescnn"):
            raise ConfigError(f"unknown architecture family {self.family!r}")
        if self.depth < 1:
            raise ConfigError("architecture needs at least one scheduled block")
        if self.width < 1 or self.num_classes < 1 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"zero-sized architecture: {self}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")

    def to_dict(self):
        return {"family": self.family, "depth": self.depth, "width": self.width,
                "input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "batchnorm": self.batchnorm}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], int(d["depth"]), int(d["width"]), tuple(d["input_shape"]),
                   int(d["num_classes"]), bool(d.get("batchnorm", True)))


@dataclass(eq=False)
class Projection:
    weight: Tensor
    bn: BatchNormState | None
    stride: int


@dataclass(eq=False)
class LayerState:
    index: int
    weight: Tensor
    weight_mask: Mask | None
    act_mask: Mask | None
    bn: BatchNormState | None
    bias: Tensor | None
    act_shape: tuple
    stride: int = 1
    projection: Projection | None = None
    residual: bool = False
    phase: LayerPhase = LayerPhase.UNFROZEN_SUFFIX

    def trainable(self):
        """Parameters owned by the unit: latent weight plus its affine terms."""
        out = [self.weight]
        if self.bn is not None:
            out += [self.bn.gamma, self.bn.beta]
        if self.bias is not None:
            out.append(self.bias)
        return out

    def masks(self):
        return [m for m in (self.weight_mask, self.act_mask) if m is not None]


@dataclass(eq=False)
class Model:
    arch: ArchSpec
    mode: QuantMode
    stem_weight: Tensor
    stem_bn: BatchNormState | None
    stem_bias: Tensor | None
    units: list
    head_weight: Tensor
    head_bias: Tensor
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    extra: dict = field(default_factory=dict)

    def named_parameters(self):
        """(name, tensor) for every trainable tensor, in a fixed order."""
        out = [("stem.w", self.stem_weight)]
        out += _bn_params("stem.bn", self.stem_bn)
        if self.stem_bias is not None:
            out.append(("stem.b", self.stem_bias))
        for u in self.units:
            p = f"unit{u.index}"
            out.append((f"{p}.w", u.weight))
            out += _bn_params(f"{p}.bn", u.bn)
            if u.bias is not None:
                out.append((f"{p}.b", u.bias))
            if u.projection is not None:
                out.append((f"{p}.proj.w", u.projection.weight))
                out += _bn_params(f"{p}.proj.bn", u.projection.bn)
        out += [("head.w", self.head_weight), ("head.b", self.head_bias)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self):
        out = []
        if self.stem_bn is not None:
            out += _bn_buffers("stem.bn", self.stem_bn)
        for u in self.units:
            if u.bn is not None:
                out += _bn_buffers(f"unit{u.index}.bn", u.bn)
            if u.projection is not None and u.projection.bn is not None:
                out += _bn_buffers(f"unit{u.index}.proj.bn", u.projection.bn)
        return out

    def scheduled_weight_names(self):
        """Block weights that deploy as sign bits (none in FP mode)."""
        if self.mode.weight_rule is Rule.FP:
            return set()
        return {f"unit{u.index}.w" for u in self.units}

    def ste_clamped(self):
        """Latents clamped to [-1, 1] after each optimizer step."""
        if self.mode.weight_rule is Rule.STE:
            return [u.weight for u in self.units]
        return []

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def num_parameters(self):
        return sum(t.size for t in self.parameters())


def _bn_params(prefix, bn):
    if bn is None:
        return []
    return [(f"{prefix}.gamma", bn.gamma), (f"{prefix}.beta", bn.beta)]


def _bn_buffers(prefix, bn):
    return [(f"{prefix}.running_mean", bn.running_mean), (f"{prefix}.running_var", bn.running_var)]


# -- construction -------------------------------------------------------------

def _he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)


def _scheduled_init(rng, shape, fan_in):
    w = _he_uniform(rng, shape, fan_in)
    med = float(np.median(np.abs(w)))
    # the few entries pushed past 1 by the rescale are clipped back inside (-1, 1)
    return np.clip(w * (0.5 / med), -0.999, 0.999).astype(T.DTYPE)


def rescnn_stages(depth):
    """Blocks per stage: two stages, the second at twice the width and half the resolution."""
    if depth == 1:
        return [1]
    first = (depth + 1) // 2
    return [first, depth - first]


def build(arch: ArchSpec, mode: QuantMode | str, seed: int = 0, bn_eps: float = 1e-5,
          bn_momentum: float = 0.1) -> Model:
    mode = QuantMode(mode)
    counter = iter(range(10_000))

    def init(shape, fan_in, scheduled=False):
        rng = stream(seed, Role.INIT, next(counter))
        fn = _scheduled_init if scheduled else _he_uniform
        return Tensor(fn(rng, shape, fan_in), requires_grad=True)

    def bn(channels, name):
        return BatchNormState(channels, bn_eps, bn_momentum, name) if arch.batchnorm else None

    def bias(channels, name):
        return None if arch.batchnorm else Tensor(np.zeros(channels), requires_grad=True, name=name)

    c_in, h, w = arch.input_shape
    units = []
    if arch.family == "mlp":
        fan = c_in * h * w
        stem_w = init((arch.width, fan), fan)
        for i in range(arch.depth):
            units.append(_make_unit(i, init((arch.width, arch.width), arch.width, True),
                                    bn(arch.width, f"unit{i}.bn"), bias(arch.width, f"unit{i}.b"),
                                    (arch.width,), mode))
        head_in = arch.width
    else:
        stem_w = init((arch.width, c_in, 3, 3), c_in * 9)
        ch, hh, ww = arch.width, h, w
        i = 0
        for s, nblocks in enumerate(rescnn_stages(arch.depth)):
            for b in range(nblocks):
                stride = 2 if (s > 0 and b == 0) else 1
                out_ch = arch.width * (2**s)
                ho, wo = (hh - 1) // stride + 1, (ww - 1) // stride + 1
                unit = _make_unit(i, init((out_ch, ch, 3, 3), ch * 9, True), bn(out_ch, f"unit{i}.bn"),
                                  bias(out_ch, f"unit{i}.b"), (out_ch, ho, wo), mode)
                unit.stride = stride
                unit.residual = True
                if stride != 1 or out_ch != ch:
                    unit.projection = Projection(init((out_ch, ch, 1, 1), ch), bn(out_ch, f"unit{i}.proj.bn"),
                                                 stride)
                units.append(unit)
                ch, hh, ww = out_ch, ho, wo
                i += 1
        head_in = ch
    head_w = init((arch.num_classes, head_in), head_in)
    head_b = Tensor(np.zeros(arch.num_classes), requires_grad=True, name="head.b")
    stem_w.name = "stem.w"
    return Model(arch, mode, stem_w, bn(arch.width, "stem.bn"), bias(arch.width, "stem.b"), units,
                 head_w, head_b, bn_eps, bn_momentum)


def _make_unit(i, weight, bn, bias, act_shape, mode):
    weight.name = f"unit{i}.w"
    wmask = Mask(weight.shape) if mode.weight_rule is Rule.STOMPP else None
    amask = Mask(act_shape) if mode.act_rule is Rule.STOMPP else None
    return LayerState(i, weight, wmask, amask, bn, bias, act_shape)


def parameter_count(arch: ArchSpec) -> int:
    """Closed-form trainable parameter count."""
    c, h, w = arch.input_shape
    affine = 2 if arch.batchnorm else 1
    wd, k = arch.width, arch.num_classes
    if arch.family == "mlp":
        return c * h * w * wd + affine * wd + arch.depth * (wd * wd + affine * wd) + wd * k + k
    total = wd * c * 9 + affine * wd
    ch = wd
    for s, nblocks in enumerate(rescnn_stages(arch.depth)):
        out = wd * 2**s
        for b in range(nblocks):
            total += out * ch * 9 + affine * out
            if (s > 0 and b == 0) or out != ch:
                total += out * ch + (2 * out if arch.batchnorm else 0)
            ch = out
    return total + ch * k + k


# -- forward ------------------------------------------------------------------

def _affine(model, x, bn, bias, bn_training):
    if bn is not None:
        return T.batchnorm_layer(x, bn, bn_training)
    if bias is not None:
        return T.add_bias(x, bias)
    return x


def _unit_weight(model, u, deploy):
    rule = model.mode.weight_rule
    if rule is Rule.FP:
        return u.weight
    if deploy:
        return sign_apply(u.weight)
    if rule is Rule.STE:
        return ste_binarize(u.weight)
    _check_mask(u.weight_mask, u.weight.shape, u)
    return masked_forward(MaskedValue(u.weight, u.weight_mask.bits, SmoothKind.IDENTITY))


def _unit_activation(model, u, z, deploy):
    rule = model.mode.act_rule
    if rule is Rule.FP:
        return T.relu(z)
    if deploy:
        return sign_apply(z)
    if rule is Rule.STE:
        return ste_binarize(z)
    _check_mask(u.act_mask, z.shape[1:], u)
    return masked_forward(MaskedValue(z, u.act_mask.bits, SmoothKind.CLIP))


def _check_mask(mask, shape, u):
    if mask is None or mask.shape != tuple(shape):
        got = None if mask is None else mask.shape
        raise ContractError(f"unit {u.index}: mask shape {got} drifted from {tuple(shape)}")


def _stem_activation(model, z):
    if model.mode.binary_activations:
        return T.hardtanh(z)
    return T.relu(z)


def forward(model: Model, x, *, deploy: bool, bn_training: bool, trace: list | None = None) -> Tensor:
    """Shared forward path.

    ``deploy`` replaces every scheduled weight and activation by its sign;
    ``trace``, when given, collects ``(unit, role, values)`` for the tensors
    entering the scheduled computations.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    arch = model.arch
    if x.shape[1:] != tuple(arch.input_shape):
        raise DimensionError(f"batch of shape {x.shape} does not match input shape {arch.input_shape}")
    if arch.family == "mlp":
        h = T.linear(T.flatten(x), model.stem_weight)
    else:
        h = T.conv2d(x, model.stem_weight, 1, 1)
    h = _stem_activation(model, _affine(model, h, model.stem_bn, model.stem_bias, bn_training))
    for u in model.units:
        wq = _unit_weight(model, u, deploy)
        if arch.family == "mlp":
            z = T.linear(h, wq)
        else:
            z = T.conv2d(h, wq, u.stride, 1)
        z = _affine(model, z, u.bn, u.bias, bn_training)
        if u.residual:
            # post-activation residual unit: the sum is binarized, so every
            # scheduled conv sees binary inputs once its predecessor is frozen
            if u.projection is not None:
                p = u.projection
                skip = _affine(model, T.conv2d(h, p.weight, p.stride, 0), p.bn, None, bn_training)
            else:
                skip = h
            z = T.add(z, skip)
        h = _unit_activation(model, u, z, deploy)
        if trace is not None:
            trace.append((u.index, "weight", wq.data))
            trace.append((u.index, "activation", h.data))
    head_in = h
    if arch.family == "rescnn":
        head_in = T.global_avg_pool(h)
    else:
        # +/-1 features have norm sqrt(width); rescale so the FP head sees unit-scale inputs
        head_in = T.scale(h, 1.0 / math.sqrt(arch.width))
    return T.add_bias(T.linear(head_in, model.head_weight), model.head_bias)


def forward_train(model: Model, batch) -> Tensor:
    return forward(model, batch, deploy=False, bn_training=True)


def forward_proxy(model: Model, batch) -> Tensor:
    """Mixed (masked) network with batch norm in eval mode."""
    return forward(model, batch, deploy=False, bn_training=False)


def forward_deploy(model: Model, batch, trace=None) -> Tensor:
    return forward(model, batch, deploy=True, bn_training=False, trace=trace)


def set_all_masks(model: Model, value: bool) -> None:
    for u in model.units:
        for m in u.masks():
            m.fill(value)


def unit_frozen_fraction(model: Model, u: LayerState) -> float:
    """Share of the unit's scheduled entries currently evaluated through sign.

    STE-routed roles always count as frozen; FP roles are not scheduled.
    """
    frozen = total = 0
    wrule, arule = model.mode.weight_rule, model.mode.act_rule
    if wrule is Rule.STOMPP:
        frozen += u.weight_mask.frozen_count
        total += u.weight_mask.n
    elif wrule is Rule.STE:
        frozen += u.weight.size
        total += u.weight.size
    n_act = int(np.prod(u.act_shape))
    if arule is Rule.STOMPP:
        frozen += u.act_mask.frozen_count
        total += u.act_mask.n
    elif arule is Rule.STE:
        frozen += n_act
        total += n_act
    return frozen / total if total else 0.0
