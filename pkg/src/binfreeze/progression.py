"""Where and when freezing applies.

Layerwise plans give each scheduled unit a window of ``E`` optimizer steps;
the unit at window position ``e // E`` is in transition, earlier positions
are fully frozen and later ones fully continuous.  Reverse plans walk the
units output-to-input.  A global plan puts every unit in transition on one
schedule spanning the whole run.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .masking import (RefreshConfig, Schedule, ScheduleKind, deterministic_refresh, schedule_p,
                      soft_refresh)
from .model import LayerPhase, Model, Rule, forward_train
from .rng import Role, stream

__all__ = ["Ordering", "LayerPhase", "ProgressionPlan", "MaskStreams", "phase_of", "step_masks",
           "make_plan", "blockade_probe", "blockade_by_unit", "transition_unit"]


class Ordering(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"
    GLOBAL = "global"


@dataclass(frozen=True)
class ProgressionPlan:
    ordering: Ordering
    E: int
    units: tuple
    total_steps: int
    schedule: ScheduleKind = ScheduleKind.CUBIC
    refresh: RefreshConfig = field(default_factory=RefreshConfig)
    policy: str = "stochastic"

    def __post_init__(self):
        if self.policy not in ("stochastic", "deterministic"):
            raise ConfigError(f"unknown mask policy {self.policy!r}")
        if self.ordering is Ordering.GLOBAL:
            if self.total_steps < 1:
                raise ConfigError("global plan needs at least one step")
        elif self.E < 1:
            raise ConfigError("layerwise plan needs at least one step per layer")

    @property
    def N(self):
        return len(self.units)

    @property
    def budget(self):
        """Steps until every scheduled unit is frozen."""
        if self.ordering is Ordering.GLOBAL:
            return self.total_steps
        return self.N * self.E

    @property
    def window(self):
        return self.total_steps if self.ordering is Ordering.GLOBAL else self.E


def make_plan(model: Model, ordering, steps_per_layer: int, total_steps: int, schedule="cubic",
              refresh_r: int = 100, policy="stochastic", seed: int = 0) -> ProgressionPlan:
    ordering = Ordering(ordering)
    plan = ProgressionPlan(ordering, int(steps_per_layer), tuple(u.index for u in model.units),
                           int(total_steps), ScheduleKind(schedule), RefreshConfig(int(refresh_r), seed), policy)
    if ordering is not Ordering.GLOBAL and plan.budget > total_steps:
        raise ConfigError(f"layerwise budget of {plan.N} units x {plan.E} steps exceeds the "
                          f"{total_steps} training steps")
    if policy == "deterministic" and model.mode.act_rule is Rule.STOMPP:
        raise ConfigError("deterministic policy applies to weight masks only (BWN)")
    return plan


def phase_of(plan: ProgressionPlan, i: int, e: int):
    """Return ``(phase, local_t)`` of the unit at plan position ``i`` at step ``e``."""
    if not 0 <= i < plan.N:
        raise ContractError(f"unit position {i} outside [0, {plan.N})")
    if e >= plan.budget:
        return LayerPhase.FROZEN_PREFIX, plan.window
    if plan.ordering is Ordering.GLOBAL:
        return LayerPhase.TRANSITION, e
    pos = i if plan.ordering is Ordering.FORWARD else plan.N - 1 - i
    current = e // plan.E
    if pos < current:
        return LayerPhase.FROZEN_PREFIX, plan.E
    if pos == current:
        return LayerPhase.TRANSITION, e % plan.E
    return LayerPhase.UNFROZEN_SUFFIX, 0


def transition_unit(plan: ProgressionPlan, e: int) -> int:
    """Unit index in transition at step ``e``; -1 for global plans or after the budget."""
    if plan.ordering is Ordering.GLOBAL or e >= plan.budget:
        return -1
    pos = e // plan.E
    return plan.units[pos if plan.ordering is Ordering.FORWARD else plan.N - 1 - pos]


def target_fraction(plan: ProgressionPlan, phase, local_t) -> float:
    if phase is LayerPhase.FROZEN_PREFIX:
        return 1.0
    if phase is LayerPhase.UNFROZEN_SUFFIX:
        return 0.0
    # one refresh per step t = 1..T within the window
    return schedule_p(Schedule(plan.schedule, plan.window), local_t + 1)


class MaskStreams:
    """One persistent generator per (unit, tensor role)."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams = {}

    def get(self, unit: int, role: Role):
        key = (unit, role)
        g = self._streams.get(key)
        if g is None:
            g = self._streams[key] = stream(self.seed, role, unit)
        return g


def step_masks(model: Model, plan: ProgressionPlan, e: int, rng: MaskStreams) -> dict:
    """Set every scheduled mask for step ``e``.

    Weight and activation masks of a unit move together on the unit's
    schedule.  Returns ``{unit_index: newly_frozen_weight_bits}`` for units
    whose weight mask gained frozen entries, so the optimizer can drop their
    momentum.
    """
    if tuple(u.index for u in model.units) != plan.units:
        raise ContractError("plan units do not match the model's scheduled units")
    newly = {}
    by_index = {u.index: u for u in model.units}
    for pos, idx in enumerate(plan.units):
        u = by_index[idx]
        phase, local_t = phase_of(plan, pos, e)
        u.phase = phase
        old_w = u.weight_mask.bits.copy() if u.weight_mask is not None else None
        if phase is LayerPhase.FROZEN_PREFIX:
            for m in u.masks():
                if not m.is_full():
                    m.fill(True)
        elif phase is LayerPhase.UNFROZEN_SUFFIX:
            for m in u.masks():
                if not m.is_empty():
                    m.fill(False)
        else:
            p = target_fraction(plan, phase, local_t)
            if u.weight_mask is not None:
                if plan.policy == "deterministic":
                    new = deterministic_refresh(u.weight, p)
                else:
                    new = soft_refresh(u.weight_mask, p, plan.refresh, rng.get(idx, Role.WEIGHT_MASK))
                u.weight_mask = new
            if u.act_mask is not None:
                u.act_mask = soft_refresh(u.act_mask, p, plan.refresh, rng.get(idx, Role.ACT_MASK))
        if old_w is not None:
            gained = u.weight_mask.bits & ~old_w
            if gained.any():
                newly[idx] = gained
    return newly


def mean_target(plan: ProgressionPlan, e: int) -> float:
    return float(np.mean([target_fraction(plan, *phase_of(plan, i, e)) for i in range(plan.N)]))


# -- gradient blockade --------------------------------------------------------

def _probe_grads(model: Model, probe_batch):
    x, y = probe_batch
    saved = [(b.copy()) for _, b in model.named_buffers()]
    prev = [(t, t.grad) for t in model.parameters()]
    model.zero_grad()
    try:
        with T.Tape():
            loss = T.softmax_cross_entropy(forward_train(model, x), y)
        T.backward(loss)
        grads = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for t in model.parameters()}
    finally:
        for (_, buf), old in zip(model.named_buffers(), saved):
            buf[...] = old
        for t, g in prev:
            t.grad = g
    return grads


def blockade_by_unit(model: Model, probe_batch) -> list:
    """Per unit, the fraction of its trainable entries with an exactly-zero gradient."""
    grads = _probe_grads(model, probe_batch)
    out = []
    for u in model.units:
        params = u.trainable()
        zero = sum(int(np.count_nonzero(grads[id(t)] == 0)) for t in params)
        out.append(zero / sum(t.size for t in params))
    return out


def blockade_probe(model: Model, probe_batch, units=None) -> float:
    """Fraction of scheduled trainable entries whose gradient is identically zero.

    Scheduled entries are each unit's latent weight plus the unit's own
    affine terms (BN scale/shift, or bias when batch norm is off).  One
    forward/backward in training mode on ``probe_batch = (x, labels)``;
    running statistics and existing gradients are left untouched.
    """
    grads = _probe_grads(model, probe_batch)
    chosen = model.units if units is None else [u for u in model.units if u.index in set(units)]
    zero = total = 0
    for u in chosen:
        for t in u.trainable():
            zero += int(np.count_nonzero(grads[id(t)] == 0))
            total += t.size
    return zero / total if total else 0.0
