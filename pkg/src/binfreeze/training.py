"""Training loop: mask stepping, forward/backward, SGD, per-epoch metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, Split, augment_normalize, normalize
from .errors import ConfigError, FormatError, NumericalAbort
from .model import ArchSpec, Model, QuantMode, build, forward_deploy, forward_proxy, forward_train, unit_frozen_fraction
from .optim import SGD
from .progression import MaskStreams, Ordering, ProgressionPlan, make_plan, mean_target, step_masks, transition_unit
from .rng import Role, stream


@dataclass(frozen=True)
class Recipe:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0
    batch_size: int = 32
    test_batch_size: int = 256
    epochs: int = 40
    seed: int = 0
    augment: bool = False
    crop_pad: int = 4

    def __post_init__(self):
        if self.weight_decay != 0:
            raise ConfigError("weight decay is disabled for every run; set weight_decay = 0")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"invalid recipe {self}")


@dataclass(frozen=True)
class PlanConfig:
    ordering: str = "forward"
    steps_per_layer: int = 4  # epochs per unit transition
    schedule: str = "cubic"
    refresh_r: int = 100
    policy: str = "stochastic"


BASE_COLUMNS = ["epoch", "transition_unit", "mean_p", "train_loss", "proxy_train_acc", "proxy_test_acc",
                "deploy_train_acc", "deploy_test_acc"]


@dataclass
class EpochRecord:
    epoch: int
    transition_unit: int
    mean_p: float
    train_loss: float
    proxy_train_acc: float
    proxy_test_acc: float
    deploy_train_acc: float
    deploy_test_acc: float
    frozen: tuple
    wall_time: float = 0.0


@dataclass
class MetricsLog:
    """Per-epoch rows.  Wall time is kept out of the CSV so reruns compare byte-equal."""

    rows: list = field(default_factory=list)
    n_units: int = 0

    def columns(self):
        return BASE_COLUMNS + [f"frozen_{i}" for i in range(self.n_units)]

    def append(self, rec: EpochRecord):
        if self.rows and rec.epoch != self.rows[-1].epoch + 1:
            raise ValueError("metrics rows must have consecutive epochs")
        self.rows.append(rec)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for r in self.rows:
            w.writerow([r.epoch, r.transition_unit, f"{r.mean_p:.6f}", f"{r.train_loss:.6f}",
                        f"{r.proxy_train_acc:.6f}", f"{r.proxy_test_acc:.6f}", f"{r.deploy_train_acc:.6f}",
                        f"{r.deploy_test_acc:.6f}"] + [f"{f:.6f}" for f in r.frozen])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def write_timing(self, path):
        lines = ["epoch,wall_time"] + [f"{r.epoch},{r.wall_time:.3f}" for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file (line 1)") from None
        if header[: len(BASE_COLUMNS)] != BASE_COLUMNS:
            raise FormatError(f"{path}: unexpected header on line 1")
        n_units = len(header) - len(BASE_COLUMNS)
        log = cls(n_units=n_units)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise FormatError(f"{path}: non-numeric field on line {lineno}") from None
            log.rows.append(EpochRecord(int(vals[0]), int(vals[1]), *vals[2:8], tuple(vals[8:])))
        if not log.rows:
            raise FormatError(f"{path}: no data rows after the header (line 2)")
        return log


@dataclass
class TrainResult:
    log: MetricsLog
    model: Model
    plan: ProgressionPlan | None
    steps: int
    steps_per_epoch: int


def evaluate(model: Model, split: Split, deploy: bool, stats=None, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    fwd = forward_deploy if deploy else forward_proxy
    correct = 0
    for s in range(0, len(split), batch_size):
        x = split.images[s : s + batch_size]
        if stats is not None:
            x = normalize(x, *stats)
        logits = fwd(model, x).data
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == split.labels[s : s + batch_size]))
    return correct / len(split)


def _nan_dump(model, epoch, step, loss, out_dir):
    diag = {"epoch": epoch, "step": step, "loss": repr(loss),
            "param_norms": {n: float(np.linalg.norm(t.data)) for n, t in model.named_parameters()},
            "nonfinite_params": [n for n, t in model.named_parameters() if not np.isfinite(t.data).all()]}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nan_dump.json").write_text(json.dumps(diag, indent=2, sort_keys=True))
    return dict(diag)


def run_training(arch: ArchSpec, mode, plan_cfg: PlanConfig, recipe: Recipe, data: Dataset,
                 out_dir=None, on_epoch=None, bn_eps: float = 1e-5, bn_momentum: float = 0.1,
                 watch=None) -> TrainResult:
    """Train from scratch and log one metrics row per epoch.

    ``on_epoch(record)`` sees each row as it is produced; ``watch(stage,
    epoch, model)`` is called with ``stage`` "start" and "end" around every
    epoch (after the final mask step), for inspection only.
    """
    mode = QuantMode(mode)
    train, test = data.train, data.test
    stats = (data.mean, data.std)
    bs = recipe.batch_size
    spe = math.ceil(len(train) / bs)
    total = recipe.epochs * spe
    if arch.family == "mlp" and arch.batchnorm and (len(train) % bs == 1 or len(train) == 1):
        raise ConfigError(f"{len(train)} training samples with batch size {bs} leave a one-sample batch")

    model = build(arch, mode, recipe.seed, bn_eps, bn_momentum)
    plan = None
    if mode.uses_stompp:
        order = Ordering(plan_cfg.ordering)
        if order is not Ordering.GLOBAL and plan_cfg.steps_per_layer * arch.depth > recipe.epochs:
            raise ConfigError(f"not enough epochs: {arch.depth} units x {plan_cfg.steps_per_layer} epochs per "
                              f"layer exceeds {recipe.epochs} epochs")
        plan = make_plan(model, order, plan_cfg.steps_per_layer * spe, total, plan_cfg.schedule,
                         plan_cfg.refresh_r, plan_cfg.policy, recipe.seed)
    opt = SGD(model.parameters(), recipe.lr, recipe.momentum, recipe.nesterov, clamp=model.ste_clamped())
    streams = MaskStreams(recipe.seed)
    by_index = {u.index: u for u in model.units}
    log = MetricsLog(n_units=len(model.units))

    def drop_momentum(newly):
        for idx, bits in newly.items():
            opt.zero_velocity(by_index[idx].weight, bits)

    step = 0
    for epoch in range(recipe.epochs):
        t0 = time.perf_counter()
        if watch is not None:
            watch("start", epoch, model)
        order_idx = stream(recipe.seed, Role.SHUFFLE, epoch).permutation(len(train))
        loss_sum = 0.0
        for b in range(spe):
            idx = order_idx[b * bs : (b + 1) * bs]
            xb = train.images[idx]
            if recipe.augment:
                xb = augment_normalize(xb, stream(recipe.seed, Role.AUGMENT, epoch, b), *stats,
                                       pad=recipe.crop_pad)
            else:
                xb = normalize(xb, *stats)
            if plan is not None:
                drop_momentum(step_masks(model, plan, step, streams))
            opt.zero_grad()
            with T.Tape():
                loss = T.softmax_cross_entropy(forward_train(model, xb), train.labels[idx])
            lv = float(loss.data)
            if not math.isfinite(lv):
                diag = _nan_dump(model, epoch, step, lv, out_dir)
                diag["log"] = log
                raise NumericalAbort(f"non-finite loss {lv} at epoch {epoch}, step {step}", diag)
            T.backward(loss)
            opt.step()
            if not all(np.isfinite(t.data).all() for t in opt.params):
                diag = _nan_dump(model, epoch, step, lv, out_dir)
                diag["log"] = log
                raise NumericalAbort(f"non-finite parameters after step {step} (epoch {epoch})", diag)
            loss_sum += lv
            step += 1
        if plan is not None and epoch == recipe.epochs - 1:
            drop_momentum(step_masks(model, plan, total, streams))
        if watch is not None:
            watch("end", epoch, model)
        rec = EpochRecord(
            epoch=epoch,
            transition_unit=transition_unit(plan, step - 1) if plan is not None else -1,
            mean_p=mean_target(plan, step if epoch == recipe.epochs - 1 else step - 1) if plan is not None else 0.0,
            train_loss=loss_sum / spe,
            proxy_train_acc=evaluate(model, train, False, stats, recipe.test_batch_size),
            proxy_test_acc=evaluate(model, test, False, stats, recipe.test_batch_size),
            deploy_train_acc=evaluate(model, train, True, stats, recipe.test_batch_size),
            deploy_test_acc=evaluate(model, test, True, stats, recipe.test_batch_size),
            frozen=tuple(unit_frozen_fraction(model, u) for u in model.units),
            wall_time=time.perf_counter() - t0,
        )
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(log, model, plan, step, spe)


# -- sawtooth detection ---------------------------------------------------------

def transition_boundaries(n_units: int, epochs_per_layer: int) -> list:
    """First epoch of every layer window after the first."""
    return [k * epochs_per_layer for k in range(1, n_units)]


def sawtooth_fires(acc, boundary: int, window: int, drop: float = 2.0, recover: float = 1.0) -> bool:
    """Does a >= ``drop``-point fall happen within one epoch of ``boundary``,
    followed by a >= ``recover``-point rebound before the window ends?

    ``acc`` holds per-epoch accuracies in percentage points.
    """
    end = min(len(acc), boundary + window)
    for e in (boundary - 1, boundary, boundary + 1):
        if e < 1 or e >= end:
            continue
        if acc[e - 1] - acc[e] >= drop and max(acc[e + 1 : end], default=-math.inf) - acc[e] >= recover:
            return True
    return False


def sawtooth_rate(acc, boundaries, window: int, **kw) -> float:
    if not boundaries:
        return 0.0
    return sum(sawtooth_fires(acc, b, window, **kw) for b in boundaries) / len(boundaries)
