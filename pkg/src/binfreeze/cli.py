"""``binfreeze train|eval|sweep|blockade|plot``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
import zlib
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, coerce, resolve
from .data import load_dataset, normalize
from .errors import ConfigError, FormatError, NumericalAbort
from .model import ArchSpec, QuantMode, build
from .progression import MaskStreams, Ordering, blockade_by_unit, make_plan, mean_target, step_masks, transition_unit
from .snapshot import checkpoint_bytes, load_checkpoint, read_snapshot, snapshot_binary
from .training import PlanConfig, Recipe, evaluate, run_training

SWEEP_AXES = {"schedule": "schedule", "refresh": "refresh_r", "lr": "lr", "epochs": "epochs", "ordering": "ordering"}


def derived_seed(seed: int, token: str) -> int:
    """Stable per-grid-point seed: ``seed + crc32(token) mod 10007``."""
    return seed + zlib.crc32(token.encode("utf-8")) % 10007


def _log(msg):
    print(msg, file=sys.stderr)


def _data_for(cfg: RunConfig):
    return load_dataset(cfg.dataset, cfg.data_path or None, cfg.train_subset, cfg.test_subset)


def arch_for(cfg: RunConfig, data) -> ArchSpec:
    return ArchSpec(cfg.arch, cfg.depth, cfg.width, data.input_shape, data.num_classes, cfg.batchnorm)


def recipe_for(cfg: RunConfig) -> Recipe:
    return Recipe(cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay, cfg.batch_size, cfg.test_batch_size,
                  cfg.epochs, cfg.seed, cfg.use_augment(), cfg.crop_pad)


def plan_for(cfg: RunConfig) -> PlanConfig:
    return PlanConfig(cfg.ordering, cfg.steps_per_layer, cfg.schedule, cfg.refresh_r, cfg.policy)


def train_run(cfg: RunConfig, out_dir: Path, data=None):
    """Train one configuration and write its artifacts into ``out_dir``."""
    data = data if data is not None else _data_for(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(cfg.to_text(), encoding="utf-8")
    res = run_training(arch_for(cfg, data), cfg.mode, plan_for(cfg), recipe_for(cfg), data, out_dir=out_dir,
                       bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum,
                       on_epoch=lambda r: _log(f"epoch {r.epoch:3d}  loss {r.train_loss:.4f}  "
                                               f"proxy {r.proxy_test_acc:.4f}  deploy {r.deploy_test_acc:.4f}"))
    res.log.write_csv(out_dir / "metrics.csv")
    res.log.write_timing(out_dir / "timing.csv")
    (out_dir / "snapshot.bnfz").write_bytes(snapshot_binary(res.model))
    (out_dir / "checkpoint.bnfz").write_bytes(checkpoint_bytes(res.model))
    return res


def _add_override_flags(p):
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"set_{f.name}", default=None, metavar="V",
                       help=f"override {f.name} (default {f.default})")


def _resolved(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}
    cfg, sources = resolve(args.config, overrides)
    _log("config precedence: flags > file > defaults")
    for f in fields(cfg):
        if sources[f.name] != "default":
            _log(f"  {f.name} = {getattr(cfg, f.name)}  ({sources[f.name]})")
    return cfg


def cmd_train(args) -> int:
    cfg = _resolved(args)
    res = train_run(cfg, Path(cfg.out_dir))
    last = res.log.rows[-1]
    print(json.dumps({"out_dir": cfg.out_dir, "deploy_test_acc": last.deploy_test_acc,
                      "proxy_test_acc": last.proxy_test_acc}))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    path = Path(args.snapshot or Path(cfg.out_dir) / "snapshot.bnfz")
    if not path.exists():
        raise FileNotFoundError(f"snapshot {path} not found")
    model = read_snapshot(path)
    data = _data_for(cfg)
    stats = (data.mean, data.std)
    out = {"snapshot": str(path),
           "deploy_train_acc": evaluate(model, data.train, True, stats, cfg.test_batch_size),
           "deploy_test_acc": evaluate(model, data.test, True, stats, cfg.test_batch_size)}
    print(json.dumps(out))
    return 0


def parse_axes(specs):
    """``["refresh=10,100", ...]`` -> ``[(axis, key, [values...]), ...]``; rejects bad values up front."""
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"sweep axis {spec!r} must look like name=v1,v2")
        name, vals = spec.split("=", 1)
        name = name.strip()
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; choose from {', '.join(SWEEP_AXES)}")
        raw = [v.strip() for v in vals.split(",") if v.strip()]
        if not raw:
            raise ConfigError(f"sweep axis {name!r} has no values")
        key = SWEEP_AXES[name]
        bad = []
        parsed = []
        for v in raw:
            try:
                val = coerce(key, v)
                RunConfig(**{key: val}).validate()
                parsed.append(val)
            except ConfigError as exc:
                bad.append(f"{v} ({exc})")
        if bad:
            raise ConfigError(f"invalid values for axis {name}: " + "; ".join(bad))
        axes.append((name, key, parsed))
    return axes


SUMMARY_COLUMNS = ["axis", "value", "seed", "schedule", "refresh_r", "ordering", "lr", "epochs",
                   "final_proxy_train", "final_proxy_test", "final_deploy_train", "final_deploy_test"]


def cmd_sweep(args) -> int:
    base = _resolved(args)
    axes = parse_axes(args.axis)
    root = Path(base.out_dir)
    data = _data_for(base)
    rows = []
    for combo in itertools.product(*[[(n, k, v) for v in vals] for n, k, vals in axes]):
        for rep in range(args.repeats):
            token = ";".join(f"{n}={v}" for n, _, v in combo)
            seed = derived_seed(base.seed + rep, token)
            cfg = base.replace(seed=seed, **{k: v for _, k, v in combo})
            name = "_".join(f"{n}-{v}" for n, _, v in combo) + f"_seed{seed}"
            cfg = cfg.replace(out_dir=str(root / name))
            _log(f"sweep point {token} seed {seed}")
            res = train_run(cfg, Path(cfg.out_dir), data)
            last = res.log.rows[-1]
            rows.append(["+".join(n for n, _, _ in combo), token, seed, cfg.schedule, cfg.refresh_r, cfg.ordering,
                         cfg.lr, cfg.epochs, f"{last.proxy_train_acc:.6f}", f"{last.proxy_test_acc:.6f}",
                         f"{last.deploy_train_acc:.6f}", f"{last.deploy_test_acc:.6f}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    w.writerows(rows)
    (root / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(str(root / "summary.csv"))
    return 0


def blockade_timeline(cfg: RunConfig, data, model=None, points_per_layer: int = 3):
    """Blockade fractions per unit over a sequence of mask states.

    Masks are stepped through the plan without training; rows are sampled at
    the start, middle and end of every layer window (or of the global window).
    """
    model = model if model is not None else build(arch_for(cfg, data), cfg.mode, cfg.seed, cfg.bn_eps,
                                                  cfg.bn_momentum)
    mode = QuantMode(cfg.mode)
    x = normalize(data.train.images[: cfg.batch_size], data.mean, data.std)
    probe = (x, data.train.labels[: cfg.batch_size])
    if not mode.uses_stompp:
        return [(0, -1, 0.0, blockade_by_unit(model, probe))]
    order = Ordering(cfg.ordering)
    E = 100 if order is not Ordering.GLOBAL else 0
    total = E * len(model.units) if E else 100
    plan = make_plan(model, order, max(E, 1), total, cfg.schedule, cfg.refresh_r, cfg.policy, cfg.seed)
    window = plan.window
    marks = sorted({int(round(j * (window - 1) / (points_per_layer - 1))) for j in range(points_per_layer)})
    starts = [0] if order is Ordering.GLOBAL else [k * window for k in range(plan.N)]
    wanted = sorted({s + m for s in starts for m in marks} | {total})
    streams = MaskStreams(cfg.seed)
    rows = []
    for e in range(total + 1):
        step_masks(model, plan, e, streams)
        if e in wanted:
            rows.append((e, transition_unit(plan, e), mean_target(plan, e), blockade_by_unit(model, probe)))
    return rows


def cmd_blockade(args) -> int:
    cfg = _resolved(args)
    data = _data_for(cfg)
    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        model = load_checkpoint(path.read_bytes())
        x = normalize(data.train.images[: cfg.batch_size], data.mean, data.std)
        rows = [(-1, -1, float("nan"), blockade_by_unit(model, (x, data.train.labels[: cfg.batch_size])))]
    else:
        rows = blockade_timeline(cfg, data)
    n = len(rows[0][3])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "transition_unit", "mean_p"] + [f"blockade_{i}" for i in range(n)])
    for e, t, p, fr in rows:
        w.writerow([e, t, f"{p:.6f}"] + [f"{f:.6f}" for f in fr])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "blockade.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_plot(args) -> int:
    from .plot import write_curves, write_heat

    for src in args.csv:
        src = Path(src)
        if not src.exists():
            raise FileNotFoundError(f"{src} not found")
        out_dir = Path(args.out_dir) if args.out_dir else src.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        dest = out_dir / (src.stem + ".svg")
        (write_curves if args.kind == "curves" else write_heat)(src, dest)
        print(str(dest))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="binfreeze", description="Progressive binarization training engine")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("eval", cmd_eval), ("sweep", cmd_sweep), ("blockade", cmd_blockade)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        _add_override_flags(sp)
        sp.set_defaults(func=fn)
        if name == "eval":
            sp.add_argument("--snapshot", default=None)
        if name == "sweep":
            sp.add_argument("--axis", action="append", required=True, help="name=v1,v2 (repeatable)")
            sp.add_argument("--repeats", type=int, default=1)
        if name == "blockade":
            sp.add_argument("--checkpoint", default=None)
    sp = sub.add_parser("plot")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--kind", choices=("curves", "sweep-heat"), default="curves")
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    except (FormatError, FileNotFoundError) as exc:
        _log(f"data error: {exc}")
        return 3
    except NumericalAbort as exc:
        _log(f"numerical abort: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
