"""Command-line entry point.

Subcommands: train-base, train-controller, eval, sweep, random-baseline,
bench. Every run writes its fully resolved settings to
<out>/resolved_config.txt; outputs are plain CSV/NDJSON. Reruns with the
same config and seed produce byte-identical CSVs (wall-clock timing is
opt-in and quarantined to bench output for exactly that reason).

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import configio, data, network, policy
from .autograd import NumericsError
from .checkpoint import Checkpoint, CheckpointError, load_into, save_checkpoint
from .configio import ConfigFileError
from .controller import Controller, ControllerConfig, ThresholdGrid, train_controller
from .data import DataFormatError
from .network import TrainingDiverged
from .policy import PolicyError, PolicyMode

ENV_DATA_DIR = "PROGNET_DATA_DIR"


class UsageError(ValueError):
    """Bad flags or unusable inputs; maps to exit code 2."""


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# shared argument handling
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--network", required=True, help="network config file (flat key=value)")
    p.add_argument("--cifar10", metavar="DIR", help="directory with CIFAR-10 binary batches")
    p.add_argument("--synthetic", metavar="SPEC", help="synthetic dataset spec file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="max parallel fan-out")


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_network(args) -> network.NetworkConfig:
    kv = configio.read_kv(_require_file(args.network, "network config"))
    return configio.network_config_from_kv(kv)


def _load_datasets(args) -> tuple:
    """(train, val) datasets per the selector flags / env default."""
    if args.cifar10 and args.synthetic:
        raise UsageError("pass either --cifar10 or --synthetic, not both")
    if args.synthetic:
        kv = configio.read_kv(_require_file(args.synthetic, "synthetic spec"))
        val_per_tier = int(kv.pop("val_samples_per_tier", 0))
        spec = configio.synthetic_spec_from_kv(kv)
        train = data.make_synthetic(spec, split="train")
        val_spec = dataclasses.replace(
            spec, samples_per_tier=val_per_tier or max(1, spec.samples_per_tier // 5)
        )
        return train, data.make_synthetic(val_spec, split="val")
    directory = args.cifar10 or os.environ.get(ENV_DATA_DIR)
    if not directory:
        raise UsageError(
            f"no dataset: pass --cifar10 DIR or --synthetic SPEC (or set {ENV_DATA_DIR})"
        )
    if not os.path.isdir(directory):
        raise UsageError(f"dataset directory not found: {directory}")
    return data.load_cifar10(directory)


def _check_shapes(cfg: network.NetworkConfig, ds: data.Dataset) -> None:
    if tuple(ds.images.shape[1:]) != tuple(cfg.input_shape):
        raise UsageError(
            f"dataset images {tuple(ds.images.shape[1:])} do not match network input "
            f"{tuple(cfg.input_shape)}"
        )
    if ds.num_classes != cfg.num_classes:
        raise UsageError(
            f"dataset has {ds.num_classes} classes, network expects {cfg.num_classes}"
        )


def _parse_grid(text: str) -> ThresholdGrid:
    if not text:
        return ThresholdGrid.default()
    try:
        return ThresholdGrid(tuple(float(v) for v in text.split(",")))
    except ValueError as exc:
        raise UsageError(f"bad threshold grid: {exc}") from exc


def _parse_mode(text: str, num_stages: int) -> PolicyMode:
    kind, _, param = text.partition(":")
    try:
        if kind == "dynamic":
            return PolicyMode.dynamic(float(param))
        if kind == "fixed":
            mode = PolicyMode.fixed(int(param))
            if mode.m > num_stages:
                raise PolicyError(f"fixed stage {mode.m} out of range 1..{num_stages}")
            return mode
        if kind == "random":
            return PolicyMode.random(int(param) if param else 0)
    except (ValueError, PolicyError) as exc:
        raise UsageError(f"invalid mode {text!r}: {exc}") from exc
    raise UsageError(f"invalid mode {text!r}: use dynamic:T, fixed:M or random:SEED")


def _resolve_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_resolved(args, out_dir: str, extra: dict) -> None:
    resolved = {
        "command": args.command,
        "seed": str(args.seed),
        "network": os.path.abspath(args.network),
        "dataset": (
            f"synthetic:{os.path.abspath(args.synthetic)}"
            if args.synthetic
            else f"cifar10:{os.path.abspath(args.cifar10 or os.environ.get(ENV_DATA_DIR, ''))}"
        ),
        "workers": str(args.workers),
    }
    resolved.update(extra)
    configio.write_kv(os.path.join(out_dir, "resolved_config.txt"), resolved)


def _load_base(args, cfg: network.NetworkConfig) -> network.Model:
    model = network.build(cfg, init_seed=args.seed)
    load_into(
        model,
        _require_file(args.base_checkpoint, "base checkpoint"),
        "model",
        expected_digest=configio.network_config_digest(cfg),
    )
    return model


def _controller_digest(cfg: network.NetworkConfig, ctl_cfg: ControllerConfig) -> str:
    import hashlib

    payload = configio.network_config_digest(cfg) + ctl_cfg.canonical()
    return hashlib.sha256(payload.encode()).hexdigest()


def _load_controller(args, cfg: network.NetworkConfig) -> Controller:
    from .checkpoint import load_checkpoint

    path = _require_file(args.controller_checkpoint, "controller checkpoint")
    ck = load_checkpoint(path)
    if ck.kind != "controller":
        raise CheckpointError(f"{path}: not a controller checkpoint")
    ctl_kv = ck.extra.get("controller_config")
    if not ctl_kv:
        raise CheckpointError(f"{path}: missing controller config metadata")
    ctl_cfg = ControllerConfig(**ctl_kv)
    controller = Controller.init(ctl_cfg, seed=0)
    controller.load_state_dict(ck.params)
    if ck.config_digest != _controller_digest(cfg, ctl_cfg):
        raise CheckpointError(f"{path}: controller was trained against a different config")
    return controller


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train_base(args) -> int:
    cfg = _load_network(args)
    train, val = _load_datasets(args)
    _check_shapes(cfg, train)
    out_dir = _resolve_out(args)

    augment = args.augment
    if augment == "auto":
        augment = "pad-crop" if (args.cifar10 or not args.synthetic) else "none"
    augment_fn = None
    if augment != "none":
        augment_fn = lambda batch, rng: data.augment_batch(batch, rng, mode=augment)

    schedule = network.TrainSchedule(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
    )
    _write_resolved(
        args,
        out_dir,
        {
            "epochs": str(args.epochs),
            "batch_size": str(args.batch_size),
            "lr": _fmt(args.lr),
            "momentum": _fmt(args.momentum),
            "weight_decay": _fmt(args.weight_decay),
            "augment": augment,
        },
    )

    model = network.build(cfg, init_seed=args.seed)
    rows = []
    m = cfg.num_stages

    def log(row):
        print(
            f"epoch {row['epoch']:4d} lr {row['lr']:.5f} loss {row['train_loss']:.4f} "
            f"val mean {row['val_acc_mean']:.4f}",
            flush=True,
        )

    result = network.train_base(
        model,
        train.images,
        train.labels,
        val.images,
        val.labels,
        schedule,
        seed=args.seed,
        augment_fn=augment_fn,
        log_fn=log,
    )
    for row in result.history:
        rows.append(
            [str(row["epoch"]), _fmt(row["lr"]), _fmt(row["train_loss"])]
            + [_fmt(a) for a in row["val_acc"]]
            + [_fmt(row["val_acc_mean"])]
        )
    _write_csv(
        os.path.join(out_dir, "metrics.csv"),
        ["epoch", "lr", "train_loss"] + [f"val_acc_{i}" for i in range(1, m + 1)] + ["val_acc_mean"],
        rows,
    )
    save_checkpoint(
        Checkpoint(
            kind="model",
            config_digest=configio.network_config_digest(cfg),
            params=result.best_state,
            epoch=result.best_epoch,
            metric=result.best_metric,
            extra={"network_config": configio.network_config_to_kv(cfg)},
        ),
        os.path.join(out_dir, "base.ckpt"),
    )
    print(f"saved base checkpoint (best epoch {result.best_epoch}, "
          f"mean val acc {result.best_metric:.4f})")
    return 0


def cmd_train_controller(args) -> int:
    cfg = _load_network(args)
    train, _ = _load_datasets(args)
    _check_shapes(cfg, train)
    out_dir = _resolve_out(args)
    model = _load_base(args, cfg)
    grid = _parse_grid(args.grid)

    ctl_cfg = ControllerConfig(
        num_classes=cfg.num_classes,
        hidden_size=args.hidden,
        num_layers=args.layers,
        dropout=args.dropout,
        alpha=args.alpha,
        lam=args.lam,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        switch_fraction=args.switch_fraction,
    )
    _write_resolved(
        args,
        out_dir,
        {
            "base_checkpoint": os.path.abspath(args.base_checkpoint),
            "grid": ",".join(_fmt(t) for t in grid.values),
            **{k: _fmt(v) for k, v in (
                ("alpha", args.alpha), ("lam", args.lam), ("lr", args.lr),
                ("momentum", args.momentum), ("weight_decay", args.weight_decay),
                ("dropout", args.dropout), ("switch_fraction", args.switch_fraction),
            )},
            "hidden": str(args.hidden),
            "layers": str(args.layers),
            "epochs": str(args.epochs),
            "batch_size": str(args.batch_size),
        },
    )

    cache_path = args.target_cache or os.path.join(out_dir, "targets.npz")
    base_digest = configio.network_config_digest(cfg)

    def log(row):
        print(
            f"epoch {row['epoch']:4d} loss {row['loss']:.4f} ce {row['ce']:.4f} "
            f"conf_gap {row['conf_gap']:.4f} targets<-{row['target_source']}",
            flush=True,
        )

    controller, result = train_controller(
        model,
        train.images,
        train.labels,
        ctl_cfg,
        grid=grid,
        seed=args.seed,
        cache_path=cache_path,
        base_digest=base_digest,
        log_fn=log,
        workers=args.workers,
    )
    _write_csv(
        os.path.join(out_dir, "controller_metrics.csv"),
        ["epoch", "loss", "ce", "conf_gap", "target_source"],
        [
            [str(r["epoch"]), _fmt(r["loss"]), _fmt(r["ce"]), _fmt(r["conf_gap"]), r["target_source"]]
            for r in result.history
        ],
    )
    save_checkpoint(
        Checkpoint(
            kind="controller",
            config_digest=_controller_digest(cfg, ctl_cfg),
            params=controller.state_dict(),
            epoch=ctl_cfg.epochs,
            metric=result.history[-1]["conf_gap"] if result.history else None,
            extra={"controller_config": {
                k: getattr(ctl_cfg, k) for k in ctl_cfg.__dataclass_fields__
            }},
        ),
        os.path.join(out_dir, "controller.ckpt"),
    )
    print("saved controller checkpoint")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_network(args)
    _, val = _load_datasets(args)
    _check_shapes(cfg, val)
    out_dir = _resolve_out(args)
    model = _load_base(args, cfg)
    mode = _parse_mode(args.mode, cfg.num_stages)
    controller = None
    if mode.kind == "dynamic":
        if not args.controller_checkpoint:
            raise UsageError("dynamic mode needs --controller-checkpoint")
        controller = _load_controller(args, cfg)
    _write_resolved(args, out_dir, {"mode": args.mode,
                                    "base_checkpoint": os.path.abspath(args.base_checkpoint)})
    trace_path = os.path.join(out_dir, "traces.ndjson") if args.traces else None
    res = policy.evaluate(
        model, controller, val.images, val.labels, mode, trace_path=trace_path
    )
    param = {"dynamic": mode.t, "fixed": mode.m, "random": mode.seed}[mode.kind]
    _write_csv(
        os.path.join(out_dir, "eval.csv"),
        ["mode", "param", "accuracy", "mean_cost"]
        + [f"emit_hist_{i}" for i in range(1, cfg.num_stages + 1)],
        [
            [mode.kind, str(param), _fmt(res.accuracy), _fmt(res.mean_cost)]
            + [str(int(h)) for h in res.emit_hist]
        ],
    )
    print(f"{mode.kind}: accuracy {res.accuracy:.4f}, mean cost {res.mean_cost:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_network(args)
    _, val = _load_datasets(args)
    _check_shapes(cfg, val)
    out_dir = _resolve_out(args)
    model = _load_base(args, cfg)
    controller = _load_controller(args, cfg)
    grid = _parse_grid(args.grid)
    _write_resolved(args, out_dir, {
        "grid": ",".join(_fmt(t) for t in grid.values),
        "base_checkpoint": os.path.abspath(args.base_checkpoint),
        "controller_checkpoint": os.path.abspath(args.controller_checkpoint),
        "measure_wall": str(bool(args.measure_wall)),
    })
    result = policy.sweep(
        model, controller, val.images, val.labels, grid=grid,
        measure_wall=args.measure_wall,
    )
    result.write_csv(os.path.join(out_dir, "sweep.csv"))
    for row in result.rows:
        print(f"t {row.t:.2f}: cost {row.mean_cost:.4f}, acc {row.accuracy:.4f}")
    return 0


def cmd_random_baseline(args) -> int:
    cfg = _load_network(args)
    _, val = _load_datasets(args)
    _check_shapes(cfg, val)
    out_dir = _resolve_out(args)
    model = _load_base(args, cfg)
    _write_resolved(args, out_dir, {
        "trials": str(args.trials),
        "base_checkpoint": os.path.abspath(args.base_checkpoint),
    })
    points = policy.random_baseline(
        model, val.images, val.labels, trials=args.trials, seed=args.seed
    )
    _write_csv(
        os.path.join(out_dir, "random_baseline.csv"),
        ["trial", "mean_cost", "accuracy"],
        [[str(i), _fmt(c), _fmt(a)] for i, (c, a) in enumerate(points)],
    )
    print(f"{args.trials} random-termination trials written")
    return 0


def cmd_bench(args) -> int:
    import json

    cfg = _load_network(args)
    _, val = _load_datasets(args)
    _check_shapes(cfg, val)
    out_dir = _resolve_out(args)
    model = _load_base(args, cfg)
    modes = [_parse_mode(text, cfg.num_stages) for text in args.modes.split(",")]
    controller = None
    if any(m.kind == "dynamic" for m in modes):
        if not args.controller_checkpoint:
            raise UsageError("dynamic mode needs --controller-checkpoint")
        controller = _load_controller(args, cfg)
    _write_resolved(args, out_dir, {
        "modes": args.modes,
        "repeats": str(args.repeats),
        "sample": str(args.sample),
        "base_checkpoint": os.path.abspath(args.base_checkpoint),
    })
    report = policy.bench(
        model, controller, val.images, val.labels, modes,
        repeats=args.repeats, warmup=args.warmup, sample=args.sample,
    )
    with open(os.path.join(out_dir, "bench.ndjson"), "w") as fh:
        for row in report:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            print(f"{row['mode']}: median {row['median_ms_per_image']:.3f} ms/image")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prognet",
        description="progressive anytime classifier: training, controller fitting, "
        "termination-policy evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train the multi-stage base network")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--augment", choices=["auto", "pad-crop", "resize-crop", "none"],
                   default="auto")
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("train-controller", help="fit the confidence controller")
    _add_common(p)
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--switch-fraction", type=float, default=0.8)
    p.add_argument("--grid", default="", help="comma-separated thresholds (default 0.1..0.9)")
    p.add_argument("--target-cache", default="", help="path for the target-solve cache")
    p.set_defaults(fn=cmd_train_controller)

    p = sub.add_parser("eval", help="single-point evaluation under one policy mode")
    _add_common(p)
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--controller-checkpoint", default="")
    p.add_argument("--mode", required=True, help="dynamic:T | fixed:M | random:SEED")
    p.add_argument("--traces", action="store_true", help="also write traces.ndjson")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="dynamic-policy sweep over the threshold grid")
    _add_common(p)
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--controller-checkpoint", required=True)
    p.add_argument("--grid", default="")
    p.add_argument("--measure-wall", action="store_true",
                   help="time true sequential inference (makes CSV non-reproducible)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("random-baseline", help="random-termination point cloud")
    _add_common(p)
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(fn=cmd_random_baseline)

    p = sub.add_parser("bench", help="wall-clock report for policy modes")
    _add_common(p)
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--controller-checkpoint", default="")
    p.add_argument("--modes", required=True, help="comma-separated mode specs")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--sample", type=int, default=64)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (UsageError, ConfigFileError, DataFormatError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, NumericsError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
