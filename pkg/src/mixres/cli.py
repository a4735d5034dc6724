"""The ``mixres`` command line: train, eval, sweep, compare-mixup,
mixup-preview, and gradcheck.

Exit codes are stable: 0 success, 1 check failure, 2 usage/config error,
3 data error, 4 checkpoint error. Every command that owns an output
directory echoes its fully resolved configuration there as ``effective.cfg``
(flat ``key = value`` text that can be fed back via ``--config``).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from . import gradcheck, sweep as sweep_mod, trainer
from .augment import MixupConfig
from .errors import CheckpointError, ConfigError, DataError, TrainingDiverged
from .resnet import ARCH_PRESETS, load_checkpoint
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4

# key -> (type tag, description) for the flat config file / effective echo
_TRAIN_KEYS = {
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "t_max": int,
    "eta_min": float,
    "momentum": float,
    "weight_decay": float,
    "alpha": float,
    "mixup": bool,
    "crop_pad": int,
    "flip_p": float,
    "loss_reduction": str,
    "seed": int,
    "eval_every": int,
    "arch": str,
    "zero_init_residual": bool,
    "subset": int,
    "test_subset": int,
}

_TRAIN_DEFAULTS = {
    "lr": 0.05, "batch_size": 128, "epochs": 200, "t_max": 200, "eta_min": 0.0,
    "momentum": 0.9, "weight_decay": 5e-4, "alpha": 1.0, "mixup": True,
    "crop_pad": 4, "flip_p": 0.5, "loss_reduction": "mean", "seed": 0,
    "eval_every": 1, "arch": "resnet50", "zero_init_residual": False,
    "subset": None, "test_subset": None,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        code = exc.code
        return int(code) if code is not None else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixres",
        description="Pre-activation GELU ResNet training on CIFAR-10 with mixup regularization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and log per-epoch metrics")
    _add_train_flags(p_train)
    p_train.add_argument("--resume", action="store_true", help="continue from the out dir's last state")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-dir")
    p_eval.add_argument("--batch-size", type=int, default=128)
    p_eval.add_argument("--subset", type=int, help="train records used for normalization stats")
    p_eval.add_argument("--test-subset", type=int)
    p_eval.add_argument("--json", action="store_true", help="print machine-readable JSON")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="hyperband search over training hyperparameters")
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--spec", help="sweep spec file (params, R, eta, seed)")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel trials per rung")
    p_sweep.add_argument("--sweep-on-test",
                         action="store_true",
                         help="score trials on the real test split instead of a held-out slice")
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare-mixup", help="paired runs with and without mixup")
    _add_train_flags(p_cmp)
    p_cmp.set_defaults(func=cmd_compare_mixup)

    p_prev = sub.add_parser("mixup-preview", help="write PPM previews of two mixed images")
    p_prev.add_argument("--data-dir")
    p_prev.add_argument("--index-a", type=int, required=True)
    p_prev.add_argument("--index-b", type=int, required=True)
    p_prev.add_argument("--lam", type=float, required=True)
    p_prev.add_argument("--out", default="runs/preview")
    p_prev.set_defaults(func=cmd_mixup_preview)

    p_grad = sub.add_parser("gradcheck", help="finite-difference checks over every op")
    p_grad.add_argument("--op", action="append", help="restrict to one op (repeatable)")
    p_grad.add_argument("--trials", type=int, default=50, help="random shapes per op per dtype")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--corrupt-op", help="test hook: corrupt this op's backward result")
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", help=f"dataset directory (or ${data_mod.DATA_DIR_ENV})")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="flat key = value config file, [train] section")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved config as JSON and exit")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--t-max", type=int, dest="t_max")
    p.add_argument("--eta-min", type=float, dest="eta_min")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--alpha", type=float, help="mixup beta-distribution shape")
    mix = p.add_mutually_exclusive_group()
    mix.add_argument("--mixup", dest="mixup", action="store_true", default=None)
    mix.add_argument("--no-mixup", dest="mixup", action="store_false", default=None)
    p.add_argument("--crop-pad", type=int, dest="crop_pad")
    p.add_argument("--flip-p", type=float, dest="flip_p")
    p.add_argument("--loss-reduction", choices=["mean", "sum"], dest="loss_reduction")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--arch", choices=sorted(ARCH_PRESETS))
    p.add_argument("--zero-init-residual", dest="zero_init_residual",
                   action="store_true", default=None)
    p.add_argument("--subset", type=int, help="train on the first N records only")
    p.add_argument("--test-subset", type=int, dest="test_subset",
                   help="evaluate on the first N test records only")


# ---------------------------------------------------------------------------
# config resolution: defaults <- config file <- flags
# ---------------------------------------------------------------------------

def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(_TRAIN_DEFAULTS)
    if getattr(args, "config", None):
        _apply_config_file(settings, args.config)
    for key in _TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _apply_config_file(settings: dict, path: str) -> None:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file: {path}")
    if not parser.has_section("train"):
        raise ConfigError(f"config file {path} has no [train] section")
    for key, raw in parser["train"].items():
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"config file {path}: unknown key {key!r} in [train]")
        if raw == "":
            settings[key] = None
            continue
        kind = _TRAIN_KEYS[key]
        try:
            if kind is bool:
                settings[key] = parser["train"].getboolean(key)
            else:
                settings[key] = kind(raw)
        except ValueError as exc:
            raise ConfigError(f"config file {path}: bad value for {key!r}: {raw!r}") from exc


def settings_to_train_config(settings: dict) -> TrainConfig:
    arch_name = settings["arch"]
    if arch_name not in ARCH_PRESETS:
        raise ConfigError(f"unknown arch {arch_name!r}; choices: {sorted(ARCH_PRESETS)}")
    arch = dataclasses.replace(ARCH_PRESETS[arch_name],
                               zero_init_residual=bool(settings["zero_init_residual"]))
    return TrainConfig(
        lr=settings["lr"], batch_size=settings["batch_size"], epochs=settings["epochs"],
        t_max=settings["t_max"], eta_min=settings["eta_min"], momentum=settings["momentum"],
        weight_decay=settings["weight_decay"],
        mixup=MixupConfig(alpha=settings["alpha"], enabled=bool(settings["mixup"])),
        crop_pad=settings["crop_pad"], flip_p=settings["flip_p"],
        loss_reduction=settings["loss_reduction"], seed=settings["seed"],
        eval_every=settings["eval_every"], arch=arch,
    )


def write_effective_config(out_dir: Path, settings: dict, extra: Optional[dict] = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["[train]"]
    for key in _TRAIN_KEYS:
        value = settings.get(key)
        lines.append(f"{key} = {'' if value is None else value}")
    if extra:
        lines.append("")
        lines.append("[run]")
        for key, value in sorted(extra.items()):
            lines.append(f"{key} = {value}")
    (out_dir / "effective.cfg").write_text("\n".join(lines) + "\n")


def _load_splits(args: argparse.Namespace, settings: dict):
    """Load, subset, and normalize train/test from the resolved data dir."""
    data_dir = data_mod.resolve_data_dir(getattr(args, "data_dir", None))
    train, test = data_mod.load_cifar10_binary(data_dir)
    if settings.get("subset"):
        train = train.take(int(settings["subset"]))
    if settings.get("test_subset"):
        test = test.take(int(settings["test_subset"]))
    stats = data_mod.compute_norm_stats(train)
    return data_mod.normalize(train, stats), data_mod.normalize(test, stats), data_dir


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    config = settings_to_train_config(settings)
    if args.print_config:
        print(json.dumps({**settings, "out": args.out, "data_dir": args.data_dir},
                         sort_keys=True, indent=2, default=str))
        return EXIT_OK
    out = Path(args.out) if args.out else Path("runs/train")
    train, test, data_dir = _load_splits(args, settings)
    write_effective_config(out, settings, {"command": "train", "data_dir": data_dir, "out": out})
    log = trainer.fit(config, train, test, out_dir=out, resume=args.resume)
    final = log.final()
    print(f"epochs: {log.summary['epochs_completed']}  "
          f"final train loss: {final.train_loss:.4f}  "
          f"test error: {final.test_error_pct:.2f}%  "
          f"(best {log.summary['best_test_error_pct']:.2f}% @ epoch {log.summary['best_epoch']})")
    print(f"run log: {out / trainer.RUNLOG_NAME}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    settings = {"subset": args.subset, "test_subset": args.test_subset}
    _, test, _ = _load_splits(args, settings)
    test_loss, error_pct = trainer.evaluate(model, test, args.batch_size)
    if args.json:
        print(json.dumps({"test_loss": test_loss, "error_pct": error_pct}, sort_keys=True))
    else:
        print(f"test_loss: {test_loss:.4f}  error: {error_pct:.2f}%")
    return EXIT_OK


def cmd_compare_mixup(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    config = settings_to_train_config(settings)
    if args.print_config:
        print(json.dumps(settings, sort_keys=True, indent=2, default=str))
        return EXIT_OK
    out = Path(args.out) if args.out else Path("runs/compare")
    train, test, data_dir = _load_splits(args, settings)
    write_effective_config(out, settings, {"command": "compare-mixup", "data_dir": data_dir})
    result = trainer.compare_mixup(config, train, test, out_dir=out)
    deltas = result["deltas"]
    print(f"final train loss  mixup: {deltas['final_train_loss_mixup']:.4f}  "
          f"no-mixup: {deltas['final_train_loss_nomixup']:.4f}")
    print(f"final test loss   mixup: {deltas['final_test_loss_mixup']:.4f}  "
          f"no-mixup: {deltas['final_test_loss_nomixup']:.4f}  "
          f"ratio(no/mix): {deltas['test_loss_ratio_nomixup_over_mixup']:.3f}")
    print(f"curves: {out / 'mixup' / trainer.SUMMARY_CSV_NAME} , "
          f"{out / 'nomixup' / trainer.SUMMARY_CSV_NAME}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    base_config = settings_to_train_config(settings)
    spec = sweep_mod.parse_sweep_spec(args.spec) if args.spec else sweep_mod.SweepSpec(
        space=sweep_mod.SWEEP_DEFAULT_SPACE)
    if args.seed is not None:
        spec.seed = args.seed
    if args.print_config:
        print(json.dumps({**settings, "R": spec.R, "eta": spec.eta, "sweep_seed": spec.seed},
                         sort_keys=True, indent=2, default=str))
        return EXIT_OK
    out = Path(args.out) if args.out else Path("runs/sweep")
    train, test, data_dir = _load_splits(args, settings)
    write_effective_config(out, settings,
                           {"command": "sweep", "R": spec.R, "eta": spec.eta,
                            "sweep_seed": spec.seed, "data_dir": data_dir})

    if args.sweep_on_test:
        fit_split, metric_split = train, test
    else:
        val_n = min(5000, max(1, len(train) // 5))
        fit_split = train.slice(0, len(train) - val_n, name="sweep-train")
        metric_split = train.slice(len(train) - val_n, len(train), name="sweep-val")

    print("bracket/rung table:")
    for bracket in sweep_mod.hyperband_brackets(spec.R, spec.eta):
        rungs = " -> ".join(f"({n},{r})" for n, r in bracket.rungs)
        print(f"  s={bracket.s}: {rungs}")

    objective = _make_training_objective(base_config, spec, fit_split, metric_split, out)
    best, trials = sweep_mod.hyperband(spec.space, spec.R, spec.eta, objective,
                                       seed=spec.seed, jobs=args.jobs)
    sweep_mod.write_trials_json(trials, out / "trials.json")
    report = sweep_mod.sweep_report(trials, spec.space, out)
    corr = sweep_mod.correlation_report(trials, spec.space)
    sweep_mod.write_correlation_csv(corr, out / "correlation.csv")
    print(f"best trial {best.trial_id}: metric={best.metric:.4f} config={best.config}")
    print(f"reports: {report['table']} , {out / 'correlation.csv'}")
    return EXIT_OK


def _make_training_objective(base: TrainConfig, spec: sweep_mod.SweepSpec,
                             fit_split, metric_split, out: Path):
    def objective(config: dict, epochs: int, trial_id: int) -> float:
        overrides = {k: v for k, v in config.items()
                     if k in ("lr", "batch_size", "momentum", "weight_decay")}
        mixup_cfg = base.mixup
        if "alpha" in config:
            mixup_cfg = dataclasses.replace(base.mixup, alpha=float(config["alpha"]))
        trial_config = dataclasses.replace(
            base, epochs=epochs, t_max=max(spec.R, epochs), mixup=mixup_cfg,
            seed=sweep_mod.trial_seed(spec.seed, trial_id),
            **overrides)
        log = trainer.fit(trial_config, fit_split, metric_split,
                          out_dir=out / "trials" / f"trial_{trial_id}", resume=True)
        return 1.0 - log.final().test_error_pct / 100.0

    return objective


def cmd_mixup_preview(args: argparse.Namespace) -> int:
    if not 0.0 <= args.lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0,1], got {args.lam}")
    data_dir = data_mod.resolve_data_dir(args.data_dir)
    train, _ = data_mod.load_cifar10_binary(data_dir)
    n = len(train)
    for idx in (args.index_a, args.index_b):
        if not 0 <= idx < n:
            raise DataError(f"image index {idx} out of range [0, {n})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    a = train.images.data[args.index_a].astype(np.float64)
    b = train.images.data[args.index_b].astype(np.float64)
    mixed = args.lam * a + (1.0 - args.lam) * b
    data_mod.write_ppm(out / "a.ppm", a)
    data_mod.write_ppm(out / "b.ppm", b)
    data_mod.write_ppm(out / "mixed.ppm", mixed)
    write_effective_config(out, dict(_TRAIN_DEFAULTS),
                           {"command": "mixup-preview", "index_a": args.index_a,
                            "index_b": args.index_b, "lam": args.lam})
    print(f"wrote {out / 'a.ppm'}, {out / 'b.ppm'}, {out / 'mixed.ppm'}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gradcheck.run_suite(op_names=args.op, trials_per_dtype=args.trials,
                                  seed=args.seed, corrupt_op=args.corrupt_op)
    print(f"{'op':24s} {'worst rel err f32':>18s} {'worst rel err f64':>18s}  status")
    failures = []
    for name, rep in results.items():
        status = "ok" if rep["passed"] else "FAIL"
        if not rep["passed"]:
            failures.append(name)
        print(f"{name:24s} {rep['f32']:>18.3e} {rep['f64']:>18.3e}  {status}")
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
