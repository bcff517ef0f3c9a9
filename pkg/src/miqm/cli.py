"""``miqm`` command line: train, eval, errmap, maskviz, ablate, denoise-demo.

Exit codes: 0 success, 2 usage errors and missing/invalid inputs, 1 runtime
failures. Every flag can also be given in a ``--config`` file (flat
``key = value``); flags on the command line win. The effective settings
(flags, config file, seeds, package version) are written next to each
output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, normalize_key, parse_bool, read_config, write_config

log = logging.getLogger("miqm")

METRIC_CHOICES = ("mae", "psnr", "ssim", "ms-ssim", "flip", "vgg", "lpips", "dists")
DEFAULT_EVAL_METRICS = "mae,psnr,ssim,ms-ssim,flip"
RUN_CONFIG = "run_config.txt"


class UsageError(Exception):
    """Bad flag combination or missing input (exit code 2)."""


# ---------------------------------------------------------------- parsing helpers

def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; command-line flags override it")
    p.add_argument("--weights", help="backbone weights manifest (JSON); default $MIQM_WEIGHTS_MANIFEST")
    p.add_argument("--allow-equal-weights", action="store_true", help="DISTS: fall back to equal alpha/beta")
    p.add_argument("--short-side", type=int, default=224, help="resize the short image side to this (0 = keep)")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def _add_train_flags(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--metric", choices=METRIC_CHOICES, default="mae")
    p.add_argument("--data-root", help="training dataset root")
    p.add_argument("--dataset", default="kadid", help="training dataset id (kadid, tid2013, csiq, pipal, csv)")
    p.add_argument("--out", help=out_help)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miqm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"miqm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train the mask generator and scaler for one metric")
    _add_common(p)
    _add_train_flags(p, "output directory for model.miqm, logs and plots")
    p.add_argument("--levels", type=_int_list, help="restrict training to these distortion levels")
    p.add_argument("--types", type=_csv_list, help="restrict training to these distortion types or groups")
    p.add_argument("--resume", action="store_true", help="continue from <out>/state.miqm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="correlation benchmark of base and enhanced metrics")
    _add_common(p)
    p.add_argument("--datasets", type=_csv_list,
                   help="comma list of dataset ids, or id=PATH entries (e.g. tid,csiq,pipal)")
    p.add_argument("--data-root", help="directory holding one sub-directory per dataset")
    p.add_argument("--metrics", type=_csv_list, default=_csv_list(DEFAULT_EVAL_METRICS),
                   help="comma list of metric ids; prefix 'e-' for enhanced versions")
    p.add_argument("--checkpoints", help="directory of enhanced checkpoints (e-<id>.miqm or <id>/model.miqm)")
    p.add_argument("--report", help="CSV report path (JSON and PNG are written next to it)")
    p.add_argument("--subsets", type=_csv_list, help="also report per distortion group (e.g. noise,blur)")
    p.set_defaults(func=cmd_eval)

    for name, fn, helptext in (("errmap", cmd_errmap, "render a metric's error map"),
                               ("maskviz", cmd_maskviz, "render an enhanced metric's mask")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--ref", help="reference image")
        p.add_argument("--dist", help="distorted image")
        p.add_argument("--metric", choices=METRIC_CHOICES, default="mae")
        p.add_argument("--checkpoint", help="enhanced-metric checkpoint (required for maskviz)")
        p.add_argument("--out", help="output PNG (a directory with --contrast-sweep)")
        p.add_argument("--normalization", choices=("auto", "none", "sigmoid"), default="auto")
        p.add_argument("--k", type=float, help="fixed sigmoid slope (default: calibrated per map)")
        p.add_argument("--layer", default="image", help="mask layer to render for feature metrics")
        p.add_argument("--contrast-sweep", action="store_true", help="render masks at contrast x0.5, x1, x2")
        p.add_argument("--contrast-mode", choices=("residual", "pair"), default="residual")
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate", help="training-data ablations (levels, refs, categories)")
    _add_common(p)
    _add_train_flags(p, "output directory for the ablation runs and report")
    p.add_argument("--ablation", choices=("levels", "refs", "categories"), default="levels")
    p.add_argument("--test-datasets", type=_csv_list, help="comma list of id=PATH test datasets")
    p.add_argument("--sizes", type=_int_list, default=[20, 40, 60, 81], help="reference-subset sizes")
    p.add_argument("--runs-per-size", type=int, default=3)
    p.add_argument("--groups", type=_csv_list, default=["noise", "blur", "noise&blur", "all"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("denoise-demo", help="train denoisers with MAE vs E-MAE loss and compare")
    _add_common(p)
    p.add_argument("--train-root", help="clean training images")
    p.add_argument("--test-root", help="clean test images")
    p.add_argument("--emae-checkpoint", help="enhanced MAE checkpoint used as the E-MAE loss")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--sigmas", type=_float_list, default=[15.0, 25.0, 50.0, 60.0])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--patch-size", type=int, default=40)
    p.add_argument("--patches-per-epoch", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--depth", type=int, default=17)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_denoise_demo)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(sp: argparse.ArgumentParser, path: str) -> dict[str, str]:
    """Install config-file values as parser defaults (so explicit flags still win)."""
    raw = read_config(path)
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in raw.items():
        key = normalize_key(key)
        if key not in actions:
            raise ConfigError(f"{path}: unknown setting {key!r}")
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            value = parse_bool(text)
        else:
            try:
                value = a.type(text) if a.type else text
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from exc
            if a.choices is not None and value not in a.choices:
                raise ConfigError(f"{path}: {key!r} must be one of {list(a.choices)}, got {value!r}")
        defaults[key] = value
    sp.set_defaults(**defaults)
    return raw


# ---------------------------------------------------------------- shared plumbing

def _effective(args: argparse.Namespace) -> dict:
    values = {k: v for k, v in vars(args).items() if k not in ("func",)}
    values["version"] = __version__
    values["argv"] = " ".join(getattr(args, "_argv", []))
    values.pop("_argv", None)
    return values


def _record(args: argparse.Namespace, target: Path) -> Path:
    """Write the effective configuration next to an output (dir -> run_config.txt, file -> <stem>.config.txt)."""
    target = Path(target)
    path = target / RUN_CONFIG if target.is_dir() else target.with_name(target.stem + ".config.txt")
    return write_config(path, _effective(args), header=f"miqm {args.command} effective configuration")


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "", [])]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


def _existing(path: Optional[str], what: str) -> Path:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _weights(args: argparse.Namespace, needed: bool):
    from .metrics import BackboneWeights

    manifest = args.weights or os.environ.get("MIQM_WEIGHTS_MANIFEST")
    if not manifest:
        if needed:
            raise UsageError("feature metrics need backbone weights: pass --weights MANIFEST")
        return None
    return BackboneWeights.from_manifest(_existing(manifest, "weights manifest"))


def _short_side(args) -> Optional[int]:
    return args.short_side if args.short_side and args.short_side > 0 else None


def _needs_weights(metrics: Sequence[str]) -> bool:
    return any(m.lower().removeprefix("e-") in ("vgg", "lpips", "dists") for m in metrics)


def _dataset_entries(entries: Sequence[str], data_root: Optional[str]) -> list[tuple[str, Path]]:
    """``id`` (looked up under ``data_root``) or ``id=PATH``."""
    from .data import canonical_name

    out = []
    for e in entries:
        if "=" in e:
            name, path = e.split("=", 1)
            out.append((name.strip(), _existing(path.strip(), f"dataset {name.strip()!r} root")))
            continue
        if data_root is None:
            raise UsageError(f"dataset {e!r} needs --data-root or an {e}=PATH entry")
        root = Path(data_root)
        key = canonical_name(e)
        names = {e, e.lower(), e.upper(), key, key.upper()}
        hit = next((root / n for n in sorted(names) if (root / n).is_dir()), None)
        if hit is None:
            raise UsageError(f"no directory for dataset {e!r} under {root}")
        out.append((e, hit))
    return out


def _train_config(args, **overrides):
    from .training import TrainConfig

    return TrainConfig(metric=args.metric, learning_rate=args.lr, weight_decay=args.weight_decay,
                       batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       short_side=_short_side(args), val_fraction=args.val_fraction, max_steps=args.max_steps,
                       allow_equal_weights=args.allow_equal_weights, **overrides)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .data import load_dataset
    from .plots import plot_training_log
    from .training import train

    _require(args, "data_root", "out")
    root = _existing(args.data_root, "data root")
    cfg = _train_config(args, levels=args.levels, types=args.types)
    weights = _weights(args, _needs_weights([args.metric]))
    split = load_dataset(root, args.dataset, role="train")
    out = Path(args.out)
    ckpt = train(cfg, split, out, weights, resume=args.resume)
    plot_training_log(out / "train_log.csv", out / "train_log.png")
    _record(args, out)
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import benchmark, resolve_metric, write_reports

    if not args.datasets:
        raise UsageError("--datasets is empty")
    if not args.metrics:
        raise UsageError("--metrics is empty")
    _require(args, "report")
    entries = _dataset_entries(args.datasets, args.data_root)
    if any(m.lower().startswith("e-") for m in args.metrics) and args.checkpoints:
        _existing(args.checkpoints, "checkpoint directory")
    weights = _weights(args, _needs_weights(args.metrics))
    specs = [resolve_metric(m, weights, args.checkpoints, args.allow_equal_weights) for m in args.metrics]
    splits = [load_dataset(path, name) for name, path in entries]
    subsets = {s: [s] for s in args.subsets} if args.subsets else None
    reports = benchmark(specs, splits, _short_side(args), subsets)
    files = write_reports(reports, args.report, meta={"metrics": args.metrics, "datasets": args.datasets,
                                                      "version": __version__})
    _record(args, files["csv"])
    for r in reports:
        print(f"{r.dataset:>12} {r.metric:>10}  srcc={r.srcc:.4f} plcc={r.plcc:.4f} krcc={r.krcc:.4f}")
    return 0


def _load_pair(args):
    from .data import load_image, preprocess

    _require(args, "ref", "dist", "out")
    R = load_image(_existing(args.ref, "reference image"))
    D = load_image(_existing(args.dist, "distorted image"))
    if R.shape != D.shape:
        raise UsageError(f"image sizes differ: {tuple(R.shape[1:])} vs {tuple(D.shape[1:])}")
    side = _short_side(args)
    if side is not None and min(R.shape[1:]) > side:
        R, D = preprocess(R, side), preprocess(D, side)
    return R, D


def _enhanced(args):
    from .checkpoint import load_enhanced, read_manifest

    ckpt = _existing(args.checkpoint, "checkpoint")
    metric = read_manifest(ckpt).get("metric", args.metric)
    return load_enhanced(ckpt, _weights(args, _needs_weights([metric])), args.allow_equal_weights)


def cmd_errmap(args) -> int:
    import torch

    from .metrics import UNBOUNDED_MAPS, get_metric
    from .visualization import RenderSpec, render_error_map

    R, D = _load_pair(args)
    if args.checkpoint:
        E = _enhanced(args)
        metric_id = E.metric_id
        with torch.no_grad():
            result = E(R, D)
    else:
        metric_id = args.metric
        fn = get_metric(metric_id, _weights(args, _needs_weights([metric_id])), args.allow_equal_weights)
        with torch.no_grad():
            result = fn(R, D)
    norm = args.normalization
    if norm == "auto":
        norm = "sigmoid" if metric_id in UNBOUNDED_MAPS else "none"
    out = render_error_map(result, RenderSpec("magma", norm, args.k), args.out)
    _record(args, out)
    print(out)
    return 0


def cmd_maskviz(args) -> int:
    import torch

    from .visualization import contrast_sweep, render_mask

    if not args.checkpoint:
        raise UsageError("maskviz needs --checkpoint")
    R, D = _load_pair(args)
    E = _enhanced(args)
    layer = args.layer if args.layer in E.layer_names else E.layer_names[0]
    out = Path(args.out)
    if args.contrast_sweep:
        out.mkdir(parents=True, exist_ok=True)
        for f, _, path in contrast_sweep(E, R, D, mode=args.contrast_mode, out_dir=out, layer=layer):
            print(path)
        _record(args, out)
        return 0
    with torch.no_grad():
        mask = E(R, D).masks[layer]
    path = render_mask(mask, out)
    _record(args, path)
    print(path)
    return 0


def cmd_ablate(args) -> int:
    from .data import load_dataset
    from .training import run_ablation_categories, run_ablation_levels, run_ablation_refs

    _require(args, "data_root", "out", "test_datasets")
    root = _existing(args.data_root, "data root")
    tests = [load_dataset(path, name) for name, path in _dataset_entries(args.test_datasets, None)]
    weights = _weights(args, _needs_weights([args.metric]))
    train_split = load_dataset(root, args.dataset, role="train")
    cfg = _train_config(args)
    out = Path(args.out)
    if args.ablation == "levels":
        report = run_ablation_levels(cfg, train_split, tests, out, weights)
    elif args.ablation == "refs":
        report = run_ablation_refs(cfg, train_split, tests, out, weights, sizes=args.sizes,
                                   runs_per_size=args.runs_per_size)
    else:
        report = run_ablation_categories(cfg, train_split, tests[0], out, weights, groups=args.groups)
    _record(args, out)
    for k, v in report["files"].items():
        print(f"{k}: {v}")
    return 0


def cmd_denoise_demo(args) -> int:
    from .restoration import DenoiseConfig, run_denoise_demo

    _require(args, "train_root", "test_root", "emae_checkpoint", "out")
    _existing(args.train_root, "training image directory")
    _existing(args.test_root, "test image directory")
    _existing(args.emae_checkpoint, "E-MAE checkpoint")
    base = DenoiseConfig(loss="mae", train_root=args.train_root, emae_checkpoint=args.emae_checkpoint,
                         epochs=args.epochs, patch_size=args.patch_size, patches_per_epoch=args.patches_per_epoch,
                         batch_size=args.batch_size, learning_rate=args.lr, depth=args.depth, width=args.width,
                         max_steps=args.max_steps)
    weights = _weights(args, False)
    result = run_denoise_demo(base, args.test_root, args.out, seeds=args.seeds, sigmas=args.sigmas, weights=weights)
    _record(args, Path(args.out))
    print(result["csv"])
    return 0


# ---------------------------------------------------------------- entry point

def main(argv: Optional[Sequence[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .data import DatasetError
    from .metrics.weights import WeightsError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sp = _subparser(parser, args.command)
    try:
        if args.config:
            _apply_config(sp, args.config)
            args = parser.parse_args(argv)
    except ConfigError as exc:
        sp.print_usage(sys.stderr)
        print(f"miqm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, WeightsError, CheckpointError, FileNotFoundError) as exc:
        sp.print_usage(sys.stderr)
        print(f"miqm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, don't dump a traceback unless debugging
        log.debug("failure", exc_info=True)
        print(f"miqm {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
