"""Training loop for enhanced metrics, resumable state, and the ablation drivers.

Recipe: AdamW (decoupled decay on weights only, biases excluded), lr 1e-4,
decay 1e-6, batch 4. Each epoch shuffles with a stream derived from
``(seed, epoch)``, so resuming needs only the step counter. The model with
the best validation SRCC (10% of the references held out) is kept.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import (
    CheckpointError,
    config_digest,
    load_enhanced,
    read_tensors,
    save_enhanced,
    write_tensors,
)
from .data import DatasetSplit, PairCache, filter_ablation, sample_refs
from .evaluation import MetricSpec, correlate, score_split, srcc
from .masking import EnhancedMetric, TrainingStepError, training_loss
from .metrics import LOWER_BETTER, BackboneWeights, canonical_metric

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss", "val_srcc")
MODEL_FILE = "model.miqm"
STATE_FILE = "state.miqm"
LOG_FILE = "train_log.csv"


class TrainingError(RuntimeError):
    """Training aborted; the last good checkpoint (if any) is left in place."""


@dataclass
class TrainConfig:
    metric: str = "mae"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    short_side: Optional[int] = 224
    val_fraction: float = 0.1
    levels: Optional[tuple[int, ...]] = None
    refs: Optional[tuple[str, ...]] = None
    types: Optional[tuple] = None
    max_steps: Optional[int] = None
    allow_equal_weights: bool = False

    def __post_init__(self):
        self.metric = canonical_metric(self.metric)
        for name in ("learning_rate", "batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        for name in ("levels", "refs", "types"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, tuple(v))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def digest(self) -> str:
        """Digest of everything that shapes the optimisation (the step budget excluded)."""
        d = self.to_dict()
        d.pop("max_steps")
        return config_digest(d)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    running_loss: Optional[float] = None
    best_val_srcc: Optional[float] = None
    best_epoch: Optional[int] = None
    best_checkpoint: Optional[str] = None
    history: list = field(default_factory=list)


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return math.ceil(n_records / batch_size)


def holdout_refs(split: DatasetSplit, fraction: float, seed: int) -> list[str]:
    """Reference ids held out for validation (``round(fraction * n_refs)``, 0 if fewer than 5 refs)."""
    ids = split.ref_ids
    n = int(round(fraction * len(ids)))
    if len(ids) < 5 or n == 0:
        return []
    rng = np.random.default_rng([seed, 1])
    return sorted(ids[i] for i in rng.choice(len(ids), size=n, replace=False))


def select_records(config: TrainConfig, data: DatasetSplit) -> tuple[DatasetSplit, Optional[DatasetSplit]]:
    """Apply ablation filters, then split off the validation references."""
    split = data
    if any(v is not None for v in (config.levels, config.refs, config.types)):
        split = filter_ablation(split, levels=config.levels, refs=config.refs, types=config.types)
    val_ids = set(holdout_refs(split, config.val_fraction, config.seed))
    if not val_ids:
        return split, None
    train = replace(split, records=tuple(r for r in split.records if r.ref_id not in val_ids))
    val = replace(split, records=tuple(r for r in split.records if r.ref_id in val_ids), role="test")
    return train, val


def make_optimizer(E: EnhancedMetric, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW with weight decay on weight tensors only; biases in a zero-decay group."""
    decay = [p for n, p in E.named_parameters() if not n.endswith("bias")]
    no_decay = [p for n, p in E.named_parameters() if n.endswith("bias")]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8,
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def _batch_loss(E, cache: PairCache, records, ids) -> torch.Tensor:
    pairs = [cache.pair(r) for r in records]
    mos = torch.tensor([r.mos for r in records], dtype=torch.float32)
    if len({p[0].shape for p in pairs}) == 1:
        R = torch.stack([p[0] for p in pairs])
        D = torch.stack([p[1] for p in pairs])
        return training_loss(E, R, D, mos, batch=ids)
    # mixed sizes: average per-sample losses
    losses = [training_loss(E, R[None], D[None], mos[i:i + 1], batch=[ids[i]]) for i, (R, D) in enumerate(pairs)]
    return torch.stack(losses).mean()


def validation_srcc(E: EnhancedMetric, split: DatasetSplit, short_side: Optional[int]) -> float:
    spec = MetricSpec(f"e-{E.metric_id}", lambda R, D: E(R, D).score, E.orientation)
    scores = score_split([spec], split, short_side)[spec.name]
    if E.orientation == LOWER_BETTER:
        scores = -scores
    if len(scores) < 3:
        return float("nan")
    return srcc(scores, [r.mos for r in split.records])


def _save_state(path: Path, E: EnhancedMetric, opt, state: TrainState, config: TrainConfig) -> Path:
    tensors = {f"model.{k}": v for k, v in E.state_dict().items()}
    osd = opt.state_dict()
    for idx, st in osd["state"].items():
        for key, val in st.items():
            tensors[f"opt.{idx}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    header = {
        "kind": "train-state",
        "metric": E.metric_id,
        "config": config.to_dict(),
        "config_digest": config.digest,
        "param_groups": osd["param_groups"],
        "state": asdict(state),
    }
    return write_tensors(path, tensors, header)


def _load_state(path: Path, E: EnhancedMetric, opt, config: TrainConfig) -> TrainState:
    header, tensors = read_tensors(path)
    if header.get("kind") != "train-state":
        raise CheckpointError(f"{path}: not a training-state file")
    if header["config_digest"] != config.digest:
        raise CheckpointError(f"{path}: saved under a different configuration")
    E.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    opt_state: dict = {}
    for name, t in tensors.items():
        if name.startswith("opt."):
            _, idx, key = name.split(".", 2)
            opt_state.setdefault(int(idx), {})[key] = t
    opt.load_state_dict({"state": opt_state, "param_groups": header["param_groups"]})
    return TrainState(**header["state"])


def _append_log(path: Path, rows: list[dict], truncate_after: Optional[int] = None) -> None:
    existing: list[dict] = []
    if truncate_after is not None and path.exists():
        with open(path, newline="", encoding="utf-8") as f:
            existing = [r for r in csv.DictReader(f) if int(r["step"]) <= truncate_after]
    mode = "w" if truncate_after is not None or not path.exists() else "a"
    with open(path, mode, newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        if mode == "w":
            w.writeheader()
            w.writerows(existing)
        w.writerows(rows)


def train(
    config: TrainConfig,
    data: DatasetSplit,
    out_dir: str | Path,
    weights: Optional[BackboneWeights] = None,
    resume: bool = False,
) -> Path:
    """Train an enhanced metric; returns the path of the best checkpoint.

    Writes ``model.miqm`` (best validation SRCC, or the latest weights when
    there is no validation split), ``state.miqm`` (resumable optimizer
    state) and ``train_log.csv`` into ``out_dir``. With ``resume=True`` the
    run continues from ``state.miqm``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_split, val_split = select_records(config, data)
    if len(train_split) == 0:
        raise TrainingError("no training records left after the validation holdout")
    torch.manual_seed(config.seed)
    E = EnhancedMetric(config.metric, weights, seed=config.seed, allow_equal_weights=config.allow_equal_weights)
    E.train()
    opt = make_optimizer(E, config)
    state = TrainState()
    model_path, state_path, log_path = out / MODEL_FILE, out / STATE_FILE, out / LOG_FILE
    if resume:
        state = _load_state(state_path, E, opt, config)
        _append_log(log_path, [], truncate_after=state.step)
        log.info("resumed at step %d (epoch %d)", state.step, state.epoch)
    else:
        _append_log(log_path, [], truncate_after=0)

    cache = PairCache(short_side=config.short_side)
    records = train_split.records
    per_epoch = steps_per_epoch(len(records), config.batch_size)
    meta = {"n_train": len(records), "n_val": 0 if val_split is None else len(val_split),
            "val_refs": [] if val_split is None else val_split.ref_ids}

    def finish_epoch(epoch: int) -> Optional[float]:
        val = validation_srcc(E, val_split, config.short_side) if val_split is not None else None
        improved = val is None or (math.isfinite(val) and (state.best_val_srcc is None or val > state.best_val_srcc))
        if improved or not model_path.exists():
            save_enhanced(model_path, E, config.to_dict(), extra={**meta, "epoch": epoch, "step": state.step,
                                                                   "val_srcc": val})
            state.best_val_srcc, state.best_epoch = val, epoch
            state.best_checkpoint = MODEL_FILE
        state.history.append({"epoch": epoch, "step": state.step, "val_srcc": val})
        return val

    while state.epoch < config.epochs:
        order = epoch_order(len(records), config.seed, state.epoch)
        start_batch = state.step - state.epoch * per_epoch
        rows = []
        stopped = False
        for b in range(start_batch, per_epoch):
            if config.max_steps is not None and state.step >= config.max_steps:
                stopped = True
                break
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = [records[i] for i in idx]
            ids = [str(r.dist_path.name) for r in batch]
            try:
                loss = _batch_loss(E, cache, batch, ids)
            except TrainingStepError as exc:
                _append_log(log_path, rows)
                raise TrainingError(f"step {state.step + 1}: {exc}; last good checkpoint kept at {model_path}") from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.step += 1
            value = float(loss.detach())
            state.running_loss = value if state.running_loss is None else 0.98 * state.running_loss + 0.02 * value
            rows.append({"step": state.step, "epoch": state.epoch, "loss": f"{value:.9g}", "val_srcc": ""})
        if stopped:
            _append_log(log_path, rows)
            break
        val = finish_epoch(state.epoch)
        if rows and val is not None:
            rows[-1]["val_srcc"] = f"{val:.9g}"
        _append_log(log_path, rows)
        state.epoch += 1
        _save_state(state_path, E, opt, state, config)

    if config.max_steps is not None and state.step >= config.max_steps and state.epoch < config.epochs:
        _save_state(state_path, E, opt, state, config)
        if not model_path.exists():
            save_enhanced(model_path, E, config.to_dict(), extra={**meta, "epoch": state.epoch, "step": state.step,
                                                                   "val_srcc": None})
    (out / "train_summary.json").write_text(json.dumps(
        {"config": config.to_dict(), "state": asdict(state), **meta}, indent=2, sort_keys=True), encoding="utf-8")
    return model_path


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ------------------------------------------------------------------ ablations


def _evaluate_enhanced(ckpt: Path, weights, test_splits: Sequence[DatasetSplit], short_side, allow_equal_weights=False):
    E = load_enhanced(ckpt, weights, allow_equal_weights=allow_equal_weights)
    spec = MetricSpec(f"e-{E.metric_id}", lambda R, D: E(R, D).score, E.orientation)
    out = {}
    for split in test_splits:
        scores = score_split([spec], split, short_side)[spec.name]
        out[split.name] = correlate(scores, [r.mos for r in split.records], split.name, spec.name, spec.orientation)
    return out


def _write_ablation(out: Path, name: str, rows: list[dict], report: dict, plot_kw: dict) -> dict:
    from .plots import plot_ablation

    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    json_path = out / f"{name}.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True, default=str), encoding="utf-8")
    png = plot_ablation(report.get("plot_rows", rows), out / f"{name}.png", **plot_kw)
    report["files"] = {"csv": str(csv_path), "json": str(json_path), "png": str(png)}
    return report


def run_ablation_levels(
    base: TrainConfig,
    train_split: DatasetSplit,
    test_splits: Sequence[DatasetSplit],
    out_dir: str | Path,
    weights: Optional[BackboneWeights] = None,
    levels: Optional[Sequence[int]] = None,
) -> dict:
    """One model per single distortion level plus the all-level model."""
    out = Path(out_dir)
    levels = list(levels) if levels is not None else train_split.levels
    variants = [(str(l), (l,)) for l in levels] + [("all", None)]
    rows = []
    for label, lv in variants:
        cfg = replace(base, levels=lv)
        ckpt = train(cfg, train_split, out / f"level_{label}", weights)
        for ds, rep in _evaluate_enhanced(ckpt, weights, test_splits, base.short_side, base.allow_equal_weights).items():
            rows.append({"variant": label, "dataset": ds, "srcc": rep.srcc, "plcc": rep.plcc, "krcc": rep.krcc,
                         "n": rep.n, "checkpoint": str(ckpt)})
    report = {"ablation": "levels", "metric": base.metric, "seed": base.seed, "rows": rows}
    return _write_ablation(out, "ablation_levels", rows, report, {"x": "variant", "y": "srcc"})


def run_ablation_refs(
    base: TrainConfig,
    train_split: DatasetSplit,
    test_splits: Sequence[DatasetSplit],
    out_dir: str | Path,
    weights: Optional[BackboneWeights] = None,
    sizes: Sequence[int] = (20, 40, 60, 81),
    runs_per_size: int = 3,
) -> dict:
    """Models trained on random reference subsets; mean and std SRCC per size."""
    out = Path(out_dir)
    total = len(train_split.ref_ids)
    rows = []
    for size in sizes:
        if size > total:
            raise ValueError(f"cannot sample {size} references from {total}")
        runs = 1 if size == total else runs_per_size
        for run in range(runs):
            refs = None if size == total else tuple(sample_refs(train_split, size, seed=base.seed * 100003 + size * 101 + run))
            cfg = replace(base, refs=refs)
            ckpt = train(cfg, train_split, out / f"refs_{size}_run{run}", weights)
            for ds, rep in _evaluate_enhanced(ckpt, weights, test_splits, base.short_side,
                                              base.allow_equal_weights).items():
                rows.append({"size": size, "run": run, "dataset": ds, "srcc": rep.srcc, "plcc": rep.plcc,
                             "krcc": rep.krcc, "n": rep.n, "checkpoint": str(ckpt)})
    summary = []
    for size in sizes:
        for ds in dict.fromkeys(r["dataset"] for r in rows):
            vals = np.array([r["srcc"] for r in rows if r["size"] == size and r["dataset"] == ds], dtype=float)
            summary.append({"size": size, "dataset": ds, "runs": int(vals.size), "srcc": float(vals.mean()),
                            "srcc_std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0})
    report = {"ablation": "refs", "metric": base.metric, "seed": base.seed, "rows": rows, "summary": summary,
              "plot_rows": summary}
    return _write_ablation(out, "ablation_refs", rows, report, {"x": "size", "y": "srcc", "err": "srcc_std"})


CATEGORY_GROUPS = {"noise": ("noise",), "blur": ("blur",), "noise&blur": ("noise", "blur"), "all": None}


def run_ablation_categories(
    base: TrainConfig,
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    out_dir: str | Path,
    weights: Optional[BackboneWeights] = None,
    groups: Sequence[str] = ("noise", "blur", "noise&blur", "all"),
    test_columns: Sequence[str] = ("noise", "blur", "all"),
) -> dict:
    """Table of SRCC per training category group (rows) and test subset (columns).

    The first row is the untrained base metric.
    """
    from .evaluation import resolve_metric

    out = Path(out_dir)
    columns = {c: (test_split if c == "all" else filter_ablation(test_split, types=[c])) for c in test_columns}
    rows = []
    spec = resolve_metric(base.metric, weights, allow_equal_weights=base.allow_equal_weights)
    row = {"model": base.metric.upper()}
    for c, split in columns.items():
        s = score_split([spec], split, base.short_side)[spec.name]
        row[c] = correlate(s, [r.mos for r in split.records], split.name, spec.name, spec.orientation).srcc
    rows.append(row)
    for g in groups:
        types = CATEGORY_GROUPS[g] if g in CATEGORY_GROUPS else tuple(g.split("&"))
        cfg = replace(base, types=types)
        ckpt = train(cfg, train_split, out / f"cat_{g.replace('&', '_')}", weights)
        row = {"model": f"E-{base.metric.upper()} ({g})"}
        for c, split in columns.items():
            row[c] = _evaluate_enhanced(ckpt, weights, [split], base.short_side,
                                        base.allow_equal_weights)[split.name].srcc
        rows.append(row)
    plot_rows = [{"variant": r["model"], "dataset": c, "srcc": r[c]} for c in columns for r in rows]
    report = {"ablation": "categories", "metric": base.metric, "seed": base.seed, "rows": rows,
              "columns": list(columns), "plot_rows": plot_rows}
    return _write_ablation(out, "ablation_categories", rows, report, {"x": "variant", "y": "srcc"})
