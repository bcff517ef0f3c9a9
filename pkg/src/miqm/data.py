"""MOS-labelled FR-IQA datasets: manifest parsing, score normalisation, preprocessing."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage, UnidentifiedImageError

__all__ = [
    "QualityRecord",
    "DatasetSplit",
    "DatasetError",
    "RecordError",
    "EmptySplitError",
    "DATASET_SCALES",
    "load_dataset",
    "load_image",
    "save_image",
    "preprocess",
    "filter_ablation",
    "sample_refs",
    "distortion_groups",
]


class DatasetError(Exception):
    """Dataset root is missing its score file or is otherwise unusable."""


class RecordError(DatasetError):
    """One or more records point at images that cannot be read."""

    def __init__(self, message: str, paths: Sequence[Path] = ()):
        super().__init__(message)
        self.paths = list(paths)


class EmptySplitError(DatasetError):
    """A filter left no records."""


@dataclass(frozen=True)
class QualityRecord:
    ref_path: Path
    dist_path: Path
    mos_raw: float
    mos: float
    ref_id: str
    distortion_type: int | None = None
    distortion_level: int | None = None


@dataclass(frozen=True)
class DatasetSplit:
    records: tuple[QualityRecord, ...]
    name: str
    role: str = "test"

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"role must be 'train' or 'test', got {self.role!r}")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ref_ids(self) -> list[str]:
        return sorted({r.ref_id for r in self.records})

    @property
    def levels(self) -> list[int]:
        return sorted({r.distortion_level for r in self.records if r.distortion_level is not None})

    @property
    def types(self) -> list[int]:
        return sorted({r.distortion_type for r in self.records if r.distortion_type is not None})

    def with_role(self, role: str) -> "DatasetSplit":
        return replace(self, role=role)


@dataclass(frozen=True)
class _Scale:
    low: float | None
    high: float | None
    higher_better: bool
    score_file: str


# Published score bounds. PIPAL's Elo ratings have none, so empirical bounds are used there.
DATASET_SCALES: dict[str, _Scale] = {
    "kadid": _Scale(1.0, 5.0, True, "dmos.csv"),
    "tid2013": _Scale(0.0, 9.0, True, "mos_with_names.txt"),
    "csiq": _Scale(0.0, 1.0, False, "csiq_label.txt"),
    "pipal": _Scale(None, None, True, "Train_Label"),
    "csv": _Scale(None, None, True, "manifest.csv"),
}

_ALIASES = {"kadid10k": "kadid", "kadid-10k": "kadid", "tid": "tid2013", "tid2008": "tid2013"}

_IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


def canonical_name(name: str) -> str:
    key = name.lower()
    key = _ALIASES.get(key, key)
    if key not in DATASET_SCALES:
        raise DatasetError(f"unknown dataset {name!r}; expected one of {sorted(DATASET_SCALES)}")
    return key


def _normalise(raw: np.ndarray, scale: _Scale, bounds: tuple[float, float] | None = None) -> np.ndarray:
    low, high = bounds if bounds is not None else (scale.low, scale.high)
    if low is None or high is None:
        low, high = float(raw.min()), float(raw.max())
    if not high > low:
        raise DatasetError(f"degenerate score range [{low}, {high}]")
    mos = (raw - low) / (high - low)
    if not scale.higher_better:
        mos = 1.0 - mos
    return np.clip(mos, 0.0, 1.0)


def _find_case_insensitive(directory: Path, stem: str) -> Path | None:
    for suffix in _IMAGE_SUFFIXES:
        for candidate in (directory / f"{stem}{suffix}", directory / f"{stem}{suffix.upper()}"):
            if candidate.exists():
                return candidate
    lowered = stem.lower()
    if directory.is_dir():
        for p in directory.iterdir():
            if p.stem.lower() == lowered and p.suffix.lower() in _IMAGE_SUFFIXES:
                return p
    return None


def _rows_kadid(root: Path):
    score_file = root / "dmos.csv"
    if not score_file.exists() and (root / "kadid10k.csv").exists():
        score_file = root / "kadid10k.csv"
    if not score_file.exists():
        raise DatasetError(f"KADID score file not found: expected {root / 'dmos.csv'}")
    image_dir = root / "images" if (root / "images").is_dir() else root
    pattern = re.compile(r"I(\d+)_(\d+)_(\d+)", re.IGNORECASE)
    with open(score_file, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            m = pattern.match(row["dist_img"])
            dtype, level = (int(m.group(2)), int(m.group(3))) if m else (None, None)
            yield (
                image_dir / row["ref_img"],
                image_dir / row["dist_img"],
                float(row["dmos"]),
                Path(row["ref_img"]).stem,
                dtype,
                level,
            )


def _rows_tid(root: Path):
    score_file = root / "mos_with_names.txt"
    if not score_file.exists():
        raise DatasetError(f"TID2013 score file not found: expected {score_file}")
    dist_dir = root / "distorted_images"
    ref_dir = root / "reference_images"
    pattern = re.compile(r"i(\d+)_(\d+)_(\d+)", re.IGNORECASE)
    for line in score_file.read_text(encoding="utf-8", errors="replace").splitlines():
        parts = line.split()
        if len(parts) < 2:
            continue
        score, name = float(parts[0]), parts[1]
        m = pattern.match(name)
        if m is None:
            raise DatasetError(f"unrecognised TID2013 file name {name!r} in {score_file}")
        ref_stem = f"I{m.group(1)}"
        ref = _find_case_insensitive(ref_dir, ref_stem) or ref_dir / f"{ref_stem}.BMP"
        yield ref, dist_dir / name, score, ref_stem.upper(), int(m.group(2)), int(m.group(3))


def _rows_csiq(root: Path):
    score_file = root / "csiq_label.txt"
    if not score_file.exists():
        raise DatasetError(f"CSIQ score file not found: expected {score_file}")
    dist_dir = root / "dst_imgs_all" if (root / "dst_imgs_all").is_dir() else root / "dst_imgs"
    ref_dir = root / "src_imgs"
    types: dict[str, int] = {}
    for line in score_file.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) < 2:
            continue
        name, score = parts[0], float(parts[1])
        # e.g. "1600.AWGN.1.png" -> reference "1600.png"
        pieces = name.split(".")
        ref_stem, dtype = pieces[0], pieces[1] if len(pieces) > 3 else None
        level = int(pieces[2]) if len(pieces) > 3 and pieces[2].isdigit() else None
        type_id = types.setdefault(dtype.lower(), len(types) + 1) if dtype else None
        dist = dist_dir / name
        if not dist.exists() and dtype and (dist_dir / dtype / name).exists():
            dist = dist_dir / dtype / name
        ref = _find_case_insensitive(ref_dir, ref_stem) or ref_dir / f"{ref_stem}.png"
        yield ref, dist, score, ref_stem, type_id, level


def _rows_pipal(root: Path):
    label_dir = root / "Train_Label"
    if not label_dir.is_dir():
        raise DatasetError(f"PIPAL label directory not found: expected {label_dir}")
    ref_dir = root / "Train_Ref"
    dist_dirs = [root / "Train_Dist", *sorted(root.glob("Distortion_*"))]
    label_files = sorted(label_dir.glob("*.txt"))
    if not label_files:
        raise DatasetError(f"PIPAL label directory {label_dir} holds no *.txt score files")
    for label_file in label_files:
        ref_stem = label_file.stem
        ref = _find_case_insensitive(ref_dir, ref_stem) or ref_dir / f"{ref_stem}.bmp"
        for line in label_file.read_text(encoding="utf-8").splitlines():
            if "," not in line:
                continue
            name, score = line.split(",")[:2]
            dist = next((d / name for d in dist_dirs if (d / name).exists()), dist_dirs[0] / name)
            m = re.match(r".+?_(\d+)_(\d+)", Path(name).stem)
            dtype = int(m.group(1)) if m else None
            yield ref, dist, float(score), ref_stem, dtype, None


def _rows_csv(path: Path):
    manifest = path if path.is_file() else path / "manifest.csv"
    if not manifest.exists():
        raise DatasetError(f"manifest not found: expected {manifest}")
    base = manifest.parent
    with open(manifest, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"ref_path", "dist_path", "score"} - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{manifest}: header must contain ref_path,dist_path,score (missing {sorted(missing)})")
        for row in reader:
            ref = Path(row["ref_path"])
            dist = Path(row["dist_path"])
            ref = ref if ref.is_absolute() else base / ref
            dist = dist if dist.is_absolute() else base / dist
            dtype = row.get("distortion_type") or None
            level = row.get("distortion_level") or None
            yield (
                ref,
                dist,
                float(row["score"]),
                ref.stem,
                int(dtype) if dtype is not None else None,
                int(level) if level is not None else None,
            )


_PARSERS = {
    "kadid": _rows_kadid,
    "tid2013": _rows_tid,
    "csiq": _rows_csiq,
    "pipal": _rows_pipal,
    "csv": _rows_csv,
}


def load_dataset(
    root: str | Path,
    name: str,
    role: str = "test",
    *,
    check_files: bool = True,
    score_range: tuple[float, float] | None = None,
    higher_better: bool | None = None,
) -> DatasetSplit:
    """Parse a dataset root into a :class:`DatasetSplit`.

    ``name`` is one of ``kadid``, ``tid2013``, ``csiq``, ``pipal`` or ``csv``
    (generic ``ref_path,dist_path,score`` manifest). Scores are rescaled to
    ``[0, 1]`` with 1 the best quality, using the dataset's published scale
    bounds where they exist. ``score_range`` and ``higher_better`` override the
    bounds and orientation (mainly for user manifests).
    """
    root = Path(root)
    key = canonical_name(name)
    if not root.exists():
        raise DatasetError(f"dataset root does not exist: {root}")
    rows = list(_PARSERS[key](root))
    if not rows:
        raise DatasetError(f"no records found under {root} for dataset {key!r}")

    scale = DATASET_SCALES[key]
    if higher_better is not None:
        scale = replace(scale, higher_better=higher_better)
    raw = np.array([r[2] for r in rows], dtype=np.float64)
    mos = _normalise(raw, scale, score_range)

    if check_files:
        missing = sorted({p for r in rows for p in (r[0], r[1]) if not p.exists()})
        if missing:
            preview = ", ".join(str(p) for p in missing[:5])
            raise RecordError(f"{len(missing)} image file(s) missing, e.g. {preview}", missing)

    records = tuple(
        QualityRecord(
            ref_path=ref,
            dist_path=dist,
            mos_raw=float(score),
            mos=float(m),
            ref_id=str(ref_id),
            distortion_type=dtype,
            distortion_level=level,
        )
        for (ref, dist, score, ref_id, dtype, level), m in zip(rows, mos)
    )
    return DatasetSplit(records=records, name=key, role=role)


def load_image(path: str | Path) -> torch.Tensor:
    """Decode an image file to a float32 ``(3, H, W)`` tensor in ``[0, 1]``."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise RecordError(f"cannot decode image {path}: {exc}", [Path(path)]) from exc
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


def save_image(path: str | Path, img: torch.Tensor | np.ndarray) -> Path:
    """Write a ``(3, H, W)``/``(1, H, W)`` tensor or ``(H, W[, C])`` array in ``[0, 1]`` as 8-bit."""
    if isinstance(img, torch.Tensor):
        arr = img.detach().cpu().numpy()
        if arr.ndim == 3:
            arr = arr.transpose(1, 2, 0)
    else:
        arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)
    return path


def preprocess(img: torch.Tensor, short_side: int = 224) -> torch.Tensor:
    """Resize so that ``min(H, W) == short_side``, keeping the aspect ratio.

    Bilinear with antialiasing; accepts ``(C, H, W)`` or ``(N, C, H, W)``.
    Images whose short side already matches are returned unchanged.
    """
    if short_side < 32:
        raise ValueError(f"short_side must be >= 32, got {short_side}")
    h, w = img.shape[-2:]
    if min(h, w) == short_side:
        return img
    scale = short_side / min(h, w)
    if h <= w:
        size = (short_side, max(1, int(round(w * scale))))
    else:
        size = (max(1, int(round(h * scale))), short_side)
    batched = img if img.dim() == 4 else img.unsqueeze(0)
    out = F.interpolate(batched, size=size, mode="bilinear", align_corners=False, antialias=True)
    out = out.clamp(0.0, 1.0)
    return out if img.dim() == 4 else out.squeeze(0)


def distortion_groups(dataset: str) -> dict[str, list[int]]:
    """Distortion-category groups (``noise``, ``blur``, ...) for a dataset."""
    key = canonical_name(dataset)
    text = resources.files("miqm.resources").joinpath("distortion_groups.json").read_text(encoding="utf-8")
    table = json.loads(text)
    if key not in table:
        raise DatasetError(f"no distortion taxonomy shipped for {key!r}")
    return {k: list(v) for k, v in table[key].items() if not k.startswith("_")}


def sample_refs(split: DatasetSplit, n: int, seed: int) -> list[str]:
    """Seeded random subset of ``n`` reference ids."""
    ids = split.ref_ids
    if not 0 < n <= len(ids):
        raise ValueError(f"cannot sample {n} references from {len(ids)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=n, replace=False)
    return sorted(ids[i] for i in chosen)


def _resolve_types(split: DatasetSplit, types: Iterable[int | str]) -> set[int]:
    resolved: set[int] = set()
    groups = None
    for t in types:
        if isinstance(t, str) and not t.isdigit():
            if groups is None:
                groups = distortion_groups(split.name)
            if t not in groups:
                raise ValueError(f"unknown distortion group {t!r} for {split.name}; known: {sorted(groups)}")
            resolved.update(groups[t])
        else:
            resolved.add(int(t))
    return resolved


def filter_ablation(
    split: DatasetSplit,
    levels: Iterable[int] | None = None,
    refs: Iterable[str] | None = None,
    types: Iterable[int | str] | None = None,
) -> DatasetSplit:
    """Keep the records matching every given filter.

    ``types`` accepts integer category ids or group names from
    :func:`distortion_groups` (``"noise"``, ``"blur"``).
    """
    keep = list(split.records)
    if levels is not None:
        levels = {int(v) for v in levels}
        unknown = levels - set(split.levels)
        if unknown:
            raise ValueError(f"levels {sorted(unknown)} do not occur in {split.name}")
        keep = [r for r in keep if r.distortion_level in levels]
    if refs is not None:
        refs = {str(v) for v in refs}
        unknown = refs - set(split.ref_ids)
        if unknown:
            raise ValueError(f"references {sorted(unknown)[:5]} do not occur in {split.name}")
        keep = [r for r in keep if r.ref_id in refs]
    if types is not None:
        wanted = _resolve_types(split, types)
        unknown = wanted - set(split.types)
        if not wanted & set(split.types):
            raise ValueError(f"distortion types {sorted(unknown)} do not occur in {split.name}")
        keep = [r for r in keep if r.distortion_type in wanted]
    if not keep:
        raise EmptySplitError(f"filter left no records in {split.name}")
    return replace(split, records=tuple(keep))


@dataclass
class PairCache:
    """Decodes and preprocesses record images, memoising references."""

    short_side: int | None = 224
    _refs: dict[Path, torch.Tensor] = field(default_factory=dict, repr=False)
    max_refs: int = 128

    def _prep(self, img: torch.Tensor) -> torch.Tensor:
        return preprocess(img, self.short_side) if self.short_side else img

    def pair(self, record: QualityRecord) -> tuple[torch.Tensor, torch.Tensor]:
        ref = self._refs.get(record.ref_path)
        if ref is None:
            ref = self._prep(load_image(record.ref_path))
            if len(self._refs) >= self.max_refs:
                self._refs.pop(next(iter(self._refs)))
            self._refs[record.ref_path] = ref
        dist = self._prep(load_image(record.dist_path))
        if dist.shape != ref.shape:
            raise RecordError(
                f"reference and distorted sizes differ: {record.ref_path} {tuple(ref.shape)} "
                f"vs {record.dist_path} {tuple(dist.shape)}",
                [record.ref_path, record.dist_path],
            )
        return ref, dist
