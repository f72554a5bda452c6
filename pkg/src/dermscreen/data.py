"""Dataset schema, lesion taxonomy, annotation ingestion and ROI crops.

The on-disk annotation format is a JSON manifest:

    {"images": [{"image_id", "patient_id", "path", "capture",
                 "skin_tone", "width", "height",
                 "rois": [{"x_center", "y_center", "width", "height", "label"}]}]}

``width``/``height`` are optional when the image file is readable (the
loader then takes the size from the file header).  Split assignments live
in a separate JSON map of image_id to split name.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import CropError, ManifestError, RecordRejectedError, SplitError

log = logging.getLogger(__name__)


class LesionLabel(enum.Enum):
    """The eight lesion codes, in canonical order."""

    MEL = "MEL"
    NV = "NV"
    BCC = "BCC"
    AKIEC = "AKIEC"
    BKL = "BKL"
    DF = "DF"
    VASC = "VASC"
    OB = "OB"


MALIGNANT_LABELS = frozenset({LesionLabel.MEL, LesionLabel.BCC, LesionLabel.AKIEC})

CAPTURES = ("dermoscopy", "wide_field")
SKIN_TONES = ("light", "medium", "dark", "unknown")
SPLITS = ("train", "val", "test")


def is_malignant(label: LesionLabel) -> bool:
    return label in MALIGNANT_LABELS


@dataclass(frozen=True)
class Roi:
    """Bounding box in center format; label is optional for predictions."""

    x_center: float
    y_center: float
    width: float
    height: float
    label: LesionLabel | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"ROI needs positive size, got {self.width}x{self.height}")
        for v in (self.x_center, self.y_center, self.width, self.height):
            if not math.isfinite(v):
                raise ValueError("ROI coordinates must be finite")

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corner form."""
        hw, hh = self.width / 2.0, self.height / 2.0
        return (self.x_center - hw, self.y_center - hh, self.x_center + hw, self.y_center + hh)

    def to_json(self) -> dict:
        out = {
            "x_center": self.x_center,
            "y_center": self.y_center,
            "width": self.width,
            "height": self.height,
        }
        if self.label is not None:
            out["label"] = self.label.value
        return out

    @classmethod
    def from_json(cls, obj: dict, where: str = "roi") -> "Roi":
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: expected an object, got {type(obj).__name__}")
        label = None
        if obj.get("label") is not None:
            label = parse_label(obj["label"], where=f"{where}.label")
        try:
            return cls(
                x_center=float(obj["x_center"]),
                y_center=float(obj["y_center"]),
                width=float(obj["width"]),
                height=float(obj["height"]),
                label=label,
            )
        except KeyError as e:
            raise ManifestError(f"{where}: missing field {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            raise ManifestError(f"{where}: {e}") from None


def parse_label(value, where: str = "label") -> LesionLabel:
    try:
        return LesionLabel(str(value))
    except ValueError:
        known = ", ".join(l.value for l in LesionLabel)
        raise ManifestError(f"{where}: unknown lesion class {value!r} (known: {known})") from None


@dataclass(frozen=True)
class ImageRecord:
    """One image with its ROI annotations and capture metadata."""

    image_id: str
    patient_id: str
    path: str
    capture: str
    skin_tone: str
    width: int
    height: int
    rois: tuple[Roi, ...]

    def __post_init__(self):
        if self.capture not in CAPTURES:
            raise ValueError(f"capture must be one of {CAPTURES}, got {self.capture!r}")
        if self.skin_tone not in SKIN_TONES:
            raise ValueError(f"skin_tone must be one of {SKIN_TONES}, got {self.skin_tone!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def image_label(self) -> int:
        """1 when any labeled ROI belongs to the malignant set, else 0."""
        return int(any(r.label is not None and is_malignant(r.label) for r in self.rois))

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "patient_id": self.patient_id,
            "path": self.path,
            "capture": self.capture,
            "skin_tone": self.skin_tone,
            "width": self.width,
            "height": self.height,
            "rois": [r.to_json() for r in self.rois],
        }


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable collection of image records plus optional split assignments."""

    records: tuple[ImageRecord, ...]
    splits: dict[str, str] = field(default_factory=dict)
    root: str = "."

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise ManifestError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)
        for image_id, split in self.splits.items():
            if split not in SPLITS:
                raise ManifestError(f"split for {image_id!r} must be one of {SPLITS}, got {split!r}")

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, image_id: str) -> ImageRecord:
        for r in self.records:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)

    def subset(self, split: str) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if self.splits.get(r.image_id) == split)

    def split_records(self, split: str) -> tuple[ImageRecord, ...]:
        """Records for a split; without any split table the whole manifest
        counts as train and the other splits are empty."""
        if self.splits:
            return self.subset(split)
        return self.records if split == "train" else ()

    def patients(self) -> tuple[str, ...]:
        return tuple(sorted({r.patient_id for r in self.records}))

    def resolve_path(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else Path(self.root) / p

    def with_splits(self, splits: dict[str, str]) -> "DatasetManifest":
        unknown = set(splits) - {r.image_id for r in self.records}
        if unknown:
            raise ManifestError(f"split references unknown image ids: {sorted(unknown)[:5]}")
        return replace(self, splits=dict(splits))


def _clamp_roi(roi: Roi, width: int, height: int, where: str) -> Roi:
    x0, y0, x1, y1 = roi.corners()
    cx0, cy0 = max(x0, 0.0), max(y0, 0.0)
    cx1, cy1 = min(x1, float(width)), min(y1, float(height))
    if cx1 - cx0 <= 0 or cy1 - cy0 <= 0:
        raise RecordRejectedError(f"{where}: ROI lies fully outside the {width}x{height} image")
    if (cx0, cy0, cx1, cy1) == (x0, y0, x1, y1):
        return roi
    return Roi(
        x_center=(cx0 + cx1) / 2.0,
        y_center=(cy0 + cy1) / 2.0,
        width=cx1 - cx0,
        height=cy1 - cy0,
        label=roi.label,
    )


def _image_size(obj: dict, path: Path, where: str) -> tuple[int, int]:
    if "width" in obj and "height" in obj:
        try:
            w, h = int(obj["width"]), int(obj["height"])
        except (TypeError, ValueError):
            raise ManifestError(f"{where}: width/height must be integers") from None
        if w <= 0 or h <= 0:
            raise ManifestError(f"{where}: width/height must be positive")
        return w, h
    if path.is_file():
        with Image.open(path) as im:
            return im.size
    raise ManifestError(
        f"{where}: cannot determine image size (no width/height fields and {path} is unreadable)"
    )


def load_manifest(path: str | Path, split_path: str | Path | None = None) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    ROIs extending past the image edge are clamped; ROIs fully outside the
    image reject the record.  Duplicate image ids are fatal.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None

    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise ManifestError(f"{path}: top level must be an object with an 'images' array")

    root = str(path.parent)
    records = []
    for i, obj in enumerate(doc["images"]):
        where = f"images[{i}]"
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: expected an object")
        for key in ("image_id", "patient_id", "path", "capture", "skin_tone", "rois"):
            if key not in obj:
                raise ManifestError(f"{where}: missing field {key!r}")
        if not isinstance(obj["rois"], list):
            raise ManifestError(f"{where}.rois: expected an array")
        width, height = _image_size(obj, Path(root) / str(obj["path"]), where)
        rois = tuple(
            _clamp_roi(Roi.from_json(r, where=f"{where}.rois[{j}]"), width, height, f"{where}.rois[{j}]")
            for j, r in enumerate(obj["rois"])
        )
        try:
            records.append(
                ImageRecord(
                    image_id=str(obj["image_id"]),
                    patient_id=str(obj["patient_id"]),
                    path=str(obj["path"]),
                    capture=str(obj["capture"]),
                    skin_tone=str(obj["skin_tone"]),
                    width=width,
                    height=height,
                    rois=rois,
                )
            )
        except ValueError as e:
            raise ManifestError(f"{where}: {e}") from None

    manifest = DatasetManifest(records=tuple(records), root=root)
    if split_path is not None:
        manifest = manifest.with_splits(load_split(split_path))
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {"images": [r.to_json() for r in manifest.records]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> dict[str, str]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: split file must be a JSON object")
    return {str(k): str(v) for k, v in doc.items()}


def save_split(splits: dict[str, str], path: str | Path) -> None:
    Path(path).write_text(json.dumps(splits, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def ingest_isic(images_dir: str | Path, labels_file: str | Path, margin_factor: float = 1.0) -> DatasetManifest:
    """Build a manifest from a directory of single-lesion dermoscopy images.

    The labels CSV has columns ``image,label``.  Each image gets one
    synthetic full-frame ROI (image dimensions scaled by
    ``margin_factor``, then clamped).  Without patient metadata every
    image is treated as its own patient.
    """
    images_dir = Path(images_dir)
    if margin_factor <= 0:
        raise ValueError("margin_factor must be positive")
    records = []
    with open(labels_file, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"image", "label"} <= set(reader.fieldnames):
            raise ManifestError(f"{labels_file}: expected CSV header with 'image' and 'label' columns")
        for i, row in enumerate(reader):
            image_id = row["image"].strip()
            label = parse_label(row["label"].strip(), where=f"{labels_file} row {i + 2}")
            image_path = _find_image(images_dir, image_id)
            with Image.open(image_path) as im:
                width, height = im.size
            roi = _clamp_roi(
                Roi(
                    x_center=width / 2.0,
                    y_center=height / 2.0,
                    width=width * margin_factor,
                    height=height * margin_factor,
                    label=label,
                ),
                width,
                height,
                where=image_id,
            )
            records.append(
                ImageRecord(
                    image_id=image_id,
                    patient_id=image_id,
                    path=str(image_path.relative_to(images_dir)),
                    capture="dermoscopy",
                    skin_tone="unknown",
                    width=width,
                    height=height,
                    rois=(roi,),
                )
            )
    return DatasetManifest(records=tuple(records), root=str(images_dir))


def _find_image(images_dir: Path, image_id: str) -> Path:
    for ext in ("", ".png", ".jpg", ".jpeg"):
        candidate = images_dir / f"{image_id}{ext}"
        if candidate.is_file():
            return candidate
    raise ManifestError(f"no image file for {image_id!r} under {images_dir}")


def patient_split(
    manifest: DatasetManifest,
    fractions: dict[str, float],
    seed: int,
) -> DatasetManifest:
    """Assign train/val/test splits with no patient in two splits.

    ``fractions`` gives the target train and val image shares; the
    remainder goes to test.  Deterministic for a fixed seed.
    """
    train_frac = float(fractions.get("train", 0.0))
    val_frac = float(fractions.get("val", 0.0))
    if train_frac <= 0 or val_frac <= 0:
        raise SplitError("train and val fractions must both be positive")
    if train_frac + val_frac > 1.0 + 1e-9:
        raise SplitError(f"fractions sum to {train_frac + val_frac:.3f} > 1")

    patients = manifest.patients()
    if len(patients) < 2:
        raise SplitError(f"patient-level split needs at least 2 patients, got {len(patients)}")

    counts = {p: 0 for p in patients}
    for r in manifest.records:
        counts[r.patient_id] += 1
    total = len(manifest.records)

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]

    train_target = train_frac * total
    val_target = (train_frac + val_frac) * total
    assignment: dict[str, str] = {}
    cum = 0
    for p in order:
        if cum < train_target:
            assignment[p] = "train"
        elif cum < val_target:
            assignment[p] = "val"
        else:
            assignment[p] = "test"
        cum += counts[p]

    splits = {r.image_id: assignment[r.patient_id] for r in manifest.records}
    return manifest.with_splits(splits)


def extract_crop(image: np.ndarray, roi: Roi, side: int) -> np.ndarray:
    """Square crop around an ROI, resized to ``side`` x ``side`` x 3.

    The tight box is expanded to a square of edge max(width, height),
    clamped to the image, edge-replicated where clamping truncated it,
    then resized.  Deterministic for identical inputs.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise CropError(f"expected HxWx3 image, got shape {image.shape}")
    if side <= 0:
        raise CropError("crop side must be positive")
    h, w = image.shape[:2]
    x0, y0, x1, y1 = roi.corners()
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise CropError(f"ROI {roi.corners()} does not intersect the {w}x{h} image")

    edge = max(roi.width, roi.height)
    square_px = max(1, int(round(edge)))
    ix0 = int(round(roi.x_center - edge / 2.0))
    iy0 = int(round(roi.y_center - edge / 2.0))
    ix1, iy1 = ix0 + square_px, iy0 + square_px

    cx0, cy0 = max(ix0, 0), max(iy0, 0)
    cx1, cy1 = min(ix1, w), min(iy1, h)
    if cx1 <= cx0 or cy1 <= cy0:
        raise CropError(f"ROI {roi.corners()} does not intersect the {w}x{h} image")

    region = image[cy0:cy1, cx0:cx1]
    pad = ((cy0 - iy0, iy1 - cy1), (cx0 - ix0, ix1 - cx1), (0, 0))
    if any(p > 0 for pair in pad[:2] for p in pair):
        region = np.pad(region, pad, mode="edge")

    interp = cv2.INTER_AREA if region.shape[0] > side else cv2.INTER_LINEAR
    return cv2.resize(region, (side, side), interpolation=interp)


def lesion_counts(manifest: DatasetManifest) -> dict[LesionLabel, int]:
    """ROI count per lesion code (unlabeled ROIs are skipped)."""
    counts = {label: 0 for label in LesionLabel}
    for r in manifest.records:
        for roi in r.rois:
            if roi.label is not None:
                counts[roi.label] += 1
    return counts


def format_lesion_counts(manifest: DatasetManifest, title: str = "Lesion counts") -> str:
    """Render per-code ROI counts and percentages as an aligned text table."""
    counts = lesion_counts(manifest)
    total = sum(counts.values())
    lines = [title, "-" * len(title)]
    for label in LesionLabel:
        pct = 100.0 * counts[label] / total if total else 0.0
        lines.append(f"{label.value:<6} {counts[label]:>7,} ({pct:.0f}%)")
    lines.append(f"{'total':<6} {total:>7,}")
    return "\n".join(lines)
