"""Lesion detector: label granularities, detection records, post-processing.

Only one detector head granularity exists at a time: class-agnostic
(one class), benign/malignant (two), or the full eight lesion codes.
Training and inference live further down; the types and NMS here are
pure and have no torch dependency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .data import LesionLabel, Roi, is_malignant
from .errors import ConfigError, GranularityError
from .metrics import iou

GRANULARITY_KINDS = ("one_class", "malignancy", "sub_type")

_CLASS_NAMES = {
    "one_class": ("lesion",),
    "malignancy": ("benign", "malignant"),
    "sub_type": tuple(label.value for label in LesionLabel),
}


@dataclass(frozen=True)
class GranularityConfig:
    kind: str
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in GRANULARITY_KINDS:
            raise GranularityError(f"unknown granularity {self.kind!r}")
        expected = _CLASS_NAMES[self.kind]
        if tuple(self.class_names) != expected:
            raise GranularityError(
                f"granularity {self.kind} requires class names {expected}, got {self.class_names}"
            )

    @classmethod
    def for_kind(cls, kind: str) -> "GranularityConfig":
        if kind not in _CLASS_NAMES:
            raise GranularityError(f"unknown granularity {kind!r}")
        return cls(kind=kind, class_names=_CLASS_NAMES[kind])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_index(self, label: LesionLabel | None) -> int:
        """Map a ground-truth lesion label onto this head's class index."""
        if self.kind == "one_class":
            return 0
        if label is None:
            raise GranularityError(f"granularity {self.kind} needs labelled rois")
        if self.kind == "malignancy":
            return 1 if is_malignant(label) else 0
        return list(LesionLabel).index(label)


@dataclass(frozen=True)
class Detection:
    box: Roi
    class_probs: tuple[float, ...]
    score: float
    source_image_id: str | None = None

    def __post_init__(self):
        probs = tuple(float(p) for p in self.class_probs)
        object.__setattr__(self, "class_probs", probs)
        if not probs:
            raise ConfigError("detection needs at least one class probability")
        for p in probs:
            if not (math.isfinite(p) and 0.0 < p < 1.0):
                raise ConfigError(f"class probability out of (0,1): {p}")
        if abs(self.score - max(probs)) > 1e-9:
            raise ConfigError(f"score {self.score} != max(class_probs) {max(probs)}")

    @classmethod
    def make(cls, box: Roi, class_probs, source_image_id: str | None = None) -> "Detection":
        probs = tuple(float(p) for p in class_probs)
        if not probs:
            raise ConfigError("detection needs at least one class probability")
        return cls(box=box, class_probs=probs, score=max(probs), source_image_id=source_image_id)

    def to_json(self) -> dict:
        out = {
            "box": self.box.to_json(),
            "class_probs": list(self.class_probs),
            "score": self.score,
        }
        if self.source_image_id is not None:
            out["image_id"] = self.source_image_id
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(
            box=Roi.from_json(obj["box"], "detection.box"),
            class_probs=tuple(obj["class_probs"]),
            score=float(obj["score"]),
            source_image_id=obj.get("image_id"),
        )


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression, class-agnostic.

    Keeps the highest-scoring box, drops everything overlapping it at
    IoU >= threshold, repeats.  Score ties resolve by input order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConfigError(f"iou_threshold out of [0,1]: {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou(detections[i].box, detections[j].box) < iou_threshold for j in kept):
            kept.append(i)
    return [detections[i] for i in kept]


@dataclass(frozen=True)
class DetectorTrainConfig:
    total_steps: int = 80_000
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_steps: tuple[int, ...] = (60_000, 80_000)
    lr_decay_factor: float = 0.1
    rpn_batch: int = 512  # sampled proposals per image per step, not an image batch
    nms_iou: float = 0.5
    score_threshold: float = 0.5
    max_detections: int = 100
    image_size: int = 160
    batch_images: int = 4
    augment: bool = True
    seed: int = 0
    backend: str = "compact"

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        steps = tuple(self.decay_steps)
        object.__setattr__(self, "decay_steps", steps)
        if any(b <= 0 for b in steps) or list(steps) != sorted(set(steps)):
            raise ConfigError(f"decay_steps must be strictly increasing: {steps}")
        if steps and steps[-1] > self.total_steps:
            raise ConfigError("decay_steps must not exceed total_steps")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou out of [0,1]: {self.nms_iou}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError(f"score_threshold out of [0,1]: {self.score_threshold}")

    def scaled(self, factor: float) -> "DetectorTrainConfig":
        """Shrink (or stretch) the schedule: steps and decay breakpoints
        scale together, every other hyperparameter stays put."""
        if factor <= 0:
            raise ConfigError("scale factor must be positive")
        return DetectorTrainConfig(
            total_steps=max(1, round(self.total_steps * factor)),
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            decay_steps=tuple(max(1, round(b * factor)) for b in self.decay_steps),
            lr_decay_factor=self.lr_decay_factor,
            rpn_batch=self.rpn_batch,
            nms_iou=self.nms_iou,
            score_threshold=self.score_threshold,
            max_detections=self.max_detections,
            image_size=self.image_size,
            batch_images=self.batch_images,
            augment=self.augment,
            seed=self.seed,
            backend=self.backend,
        )

    def lr_at(self, step: int) -> float:
        from .schedules import step_lr

        return step_lr(step, self.base_lr, self.decay_steps, self.lr_decay_factor)

    def to_json(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "decay_steps": list(self.decay_steps),
            "lr_decay_factor": self.lr_decay_factor,
            "rpn_batch": self.rpn_batch,
            "nms_iou": self.nms_iou,
            "score_threshold": self.score_threshold,
            "max_detections": self.max_detections,
            "image_size": self.image_size,
            "batch_images": self.batch_images,
            "augment": self.augment,
            "seed": self.seed,
            "backend": self.backend,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorTrainConfig":
        kwargs = dict(obj)
        kwargs["decay_steps"] = tuple(kwargs.get("decay_steps", (60_000, 80_000)))
        return cls(**kwargs)


BACKENDS = ("compact", "frcnn")


class DetectorModel:
    """A frozen trained detector: network + granularity + inference config."""

    def __init__(self, net, granularity: GranularityConfig, config: DetectorTrainConfig):
        if config.backend not in BACKENDS:
            raise ConfigError(f"unknown detector backend {config.backend!r}")
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.granularity = granularity
        self.config = config

    def detect(self, image) -> list[Detection]:
        if self.config.backend == "compact":
            from .detector_compact import detect_compact

            return detect_compact(self.net, self.granularity, self.config, image)
        from .detector_frcnn import detect_frcnn

        return detect_frcnn(self.net, self.granularity, self.config, image)

    def export_features(self, image, detections: list[Detection]):
        import numpy as np

        for d in detections:
            if len(d.class_probs) != self.granularity.num_classes:
                raise ConfigError(
                    f"detection with {len(d.class_probs)} class probs does not match "
                    f"a {self.granularity.num_classes}-class model"
                )
        boxes = [d.box for d in detections]
        if self.config.backend == "compact":
            from .detector_compact import features_compact

            return features_compact(self.net, self.config, image, boxes)
        from .detector_frcnn import features_frcnn

        return features_frcnn(self.net, self.config, image, boxes)

    def save(self, directory) -> None:
        import json
        from pathlib import Path

        import torch

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), directory / "weights.pt")
        meta = {
            "kind": "detector",
            "backend": self.config.backend,
            "granularity": self.granularity.kind,
            "class_names": list(self.granularity.class_names),
            "config": self.config.to_json(),
        }
        (directory / "model.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "DetectorModel":
        import json
        from pathlib import Path

        import torch

        from .errors import ModelIOError

        directory = Path(directory)
        meta_path = directory / "model.json"
        if not meta_path.exists():
            raise ModelIOError(f"no model.json under {directory}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("kind") != "detector":
            raise ModelIOError(f"{directory} holds {meta.get('kind')!r}, not a detector")
        granularity = GranularityConfig.for_kind(meta["granularity"])
        config = DetectorTrainConfig.from_json(meta["config"])
        if config.backend == "compact":
            from .detector_compact import CompactDetectorNet

            net = CompactDetectorNet(granularity.num_classes)
        else:
            from .detector_frcnn import build_frcnn

            net = build_frcnn(granularity.num_classes, config)
        net.load_state_dict(torch.load(directory / "weights.pt", weights_only=True))
        return cls(net, granularity, config)


def train_detector(
    manifest, granularity: GranularityConfig | str, config: DetectorTrainConfig
) -> tuple[DetectorModel, list[dict]]:
    """Train the configured backend; returns the frozen model and its loss log."""
    if isinstance(granularity, str):
        granularity = GranularityConfig.for_kind(granularity)
    if config.backend == "compact":
        from .detector_compact import train_compact

        net, curves = train_compact(manifest, granularity, config)
    elif config.backend == "frcnn":
        from .detector_frcnn import train_frcnn

        net, curves = train_frcnn(manifest, granularity, config)
    else:
        raise ConfigError(f"unknown detector backend {config.backend!r}")
    return DetectorModel(net, granularity, config), curves


def write_detections(path, detections_by_image: dict[str, list[Detection]]) -> None:
    """One JSON line per image: {"image_id", "detections": [...]}. """
    with open(path, "w", encoding="utf-8") as f:
        for image_id, dets in detections_by_image.items():
            line = {"image_id": image_id, "detections": [d.to_json() for d in dets]}
            f.write(json.dumps(line) + "\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out[obj["image_id"]] = [Detection.from_json(d) for d in obj["detections"]]
    return out
