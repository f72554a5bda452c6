"""Per-lesion malignancy classifier and the whole-image direct variant.

Both share one recipe: SGD with momentum, weight decay, and a
half-period cosine learning rate over the epoch count.  The ROI model
trains on square crops around labelled lesions (binary target: label in
the malignant set); the direct model trains on whole resized images
against the image-level label.  Augmentation is horizontal/vertical
flips only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from torch import nn

from .data import DatasetManifest, Roi, extract_crop, is_malignant
from .errors import ConfigError, ModelIOError
from .metrics import auc
from .nets import RoiClassifierNet, seed_everything, to_tensor
from .schedules import cosine_lr


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    crop_side: int = 224
    channels: tuple[int, ...] = (16, 32, 64, 96)
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_side < 8:
            raise ConfigError("crop_side too small")
        object.__setattr__(self, "channels", tuple(self.channels))

    def scaled(self, factor: float) -> "ClassifierTrainConfig":
        """Scale the epoch count; everything else stays put."""
        if factor <= 0:
            raise ConfigError("scale factor must be positive")
        return ClassifierTrainConfig(
            epochs=max(1, round(self.epochs * factor)),
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            crop_side=self.crop_side,
            channels=self.channels,
            augment=self.augment,
            seed=self.seed,
        )

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(epoch, self.epochs, self.base_lr)

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "crop_side": self.crop_side,
            "channels": list(self.channels),
            "augment": self.augment,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClassifierTrainConfig":
        kwargs = dict(obj)
        kwargs["channels"] = tuple(kwargs.get("channels", (16, 32, 64, 96)))
        return cls(**kwargs)


@dataclass(frozen=True)
class MalignancyScore:
    probability: float
    roi: Roi
    image_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.probability) and 0.0 < self.probability < 1.0):
            raise ConfigError(f"probability must lie strictly in (0,1): {self.probability}")

    def to_json(self) -> dict:
        return {"probability": self.probability, "box": self.roi.to_json(), "image_id": self.image_id}


def _sigmoid_prob(logit: float) -> float:
    p = 1.0 / (1.0 + math.exp(-logit))
    return min(max(p, 1e-7), 1.0 - 1e-7)


class ClassifierModel:
    """Frozen trained network plus the preprocessing it expects.

    ``kind`` is "roi" (crop around a box) or "direct" (whole image).
    """

    def __init__(self, net: RoiClassifierNet, config: ClassifierTrainConfig, kind: str = "roi"):
        if kind not in ("roi", "direct"):
            raise ConfigError(f"unknown classifier kind {kind!r}")
        self.net = net.eval()
        self.config = config
        self.kind = kind
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _forward_prob(self, crop: np.ndarray) -> float:
        with torch.no_grad():
            logit = self.net(to_tensor(crop))[0].item()
        return _sigmoid_prob(logit)

    def predict_roi(self, image: np.ndarray, roi: Roi, image_id: str = "") -> MalignancyScore:
        crop = extract_crop(image, roi, self.config.crop_side)
        return MalignancyScore(probability=self._forward_prob(crop), roi=roi, image_id=image_id)

    def predict_image(self, image: np.ndarray) -> float:
        side = self.config.crop_side
        resized = cv2.resize(image, (side, side), interpolation=cv2.INTER_AREA)
        return self._forward_prob(resized)

    def features_for_crop(self, crop: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.net.features(to_tensor(crop))[0].numpy()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), directory / "weights.pt")
        meta = {
            "kind": f"{self.kind}_classifier",
            "config": self.config.to_json(),
        }
        (directory / "model.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "ClassifierModel":
        directory = Path(directory)
        meta_path = directory / "model.json"
        if not meta_path.exists():
            raise ModelIOError(f"no model.json under {directory}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        kind = meta.get("kind", "")
        if kind not in ("roi_classifier", "direct_classifier"):
            raise ModelIOError(f"{directory} holds {kind!r}, not a classifier")
        config = ClassifierTrainConfig.from_json(meta["config"])
        net = RoiClassifierNet(config.channels)
        net.load_state_dict(torch.load(directory / "weights.pt", weights_only=True))
        return cls(net, config, kind="roi" if kind == "roi_classifier" else "direct")


def _load_crop_dataset(manifest: DatasetManifest, records, side: int):
    crops, targets = [], []
    for rec in records:
        if not rec.rois:
            continue
        image = cv2.imread(str(manifest.resolve_path(rec)))
        if image is None:
            raise ModelIOError(f"cannot decode {manifest.resolve_path(rec)}")
        for roi in rec.rois:
            if roi.label is None:
                continue
            crops.append(extract_crop(image, roi, side))
            targets.append(1.0 if is_malignant(roi.label) else 0.0)
    return crops, targets


def _load_image_dataset(manifest: DatasetManifest, records, side: int):
    images, targets = [], []
    for rec in records:
        image = cv2.imread(str(manifest.resolve_path(rec)))
        if image is None:
            raise ModelIOError(f"cannot decode {manifest.resolve_path(rec)}")
        images.append(cv2.resize(image, (side, side), interpolation=cv2.INTER_AREA))
        targets.append(float(rec.image_label))
    return images, targets


def _flip(crop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.uniform() < 0.5:
        crop = crop[:, ::-1]
    if rng.uniform() < 0.5:
        crop = crop[::-1, :]
    return np.ascontiguousarray(crop)


def _split_records(manifest: DatasetManifest, split: str):
    return list(manifest.split_records(split))


def _train_loop(crops, targets, val_pairs_fn, config: ClassifierTrainConfig):
    """Shared optimization loop; returns (net, curves)."""
    if not crops:
        raise ConfigError("training set is empty")
    target_arr = np.asarray(targets, dtype=np.float32)
    if target_arr.min() == target_arr.max():
        raise ConfigError("training set holds a single class; need both")

    seed_everything(config.seed)
    net = RoiClassifierNet(config.channels)
    optimizer = torch.optim.SGD(
        net.parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    loss_fn = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(config.seed)
    n = len(crops)
    curves = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        net.train()
        total_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.stack(
                [_flip(crops[i], rng) if config.augment else crops[i] for i in idx]
            )
            x = to_tensor(batch)
            y = torch.from_numpy(target_arr[idx])
            optimizer.zero_grad()
            loss = loss_fn(net(x), y)
            loss.backward()
            optimizer.step()
            total_loss += loss.item()
            batches += 1
        net.eval()
        val_auc = val_pairs_fn(net) if val_pairs_fn else None
        curves.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": total_loss / max(batches, 1),
                "val_auc": "" if val_auc is None else val_auc,
            }
        )
    return net, curves


def _batched_probs(net, arrays, batch: int = 64) -> list[float]:
    probs: list[float] = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch):
            x = to_tensor(np.stack(arrays[start : start + batch]))
            logits = net(x)
            probs.extend(_sigmoid_prob(v) for v in logits.tolist())
    return probs


def _val_auc_fn(val_arrays, val_targets):
    if not val_arrays or len(set(val_targets)) < 2:
        return None

    def compute(net):
        probs = _batched_probs(net, val_arrays)
        return auc(list(zip(probs, (int(t) for t in val_targets))))

    return compute


def write_curves(path: str | Path, curves) -> None:
    if not curves:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(curves[0].keys()))
        writer.writeheader()
        writer.writerows(curves)


def train_classifier(
    manifest: DatasetManifest, config: ClassifierTrainConfig
) -> tuple[ClassifierModel, list[dict]]:
    """Train the ROI malignancy model on labelled crops from the train split."""
    train_records = _split_records(manifest, "train")
    val_records = _split_records(manifest, "val")
    crops, targets = _load_crop_dataset(manifest, train_records, config.crop_side)
    val_crops, val_targets = _load_crop_dataset(manifest, val_records, config.crop_side)
    net, curves = _train_loop(crops, targets, _val_auc_fn(val_crops, val_targets), config)
    return ClassifierModel(net, config, kind="roi"), curves


def train_direct(
    manifest: DatasetManifest, config: ClassifierTrainConfig
) -> tuple[ClassifierModel, list[dict]]:
    """Train the whole-image model against image-level labels."""
    train_records = _split_records(manifest, "train")
    val_records = _split_records(manifest, "val")
    images, targets = _load_image_dataset(manifest, train_records, config.crop_side)
    val_images, val_targets = _load_image_dataset(manifest, val_records, config.crop_side)
    net, curves = _train_loop(images, targets, _val_auc_fn(val_images, val_targets), config)
    return ClassifierModel(net, config, kind="direct"), curves
