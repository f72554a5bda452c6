"""Region-proposal detector backend built on torchvision's FasterRCNN.

Uses the same small GroupNorm backbone as the compact backend, wrapped
in a proper RPN + RoI-head two-stage pipeline.  torchvision's stock
postprocess keeps only the winning class score per box, so inference
here re-runs the box head manually to recover the full softmax row:
background is column 0, and a detection's class_probs is the foreground
slice of that row.

Slower per step than the compact backend; fine for small runs, not the
default.
"""

from __future__ import annotations

from collections import OrderedDict

import cv2
import numpy as np
import torch
from torch.nn import functional as F

from .data import DatasetManifest, Roi
from .errors import ConfigError, ModelIOError
from .nets import ConvBackbone, seed_everything


def build_frcnn(num_classes: int, config):
    from torchvision.models.detection import FasterRCNN
    from torchvision.models.detection.anchor_utils import AnchorGenerator
    from torchvision.ops import MultiScaleRoIAlign

    backbone = ConvBackbone((16, 32, 64))
    anchor_gen = AnchorGenerator(sizes=((16, 32, 56),), aspect_ratios=((0.75, 1.0, 1.33),))
    roi_pool = MultiScaleRoIAlign(featmap_names=["0"], output_size=7, sampling_ratio=2)
    return FasterRCNN(
        backbone,
        num_classes=num_classes + 1,  # torchvision keeps background at index 0
        rpn_anchor_generator=anchor_gen,
        box_roi_pool=roi_pool,
        min_size=config.image_size,
        max_size=config.image_size,
        rpn_batch_size_per_image=min(config.rpn_batch, 256),
        box_batch_size_per_image=config.rpn_batch,
        box_detections_per_img=config.max_detections,
    )


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)


def train_frcnn(manifest: DatasetManifest, granularity, config):
    records = list(manifest.split_records("train"))
    if not records:
        raise ConfigError("training split is empty")
    labels_per_record = [
        np.array([granularity.class_index(r.label) + 1 for r in rec.rois], dtype=np.int64)
        for rec in records
    ]

    images, targets = [], []
    for rec, labels in zip(records, labels_per_record):
        image = cv2.imread(str(manifest.resolve_path(rec)))
        if image is None:
            raise ModelIOError(f"cannot decode {manifest.resolve_path(rec)}")
        boxes = torch.tensor(
            [list(r.corners()) for r in rec.rois], dtype=torch.float32
        ).reshape(-1, 4)
        images.append(_image_tensor(image))
        targets.append({"boxes": boxes, "labels": torch.from_numpy(labels)})

    seed_everything(config.seed)
    model = build_frcnn(granularity.num_classes, config)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    n = len(records)
    curves = []
    model.train()
    for step in range(config.total_steps):
        lr = config.lr_at(step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = rng.choice(n, size=min(config.batch_images, n), replace=n < config.batch_images)
        batch_images = [images[i] for i in idx]
        batch_targets = [targets[i] for i in idx]
        loss_dict = model(batch_images, batch_targets)
        loss = sum(loss_dict.values())
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curves.append({"step": step, "lr": lr, "loss": float(loss.item())})
    model.eval()
    return model, curves


def _run_heads(model, image: np.ndarray):
    """Transform, backbone, RPN, box head; returns per-proposal softmax rows
    and per-class decoded boxes in original image coordinates."""
    h, w = image.shape[:2]
    with torch.no_grad():
        images, _ = model.transform([_image_tensor(image)])
        features = model.backbone(images.tensors)
        if isinstance(features, torch.Tensor):
            features = OrderedDict([("0", features)])
        proposals, _ = model.rpn(images, features)
        box_features = model.roi_heads.box_roi_pool(features, proposals, images.image_sizes)
        box_features = model.roi_heads.box_head(box_features)
        class_logits, box_regression = model.roi_heads.box_predictor(box_features)
        probs = F.softmax(class_logits, dim=-1)
        boxes = model.roi_heads.box_coder.decode(box_regression, proposals)
    rh, rw = images.image_sizes[0]
    boxes = boxes.reshape(len(probs), -1, 4)
    scale = torch.tensor([w / rw, h / rh, w / rw, h / rh], dtype=boxes.dtype)
    return probs, boxes * scale, box_features


def detect_frcnn(model, granularity, config, image: np.ndarray) -> list:
    from .detector import Detection, nms

    h, w = image.shape[:2]
    probs, boxes, _ = _run_heads(model, image)
    foreground = probs[:, 1:].numpy()
    scores = foreground.max(axis=1)
    best = foreground.argmax(axis=1)
    keep = scores >= config.score_threshold

    detections = []
    for i in np.flatnonzero(keep):
        x0, y0, x1, y1 = boxes[i, best[i] + 1].tolist()
        x0, x1 = max(0.0, min(x0, w)), max(0.0, min(x1, w))
        y0, y1 = max(0.0, min(y0, h)), max(0.0, min(y1, h))
        if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
            continue
        roi = Roi(
            x_center=(x0 + x1) / 2,
            y_center=(y0 + y1) / 2,
            width=x1 - x0,
            height=y1 - y0,
        )
        row = np.clip(foreground[i], 1e-6, 1.0 - 1e-6)
        detections.append(Detection.make(roi, row))
    kept = nms(detections, config.nms_iou)
    return kept[: config.max_detections]


def features_frcnn(model, config, image: np.ndarray, boxes: list[Roi]) -> np.ndarray:
    """Box-head representation for caller-supplied boxes."""
    if not boxes:
        width = model.roi_heads.box_predictor.cls_score.in_features
        return np.zeros((0, width), dtype=np.float64)
    h, w = image.shape[:2]
    with torch.no_grad():
        images, _ = model.transform([_image_tensor(image)])
        features = model.backbone(images.tensors)
        if isinstance(features, torch.Tensor):
            features = OrderedDict([("0", features)])
        rh, rw = images.image_sizes[0]
        scale = torch.tensor([rw / w, rh / h, rw / w, rh / h], dtype=torch.float32)
        proposal = torch.tensor([list(b.corners()) for b in boxes], dtype=torch.float32) * scale
        pooled = model.roi_heads.box_roi_pool(features, [proposal], images.image_sizes)
        rep = model.roi_heads.box_head(pooled)
    return rep.numpy().astype(np.float64)
