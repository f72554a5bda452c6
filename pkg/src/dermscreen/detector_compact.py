"""Single-stage anchor detector used as the default backend.

A small GroupNorm conv backbone at stride 8 feeds two 1x1 heads: per
anchor, softmax logits over the foreground classes plus background, and
four box-regression deltas.  Images are resized to a fixed square for
the network; predicted boxes are mapped back to original coordinates.

Background is the LAST class index, so a detection's class probability
vector is the plain foreground slice of the softmax and sums to <= 1.
"""

from __future__ import annotations

import math

import cv2
import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import DatasetManifest, Roi
from .errors import ConfigError, GranularityError, ModelIOError
from .nets import ConvBackbone, ConvBlock, seed_everything, to_tensor

ANCHOR_SIZES = (16.0, 32.0, 56.0)
POS_IOU = 0.5
NEG_IOU = 0.4
MAX_DELTA = 4.0


def anchor_grid(image_size: int, stride: int, sizes=ANCHOR_SIZES) -> np.ndarray:
    """All anchors as (cx, cy, w, h), cell row-major then per size."""
    cells = image_size // stride
    out = np.empty((cells * cells * len(sizes), 4), dtype=np.float64)
    i = 0
    for row in range(cells):
        for col in range(cells):
            cx = (col + 0.5) * stride
            cy = (row + 0.5) * stride
            for s in sizes:
                out[i] = (cx, cy, s, s)
                i += 1
    return out


def _corners(boxes: np.ndarray) -> np.ndarray:
    half = boxes[:, 2:4] / 2.0
    return np.concatenate([boxes[:, 0:2] - half, boxes[:, 0:2] + half], axis=1)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between two (N,4)/(M,4) center-format box arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ca, cb = _corners(a), _corners(b)
    x0 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y0 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x1 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y1 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(cx,cy,w,h) ground truth -> regression deltas against anchors."""
    t = np.empty_like(boxes)
    t[:, 0] = (boxes[:, 0] - anchors[:, 0]) / anchors[:, 2]
    t[:, 1] = (boxes[:, 1] - anchors[:, 1]) / anchors[:, 3]
    t[:, 2] = np.log(boxes[:, 2] / anchors[:, 2])
    t[:, 3] = np.log(boxes[:, 3] / anchors[:, 3])
    return t


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    d = np.clip(deltas, -MAX_DELTA, MAX_DELTA)
    out = np.empty_like(d)
    out[:, 0] = anchors[:, 0] + d[:, 0] * anchors[:, 2]
    out[:, 1] = anchors[:, 1] + d[:, 1] * anchors[:, 3]
    out[:, 2] = anchors[:, 2] * np.exp(d[:, 2])
    out[:, 3] = anchors[:, 3] * np.exp(d[:, 3])
    return out


def assign_targets(
    gt_boxes: np.ndarray, gt_classes: np.ndarray, anchors: np.ndarray, background: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor class target (-1 = ignore) and box-delta targets.

    Anchors overlapping a ground-truth box at IoU >= POS_IOU are
    positive; every ground truth also claims its best anchor so no box
    goes unsupervised.  Anchors below NEG_IOU are background, the band
    in between is ignored.
    """
    n_anchors = len(anchors)
    cls_target = np.full(n_anchors, background, dtype=np.int64)
    box_target = np.zeros((n_anchors, 4), dtype=np.float64)
    if len(gt_boxes) == 0:
        return cls_target, box_target

    overlap = pairwise_iou(anchors, gt_boxes)
    best_gt = overlap.argmax(axis=1)
    best_iou = overlap[np.arange(n_anchors), best_gt]

    cls_target[(best_iou >= NEG_IOU) & (best_iou < POS_IOU)] = -1
    positive = best_iou >= POS_IOU
    forced = overlap.argmax(axis=0)  # best anchor per ground truth
    positive[forced] = True
    best_gt[forced] = np.arange(len(gt_boxes))

    cls_target[positive] = gt_classes[best_gt[positive]]
    box_target[positive] = encode_boxes(gt_boxes[best_gt[positive]], anchors[positive])
    return cls_target, box_target


def sample_proposals(
    cls_target: np.ndarray, background: int, batch: int, rng: np.random.Generator
) -> np.ndarray:
    """Pick up to ``batch`` anchor indices, at most a quarter positive."""
    positives = np.flatnonzero((cls_target >= 0) & (cls_target != background))
    negatives = np.flatnonzero(cls_target == background)
    n_pos = min(len(positives), batch // 4)
    if len(positives) > n_pos:
        positives = rng.choice(positives, size=n_pos, replace=False)
    n_neg = min(len(negatives), batch - len(positives))
    if len(negatives) > n_neg:
        negatives = rng.choice(negatives, size=n_neg, replace=False)
    return np.concatenate([positives, negatives])


class CompactDetectorNet(nn.Module):
    def __init__(self, num_classes: int, channels=(16, 32, 64), num_anchors=len(ANCHOR_SIZES)):
        super().__init__()
        self.backbone = ConvBackbone(channels)
        ch = self.backbone.out_channels
        self.trunk = ConvBlock(ch, ch)
        self.num_classes = num_classes
        self.num_anchors = num_anchors
        self.cls_out = nn.Conv2d(ch, num_anchors * (num_classes + 1), 1)
        self.box_out = nn.Conv2d(ch, num_anchors * 4, 1)
        # bias background high so the untrained net is quiet
        nn.init.constant_(self.cls_out.bias, 0.0)
        with torch.no_grad():
            bias = self.cls_out.bias.view(num_anchors, num_classes + 1)
            bias[:, num_classes] = 2.0

    @property
    def stride(self) -> int:
        return self.backbone.out_stride

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(self.backbone(x))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fmap = self.feature_map(x)
        n, _, h, w = fmap.shape
        cls = self.cls_out(fmap).view(n, self.num_anchors, self.num_classes + 1, h, w)
        cls = cls.permute(0, 3, 4, 1, 2).reshape(n, h * w * self.num_anchors, self.num_classes + 1)
        box = self.box_out(fmap).view(n, self.num_anchors, 4, h, w)
        box = box.permute(0, 3, 4, 1, 2).reshape(n, h * w * self.num_anchors, 4)
        return cls, box


def _prepare_record(manifest: DatasetManifest, record, image_size: int):
    image = cv2.imread(str(manifest.resolve_path(record)))
    if image is None:
        raise ModelIOError(f"cannot decode {manifest.resolve_path(record)}")
    h, w = image.shape[:2]
    resized = cv2.resize(image, (image_size, image_size), interpolation=cv2.INTER_AREA)
    sx, sy = image_size / w, image_size / h
    boxes = np.array(
        [[r.x_center * sx, r.y_center * sy, r.width * sx, r.height * sy] for r in record.rois],
        dtype=np.float64,
    ).reshape(-1, 4)
    return resized, boxes


def _flip_batch_entry(image, boxes, size, rng):
    image = image.copy()
    boxes = boxes.copy()
    if rng.uniform() < 0.5:
        image = image[:, ::-1]
        if len(boxes):
            boxes[:, 0] = size - boxes[:, 0]
    if rng.uniform() < 0.5:
        image = image[::-1, :]
        if len(boxes):
            boxes[:, 1] = size - boxes[:, 1]
    return np.ascontiguousarray(image), boxes


def train_compact(manifest: DatasetManifest, granularity, config) -> tuple[CompactDetectorNet, list[dict]]:
    records = list(manifest.split_records("train"))
    if not records:
        raise ConfigError("training split is empty")
    # fail before training if any roi cannot be mapped onto the head
    class_lists = []
    for rec in records:
        class_lists.append(
            np.array([granularity.class_index(r.label) for r in rec.rois], dtype=np.int64)
        )

    size = config.image_size
    prepared = [_prepare_record(manifest, rec, size) for rec in records]
    background = granularity.num_classes

    seed_everything(config.seed)
    net = CompactDetectorNet(granularity.num_classes)
    anchors = anchor_grid(size, net.stride)
    optimizer = torch.optim.SGD(
        net.parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    curves = []
    n = len(records)
    for step in range(config.total_steps):
        lr = config.lr_at(step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = rng.choice(n, size=min(config.batch_images, n), replace=n < config.batch_images)
        images, cls_targets, box_targets, samples = [], [], [], []
        for i in idx:
            image, boxes = prepared[i]
            if config.augment:
                image, boxes = _flip_batch_entry(image, boxes, size, rng)
            cls_t, box_t = assign_targets(boxes, class_lists[i], anchors, background)
            images.append(image)
            cls_targets.append(cls_t)
            box_targets.append(box_t)
            samples.append(sample_proposals(cls_t, background, config.rpn_batch, rng))

        x = to_tensor(np.stack(images))
        cls_logits, box_deltas = net(x)
        # positives are outnumbered ~100:1 by sampled background anchors;
        # keep all positives plus the hardest negatives at 3:1
        cls_parts, box_losses = [], []
        for b, sample in enumerate(samples):
            target_np = cls_targets[b][sample]
            target = torch.from_numpy(target_np)
            logits = cls_logits[b, sample]
            per_anchor = F.cross_entropy(logits, target, reduction="none")
            pos_mask = target != background
            n_pos = int(pos_mask.sum())
            neg_losses = per_anchor[~pos_mask]
            k = min(len(neg_losses), max(3 * n_pos, 8))
            hard_neg = torch.topk(neg_losses, k).values if k else neg_losses[:0]
            picked = torch.cat([per_anchor[pos_mask], hard_neg])
            cls_parts.append(picked.mean())
            if n_pos:
                pos_idx = sample[target_np != background]
                box_losses.append(
                    F.smooth_l1_loss(
                        box_deltas[b, pos_idx],
                        torch.from_numpy(box_targets[b][pos_idx]).float(),
                    )
                )
        loss = torch.stack(cls_parts).mean()
        if box_losses:
            loss = loss + torch.stack(box_losses).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curves.append({"step": step, "lr": lr, "loss": float(loss.item())})
    net.eval()
    return net, curves


def detect_compact(net: CompactDetectorNet, granularity, config, image: np.ndarray) -> list:
    from .detector import Detection, nms

    h, w = image.shape[:2]
    size = config.image_size
    resized = cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA)
    with torch.no_grad():
        cls_logits, box_deltas = net(to_tensor(resized))
        probs = torch.softmax(cls_logits[0], dim=1).numpy()
        deltas = box_deltas[0].numpy().astype(np.float64)

    c = granularity.num_classes
    foreground = probs[:, :c]
    scores = foreground.max(axis=1)
    keep = scores >= config.score_threshold
    if not keep.any():
        return []
    anchors = anchor_grid(size, net.stride)
    boxes = decode_boxes(deltas[keep], anchors[keep])
    fg = np.clip(foreground[keep], 1e-6, 1.0 - 1e-6)

    sx, sy = w / size, h / size
    detections = []
    for box, prob_row in zip(boxes, fg):
        cx, cy, bw, bh = box[0] * sx, box[1] * sy, box[2] * sx, box[3] * sy
        x0 = min(max(cx - bw / 2, 0.0), float(w))
        x1 = min(max(cx + bw / 2, 0.0), float(w))
        y0 = min(max(cy - bh / 2, 0.0), float(h))
        y1 = min(max(cy + bh / 2, 0.0), float(h))
        if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
            continue
        roi = Roi(
            x_center=(x0 + x1) / 2,
            y_center=(y0 + y1) / 2,
            width=x1 - x0,
            height=y1 - y0,
        )
        detections.append(Detection.make(roi, prob_row))
    kept = nms(detections, config.nms_iou)
    return kept[: config.max_detections]


def features_compact(net: CompactDetectorNet, config, image: np.ndarray, boxes: list[Roi]) -> np.ndarray:
    """One backbone feature vector per box: mean over covered grid cells."""
    h, w = image.shape[:2]
    size = config.image_size
    resized = cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA)
    with torch.no_grad():
        fmap = net.feature_map(to_tensor(resized))[0].numpy()
    cells = fmap.shape[1]
    out = np.empty((len(boxes), fmap.shape[0]), dtype=np.float64)
    sx, sy = size / w, size / h
    for i, roi in enumerate(boxes):
        x0, y0, x1, y1 = roi.corners()
        c0 = int(np.clip(math.floor(x0 * sx / net.stride), 0, cells - 1))
        c1 = int(np.clip(math.ceil(x1 * sx / net.stride), c0 + 1, cells))
        r0 = int(np.clip(math.floor(y0 * sy / net.stride), 0, cells - 1))
        r1 = int(np.clip(math.ceil(y1 * sy / net.stride), r0 + 1, cells))
        out[i] = fmap[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out
