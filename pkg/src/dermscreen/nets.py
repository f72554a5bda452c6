"""Small convolutional building blocks shared by the trainable models.

GroupNorm everywhere: batch statistics would make inference depend on
batch composition, and these models train with small batches on CPU.
Image tensors are float32 CHW scaled to [-1, 1]; channel order is
whatever the image IO produced (cv2 BGR end to end).
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


def _groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm = nn.GroupNorm(_groups(out_ch), out_ch)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ConvBackbone(nn.Module):
    """Stack of downsampling stages; each stage halves resolution.

    ``channels`` gives one entry per stage, so the output stride is
    2 ** len(channels).
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64, 96), in_channels: int = 3):
        super().__init__()
        stages = []
        prev = in_channels
        for ch in channels:
            stages.append(nn.Sequential(ConvBlock(prev, ch, stride=2), ConvBlock(ch, ch)))
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.out_channels = channels[-1]
        self.out_stride = 2 ** len(channels)

    def forward(self, x):
        return self.stages(x)


class RoiClassifierNet(nn.Module):
    """Backbone + global average pooling + one logit."""

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64, 96)):
        super().__init__()
        self.backbone = ConvBackbone(channels)
        self.head = nn.Linear(self.backbone.out_channels, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        fmap = self.backbone(x)
        return fmap.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 NHWC (or HWC) in [0,255] -> float32 NCHW in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8 images, got {arr.dtype}")
    t = torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)
    return t.permute(0, 3, 1, 2).contiguous()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
