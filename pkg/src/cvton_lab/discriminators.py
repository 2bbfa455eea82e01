"""Segmentation, matching and patch discriminators with their losses."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "LOG_CLAMP",
    "ResBlock",
    "SegmentationDiscriminator",
    "MatchingDiscriminator",
    "PatchDiscriminator",
    "class_balance",
    "dseg_loss",
    "gen_seg_loss",
    "bce_real_fake",
    "bce_generator",
    "dmth_loss",
    "gen_mth_loss",
    "dptc_loss",
    "gen_ptc_loss",
    "PatchSet",
    "patch_size_for",
    "extract_patches",
]

LOG_CLAMP = 1e-8


class ResBlock(nn.Module):
    """Two conv+ReLU layers with a 1x1 trainable shortcut, optional resampling.

    ``resample`` is ``"down"`` (2x average pooling after the block),
    ``"up"`` (2x nearest upsampling before it) or None.
    """

    def __init__(self, cin: int, cout: int, resample: str | None = None):
        super().__init__()
        if resample not in (None, "down", "up"):
            raise ValueError(f"unknown resample mode {resample!r}")
        self.resample = resample
        self.conv_0 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv_1 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.resample == "up":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.conv_0(x), 0.2)
        h = F.leaky_relu(self.conv_1(h), 0.2)
        out = self.shortcut(x) + h
        if self.resample == "down":
            out = F.avg_pool2d(out, 2)
        return out


def _encoder(cin: int, widths: Sequence[int], n_down: int) -> tuple[nn.ModuleList, int]:
    blocks = nn.ModuleList()
    for k, w in enumerate(widths):
        blocks.append(ResBlock(cin, w, "down" if k < n_down else None))
        cin = w
    return blocks, cin


class SegmentationDiscriminator(nn.Module):
    """U-Net of residual blocks predicting ``d`` body parts plus a fake class.

    The encoder and decoder have ``len(widths)`` blocks each; the first
    ``n_down`` encoder blocks halve the resolution and the mirrored decoder
    blocks double it again, with skip connections between matching
    resolutions. ``forward`` returns per-pixel class probabilities.
    """

    def __init__(self, n_parts: int = 25, widths: Sequence[int] = (64, 128, 128, 256, 256, 256), n_down: int = 5,
                 in_channels: int = 3):
        super().__init__()
        if n_down > len(widths):
            raise ValueError("more downsampling stages than encoder blocks")
        self.n_parts = n_parts
        self.n_down = n_down
        self.encoder, cin = _encoder(in_channels, widths, n_down)
        self.decoder = nn.ModuleList()
        depth = len(widths)
        for k in range(depth):
            # decoder block k mirrors encoder block depth-1-k
            j = depth - 1 - k
            cout = widths[j - 1] if j > 0 else widths[0]
            self.decoder.append(ResBlock(cin + (widths[j] if k > 0 else 0), cout, "up" if j < n_down else None))
            cin = cout
        self.head = nn.Conv2d(cin, n_parts + 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2 ** self.n_down
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by {factor}")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        for k, block in enumerate(self.decoder):
            if k > 0:
                x = torch.cat([x, skips[len(skips) - 1 - k]], dim=1)
            x = block(x)
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class MatchingDiscriminator(nn.Module):
    """Scores whether a garment image matches the one worn in a person image."""

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 256, 256, 256), n_down: int = 5):
        super().__init__()
        self.person_encoder, dp = _encoder(3, widths, n_down)
        self.garment_encoder, dg = _encoder(3, widths, n_down)
        self.head = nn.Linear(dp + dg, 1)

    @staticmethod
    def _embed(blocks: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
        for block in blocks:
            x = block(x)
        return F.leaky_relu(x, 0.2).mean(dim=(2, 3))

    def forward(self, img: torch.Tensor, garment: torch.Tensor) -> torch.Tensor:
        z = torch.cat([self._embed(self.person_encoder, img), self._embed(self.garment_encoder, garment)], dim=1)
        return self.head(z).squeeze(1)


class PatchDiscriminator(nn.Module):
    """Residual encoder with a linear head over body-part patches."""

    def __init__(self, widths: Sequence[int] = (64, 128, 256, 256), n_down: int = 3):
        super().__init__()
        self.encoder, cin = _encoder(3, widths, n_down)
        self.head = nn.Linear(cin, 1)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = patches
        for block in self.encoder:
            x = block(x)
        return self.head(F.leaky_relu(x, 0.2).mean(dim=(2, 3))).squeeze(1)


# --- segmentation losses --------------------------------------------------


def class_balance(s: torch.Tensor) -> torch.Tensor:
    """Inverse-frequency weights ``h*w / |S_k|`` per sample and channel, shape ``(B, d)``.

    Absent channels get weight 0.
    """
    h, w = s.shape[-2:]
    counts = s.sum(dim=(2, 3))
    safe = torch.where(counts > 0, counts, torch.ones_like(counts))
    # tensor / tensor keeps the quotient correctly rounded; scalar / tensor does not
    area = torch.full_like(counts, float(h * w))
    return torch.where(counts > 0, area / safe, torch.zeros_like(counts))


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_CLAMP))


def _weighted_part_nll(pred: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    d = s.shape[1]
    if pred.shape[1] != d + 1 or pred.shape[-2:] != s.shape[-2:]:
        raise ValueError(f"prediction {tuple(pred.shape)} does not fit segmentation {tuple(s.shape)}")
    alpha = class_balance(s)[:, :, None, None]
    per_pixel = (alpha * s * _clamped_log(pred[:, :d])).sum(dim=1)
    return -per_pixel.mean()


def dseg_loss(pred_real: torch.Tensor, s: torch.Tensor, pred_fake: torch.Tensor) -> torch.Tensor:
    """Balanced part cross-entropy on real images plus fake-class cross-entropy on generated ones."""
    return _weighted_part_nll(pred_real, s) - _clamped_log(pred_fake[:, -1]).mean()


def gen_seg_loss(pred_fake: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Generator term: generated pixels should be classified as their true parts."""
    return _weighted_part_nll(pred_fake, s)


# --- binary losses --------------------------------------------------------


def bce_real_fake(logit_real: torch.Tensor, logit_fake: torch.Tensor) -> torch.Tensor:
    """``-E[log sigmoid(real)] - E[log(1 - sigmoid(fake))]`` in a stable form."""
    return F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()


def bce_generator(logit_fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-logit_fake).mean()


dmth_loss = bce_real_fake
gen_mth_loss = bce_generator


def dptc_loss(logit_real: torch.Tensor, logit_fake: torch.Tensor) -> torch.Tensor:
    if logit_real.numel() == 0 and logit_fake.numel() == 0:
        return logit_real.new_zeros(())
    real = F.softplus(-logit_real).mean() if logit_real.numel() else logit_real.new_zeros(())
    fake = F.softplus(logit_fake).mean() if logit_fake.numel() else logit_fake.new_zeros(())
    return real + fake


def gen_ptc_loss(logit_fake: torch.Tensor) -> torch.Tensor:
    if logit_fake.numel() == 0:
        return logit_fake.new_zeros(())
    return bce_generator(logit_fake)


# --- patches --------------------------------------------------------------


@dataclasses.dataclass
class PatchSet:
    """Crops centred on body parts.

    ``patches`` is ``(N, C, p, p)``; ``labels[k]`` is the segmentation channel
    and ``owners[k]`` the batch index of patch ``k``; ``boxes[k]`` holds the
    inclusive ``(top, left, bottom, right)`` pixel bounds.
    """

    patches: torch.Tensor
    labels: list[int]
    owners: list[int]
    boxes: list[tuple[int, int, int, int]]

    def __len__(self) -> int:
        return len(self.labels)


def patch_size_for(resolution: tuple[int, int], base: int = 32, base_height: int = 256) -> int:
    """Patch side scaled from ``base`` at ``base_height`` rows."""
    return max(4, int(round(base * resolution[0] / base_height)))


def _centroid_box(mask: torch.Tensor, size: int) -> tuple[int, int, int, int]:
    h, w = mask.shape
    ys, xs = torch.nonzero(mask > 0.5, as_tuple=True)
    cy = float(ys.double().mean())
    cx = float(xs.double().mean())
    half = size // 2
    top = min(max(int(cy + 0.5) - half, 0), h - size)
    left = min(max(int(cx + 0.5) - half, 0), w - size)
    return top, left, top + size - 1, left + size - 1


def extract_patches(img: torch.Tensor, s: torch.Tensor, parts: Sequence[int], size: int,
                    boxes: PatchSet | None = None) -> PatchSet:
    """Centroid-centred square crops for each listed part present in ``s``.

    Crops are clamped to the image. Passing ``boxes`` reuses the locations of
    an earlier extraction (used to crop generated images at real locations).
    """
    b, _, h, w = img.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    if boxes is None:
        labels, owners, locs = [], [], []
        for n in range(b):
            for part in parts:
                m = s[n, part]
                if m.sum() > 0:
                    labels.append(int(part))
                    owners.append(n)
                    locs.append(_centroid_box(m, size))
    else:
        labels, owners, locs = boxes.labels, boxes.owners, boxes.boxes
    crops = [img[n, :, t:bt + 1, l:r + 1] for n, (t, l, bt, r) in zip(owners, locs)]
    patches = torch.stack(crops) if crops else img.new_zeros((0, img.shape[1], size, size))
    return PatchSet(patches, list(labels), list(owners), list(locs))
