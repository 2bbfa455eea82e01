"""Feature extractors, perceptual losses and the FID / LPIPS evaluation metrics.

The default extractor is a small VGG-style convnet with fixed random weights
drawn from a seeded generator. It needs no downloads, but metric values
computed with it are only comparable with other values computed with the
same extractor (same ``extractor_id``). A pretrained backbone can be plugged
in through :func:`load_extractor` as long as it returns five feature maps.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "FeatureExtractor",
    "default_extractor",
    "load_extractor",
    "perceptual_loss",
    "EmbeddingStats",
    "embed",
    "embedding_stats",
    "fid",
    "lpips",
    "MetricReport",
    "evaluate_testset",
    "read_report",
]

N_FEATURE_MAPS = 5
CACHE_ENV = "CVTON_LAB_CACHE"


class FeatureExtractor(nn.Module):
    """Frozen VGG-like network returning the map before each of five poolings."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32, 64, 64), in_channels: int = 3, seed: int = 0,
                 extractor_id: str | None = None):
        super().__init__()
        if len(widths) != N_FEATURE_MAPS:
            raise ValueError(f"feature extractor needs {N_FEATURE_MAPS} stages, got {len(widths)}")
        self.widths = tuple(int(w) for w in widths)
        self.seed = seed
        self.extractor_id = extractor_id or f"random-vgg{'-'.join(map(str, self.widths))}-seed{seed}"
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = in_channels
        for w in self.widths:
            conv = nn.Conv2d(cin, w, 3, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            stages.append(conv)
            cin = w
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # never switches to training mode; keeps the module stateless
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, conv in enumerate(self.stages):
            if i > 0:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def default_extractor(seed: int = 0, dtype=torch.float32) -> FeatureExtractor:
    return FeatureExtractor(seed=seed).to(dtype)


def load_extractor(weights: str | os.PathLike | None = None, seed: int = 0, dtype=torch.float32) -> FeatureExtractor:
    """Build an extractor, optionally loading weights from a file.

    Relative paths are resolved against ``$CVTON_LAB_CACHE`` when that
    directory is set.
    """
    if weights is None:
        return default_extractor(seed, dtype)
    path = Path(weights)
    if not path.is_absolute() and os.environ.get(CACHE_ENV):
        path = Path(os.environ[CACHE_ENV]) / path
    state = torch.load(path, map_location="cpu", weights_only=True)
    widths = tuple(state[f"stages.{i}.weight"].shape[0] for i in range(N_FEATURE_MAPS))
    fx = FeatureExtractor(widths, in_channels=state["stages.0.weight"].shape[1], extractor_id=f"file:{path.name}")
    fx.load_state_dict(state)
    return fx.to(dtype)


def _check_depth(feats):
    if len(feats) != N_FEATURE_MAPS:
        raise ValueError(f"extractor returned {len(feats)} feature maps, expected {N_FEATURE_MAPS}")


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, fx: Callable, weights: Sequence[float] = (1.0,) * 5) -> torch.Tensor:
    """Weighted sum over layers of the mean absolute feature difference."""
    fa, fb = fx(a), fx(b)
    _check_depth(fa)
    _check_depth(fb)
    if len(weights) != N_FEATURE_MAPS:
        raise ValueError(f"need {N_FEATURE_MAPS} layer weights, got {len(weights)}")
    total = a.new_zeros(())
    for w, x, y in zip(weights, fa, fb):
        if w:
            total = total + w * (x - y).abs().mean()
    return total


# --- FID -----------------------------------------------------------------


@dataclasses.dataclass
class EmbeddingStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@torch.no_grad()
def embed(images: torch.Tensor, fx: Callable) -> np.ndarray:
    """Spatially averaged final feature map, one row per image."""
    feats = fx(images)
    _check_depth(feats)
    return feats[-1].mean(dim=(2, 3)).double().cpu().numpy()


def embedding_stats(features: np.ndarray) -> EmbeddingStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"need at least 2 embeddings of shape (N, D), got {features.shape}")
    return EmbeddingStats(features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False)))


def _psd_sqrt(mat: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    if vals.min() < -tol:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(a: EmbeddingStats, b: EmbeddingStats, tol: float = 1e-8) -> float:
    """Frechet distance between two Gaussian fits.

    ``Tr((S1 S2)^(1/2))`` is taken from the eigenvalues of the symmetric
    product ``S1^(1/2) S2 S1^(1/2)``, which has the same spectrum.
    Eigenvalues below ``-tol`` (scaled by the matrix magnitude) raise.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError("embedding statistics have different dimensions")
    scale = max(1.0, float(np.abs(a.sigma).max()), float(np.abs(b.sigma).max()))
    root_a = _psd_sqrt(a.sigma, tol * scale)
    prod = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh((prod + prod.T) / 2)
    if vals.min() < -tol * scale * scale:
        raise ValueError(f"ill-conditioned covariance product (min eigenvalue {vals.min():.3g})")
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_sqrt)
    return max(value, 0.0)


# --- LPIPS ---------------------------------------------------------------


def lpips(x: torch.Tensor, y: torch.Tensor, fx: Callable, weights: Sequence[torch.Tensor | None] | None = None,
          eps: float = 1e-10) -> torch.Tensor:
    """Per-image LPIPS-style distance, shape ``(B,)``.

    Features are unit-normalized along channels; squared differences are
    channel-weighted (all ones when ``weights`` is None), averaged over space
    and summed over the five layers.
    """
    fa, fb = fx(x), fx(y)
    _check_depth(fa)
    _check_depth(fb)
    total = x.new_zeros(x.shape[0])
    for i, (p, q) in enumerate(zip(fa, fb)):
        p = p / (p.pow(2).sum(1, keepdim=True).sqrt() + eps)
        q = q / (q.pow(2).sum(1, keepdim=True).sqrt() + eps)
        d = (p - q).pow(2)
        if weights is not None and weights[i] is not None:
            d = d * torch.as_tensor(weights[i], dtype=d.dtype).view(1, -1, 1, 1)
        total = total + d.sum(1).mean(dim=(1, 2))
    return total


# --- test-set evaluation --------------------------------------------------


@dataclasses.dataclass
class MetricReport:
    protocol: str
    n_samples: int
    fid: float
    lpips_mean: float | None
    lpips_std: float | None
    extractor_id: str
    seed: int

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    def summary(self) -> str:
        line = f"[{self.protocol}] n={self.n_samples} FID={self.fid:.4f}"
        if self.lpips_mean is not None:
            line += f" LPIPS={self.lpips_mean:.4f}+-{self.lpips_std:.4f}"
        return line


def read_report(path: str | os.PathLike) -> MetricReport:
    return MetricReport(**json.loads(Path(path).read_text()))


@torch.no_grad()
def evaluate_testset(model: Callable, batches: Iterable, protocol: str, fx: FeatureExtractor | None = None,
                     seed: int = 0) -> MetricReport:
    """Run ``model`` over a dataset and score its outputs.

    ``batches`` yields batch dicts as produced by
    :func:`cvton_lab.data.iterate_batches`; ``model(batch)`` returns the
    generated images for the batch's target garments. Under the paired protocol the garment is the person's
    own one and LPIPS against the person image is reported. FID between all
    generated and all real person images is reported for both protocols.
    """
    if protocol not in ("paired", "unpaired"):
        raise ValueError(f"unknown protocol {protocol!r}; expected 'paired' or 'unpaired'")
    fx = fx or default_extractor()
    dtype = next(fx.parameters()).dtype
    real_emb, fake_emb, dists = [], [], []
    for batch in batches:
        out = model(batch)
        real = batch["person"].to(dtype)
        out = out.to(dtype)
        real_emb.append(embed(real, fx))
        fake_emb.append(embed(out, fx))
        if protocol == "paired":
            dists.append(lpips(out, real, fx).double().cpu().numpy())
    if not real_emb:
        raise ValueError("cannot evaluate an empty dataset")
    real_emb = np.concatenate(real_emb)
    fake_emb = np.concatenate(fake_emb)
    score = fid(embedding_stats(fake_emb), embedding_stats(real_emb))
    if dists:
        d = np.concatenate(dists)
        mean, std = float(d.mean()), float(d.std())
    else:
        mean = std = None
    return MetricReport(protocol, int(real_emb.shape[0]), score, mean, std, fx.extractor_id, seed)
