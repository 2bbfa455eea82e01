"""Body-part geometric matcher: garment/segmentation correlation to TPS offsets."""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .tps import solve_tps, warp

__all__ = [
    "ConfigError",
    "FeatureEncoder",
    "correlate",
    "Regressor",
    "GeometricMatcher",
    "loss_shape",
    "loss_appearance",
    "loss_vgg_bpgm",
    "BpgmLossReport",
    "bpgm_objective",
    "DEFAULT_VGG_LAYER_WEIGHTS",
]

DEFAULT_VGG_LAYER_WEIGHTS = (1.0, 1.0, 1.0, 1.0, 1.0)


class ConfigError(ValueError):
    """Network configuration incompatible with the input resolution."""


class FeatureEncoder(nn.Module):
    """Stack of conv / downsample / ReLU / batch-norm stages.

    Each stage halves the spatial size, so the input sides must be divisible
    by ``2 ** len(widths)``; this is checked when the encoder is built.
    """

    def __init__(self, in_channels: int, widths: Sequence[int], resolution: tuple[int, int]):
        super().__init__()
        factor = 2 ** len(widths)
        h, w = resolution
        if h % factor or w % factor:
            raise ConfigError(
                f"{len(widths)} downsampling stages need the resolution to be divisible by {factor}; "
                f"{h}x{w} gives {h / factor:g}x{w / factor:g}")
        self.resolution = (h, w)
        layers = []
        cin = in_channels
        for cout in widths:
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.ReLU(), nn.BatchNorm2d(cout)]
            cin = cout
        self.net = nn.Sequential(*layers)
        self.out_channels = cin
        self.out_resolution = (h // factor, w // factor)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.resolution:
            raise ConfigError(f"encoder built for {self.resolution}, got input {tuple(x.shape[-2:])}")
        return self.net(x)


def l2_normalize(f: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Unit L2 norm of the channel vector at every site of a ``(B, C, H, W)`` volume."""
    return f / (f.pow(2).sum(1, keepdim=True) + eps ** 2).sqrt()


def correlate(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """``(B, h*w, h*w)`` correlation of two normalized feature volumes.

    Entry ``[b, i, j]`` is the dot product of site ``i`` of ``f1`` with site
    ``j`` of ``f2``; sites are flattened row-major.
    """
    if f1.shape != f2.shape:
        raise ValueError(f"feature volumes differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    b, c, h, w = f1.shape
    p1 = l2_normalize(f1).reshape(b, c, h * w)
    p2 = l2_normalize(f2).reshape(b, c, h * w)
    return p1.transpose(1, 2) @ p2


class Regressor(nn.Module):
    """Correlation volume to bounded TPS offsets.

    The output head is zero-initialized, so a fresh regressor predicts the
    identity warp.
    """

    def __init__(self, feature_hw: tuple[int, int], widths: Sequence[int] = (128, 64, 64, 32), grid_size: int = 3,
                 max_offset: float = 0.4):
        super().__init__()
        fh, fw = feature_hw
        sites = fh * fw
        layers = []
        cin = sites
        for cout in widths:
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(), nn.BatchNorm2d(cout)]
            cin = cout
        self.convs = nn.Sequential(*layers)
        self.feature_hw = (fh, fw)
        self.head = nn.Linear(cin * sites, 2 * grid_size * grid_size)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.max_offset = max_offset
        self.grid_size = grid_size

    def forward(self, corr: torch.Tensor) -> torch.Tensor:
        b, n, m = corr.shape
        fh, fw = self.feature_hw
        if n != fh * fw or m != fh * fw:
            raise ValueError(f"regressor expects a {fh * fw}x{fh * fw} correlation, got {n}x{m}")
        # channels index sites of the first volume, spatial layout follows the second
        x = corr.reshape(b, n, fh, fw)
        x = self.convs(x)
        return torch.tanh(self.head(x.flatten(1))) * self.max_offset


class GeometricMatcher(nn.Module):
    """Two encoders, correlation, regressor and TPS warp."""

    def __init__(self, resolution: tuple[int, int], seg_channels: int = 25,
                 encoder_widths: Sequence[int] = (64, 128, 256, 512, 512),
                 regressor_widths: Sequence[int] = (512, 256, 128, 64), grid_size: int = 3, max_offset: float = 0.4):
        super().__init__()
        self.resolution = tuple(resolution)
        self.clothing_encoder = FeatureEncoder(3, encoder_widths, self.resolution)
        self.segmentation_encoder = FeatureEncoder(seg_channels, encoder_widths, self.resolution)
        self.regressor = Regressor(self.clothing_encoder.out_resolution, regressor_widths, grid_size, max_offset)

    def encode_clothing(self, c: torch.Tensor) -> torch.Tensor:
        return self.clothing_encoder(c)

    def encode_segmentation(self, s: torch.Tensor) -> torch.Tensor:
        return self.segmentation_encoder(s)

    def predict_theta(self, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        corr = correlate(self.encode_clothing(c), self.encode_segmentation(s))
        return self.regressor(corr)

    def forward(self, c: torch.Tensor, s: torch.Tensor, m_t: torch.Tensor | None = None):
        """Returns ``(theta, c_w, m_w)``; ``m_w`` is None when ``m_t`` is not given."""
        if c.shape[-2:] != s.shape[-2:]:
            raise ValueError(f"garment {tuple(c.shape[-2:])} and segmentation {tuple(s.shape[-2:])} differ in size")
        theta = self.predict_theta(c, s)
        h, w = c.shape[-2:]
        grid = solve_tps(theta, h, w)
        c_w = warp(c, grid)
        m_w = warp(m_t, grid) if m_t is not None else None
        return theta, c_w, m_w


# --- losses --------------------------------------------------------------


def _same_shape(*ts):
    shapes = {tuple(t.shape) for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def loss_shape(m_w: torch.Tensor, m_c: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between warped garment mask and clothing mask."""
    _same_shape(m_w, m_c)
    return (m_w - m_c).abs().mean()


def loss_appearance(c_w: torch.Tensor, i: torch.Tensor, m_b: torch.Tensor) -> torch.Tensor:
    """Mean L1 between warped garment and person inside the body area."""
    if c_w.shape != i.shape or m_b.shape[-2:] != i.shape[-2:]:
        raise ValueError(f"shape mismatch: {tuple(c_w.shape)}, {tuple(i.shape)}, {tuple(m_b.shape)}")
    return (c_w * m_b - i * m_b).abs().mean()


def loss_vgg_bpgm(c_w: torch.Tensor, i: torch.Tensor, m_b: torch.Tensor, fx: Callable,
                  layer_weights: Sequence[float] = DEFAULT_VGG_LAYER_WEIGHTS) -> torch.Tensor:
    if c_w.shape != i.shape or m_b.shape[-2:] != i.shape[-2:]:
        raise ValueError(f"shape mismatch: {tuple(c_w.shape)}, {tuple(i.shape)}, {tuple(m_b.shape)}")
    return metrics.perceptual_loss(c_w * m_b, i * m_b, fx, layer_weights)


@dataclasses.dataclass
class BpgmLossReport:
    shp: torch.Tensor
    app: torch.Tensor
    vgg: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in dataclasses.fields(self)}


def bpgm_objective(shp, app, vgg, lambda_shp: float = 1.0, lambda_app: float = 1.0,
                   lambda_vgg: float = 0.1) -> BpgmLossReport:
    total = lambda_shp * shp + lambda_app * app + lambda_vgg * vgg
    return BpgmLossReport(shp, app, vgg, total)
