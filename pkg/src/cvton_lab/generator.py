"""Context-aware generator: residual upsampling blocks with context-aware normalization."""

from __future__ import annotations

import copy
import dataclasses
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ImageContext",
    "build_image_context",
    "masked_person",
    "can_modulate",
    "ContextNorm",
    "PlainNorm",
    "ContextResBlock",
    "ContextGenerator",
    "ema_update",
    "EMA",
]


@dataclasses.dataclass
class ImageContext:
    """Full-resolution context plus one resized copy per generator resolution.

    ``pyramid`` is ordered from the smallest (generator root) to full size.
    """

    full: torch.Tensor
    pyramid: list[torch.Tensor]

    @property
    def channels(self) -> int:
        return self.full.shape[1]

    def level(self, size: tuple[int, int]) -> torch.Tensor:
        for t in self.pyramid:
            if tuple(t.shape[-2:]) == tuple(size):
                return t
        raise ValueError(f"no context level at {tuple(size)}; available "
                         f"{[tuple(t.shape[-2:]) for t in self.pyramid]}")

    def detach(self) -> "ImageContext":
        return ImageContext(self.full.detach(), [t.detach() for t in self.pyramid])


def masked_person(i: torch.Tensor, m_c: torch.Tensor, keep_clothing: bool = False) -> torch.Tensor:
    """Person image with the worn clothing hidden (set to 0, mid-gray).

    ``keep_clothing=True`` keeps only the clothing instead, i.e. ``I * M_c``.
    """
    return i * m_c if keep_clothing else i * (1 - m_c)


def build_image_context(s: torch.Tensor, i: torch.Tensor, m_c: torch.Tensor, c: torch.Tensor, c_w: torch.Tensor,
                        n_levels: int, keep_clothing: bool = False) -> ImageContext:
    """Concatenate segmentation, masked person, garment and warped garment.

    Builds ``n_levels`` pyramid levels, halving from full resolution; segmentation
    channels are resized with nearest-neighbour, image channels with area
    averaging.
    """
    size = tuple(i.shape[-2:])
    for name, t in (("segmentation", s), ("clothing mask", m_c), ("garment", c), ("warped garment", c_w)):
        if tuple(t.shape[-2:]) != size:
            raise ValueError(f"{name} resolution {tuple(t.shape[-2:])} does not match person {size}")
    h, w = size
    if h % 2 ** (n_levels - 1) or w % 2 ** (n_levels - 1):
        raise ValueError(f"{h}x{w} cannot be halved {n_levels - 1} times")
    i_m = masked_person(i, m_c, keep_clothing)
    images = torch.cat([i_m, c, c_w], dim=1)
    full = torch.cat([s, images], dim=1)
    pyramid = [full]
    for k in range(1, n_levels):
        sz = (h >> k, w >> k)
        pyramid.append(torch.cat([F.interpolate(s, size=sz, mode="nearest"),
                                  F.interpolate(images, size=sz, mode="area")], dim=1))
    return ImageContext(full, pyramid[::-1])


def can_modulate(x_bn: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Elementwise ``x_bn * gamma + beta``."""
    if gamma.shape != x_bn.shape or beta.shape != x_bn.shape:
        raise ValueError(f"modulation shapes {tuple(gamma.shape)}, {tuple(beta.shape)} "
                         f"do not match activation {tuple(x_bn.shape)}")
    return x_bn * gamma + beta


class ContextNorm(nn.Module):
    """Batch norm followed by per-pixel scale and bias predicted from the context.

    One shared convolution embeds the context; two zero-initialized heads
    produce ``gamma - 1`` and ``beta``, so a fresh layer is plain batch norm.
    """

    def __init__(self, channels: int, context_channels: int, hidden: int = 128):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(context_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        for head in (self.gamma, self.beta):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def modulation(self, ic: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a = self.shared(ic)
        return 1 + self.gamma(a), self.beta(a)

    def forward(self, x: torch.Tensor, ic: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != ic.shape[-2:]:
            raise ValueError(f"context {tuple(ic.shape[-2:])} does not match activation {tuple(x.shape[-2:])}")
        gamma, beta = self.modulation(ic)
        return can_modulate(self.bn(x), gamma, beta)


class PlainNorm(nn.Module):
    """Batch norm with a learned affine; ignores the context."""

    def __init__(self, channels: int, context_channels: int = 0, hidden: int = 0):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=True)

    def forward(self, x: torch.Tensor, ic: torch.Tensor | None = None) -> torch.Tensor:
        return self.bn(x)


class ContextResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, context_channels: int, hidden: int, use_can: bool = True):
        super().__init__()
        norm = ContextNorm if use_can else PlainNorm
        self.norm_0 = norm(cin, context_channels, hidden)
        self.conv_0 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm_1 = norm(cout, context_channels, hidden)
        self.conv_1 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x: torch.Tensor, ic: torch.Tensor) -> torch.Tensor:
        h = self.conv_0(F.relu(self.norm_0(x, ic)))
        h = self.conv_1(F.relu(self.norm_1(h, ic)))
        return self.shortcut(x) + h


def default_widths(n_blocks: int, n_up: int, base: int = 512, minimum: int = 32) -> tuple[int, ...]:
    """Block widths halving after every upsampling, clipped at ``minimum``."""
    first_up = n_blocks - n_up
    widths = []
    for i in range(n_blocks):
        ups_before = max(0, i - first_up)
        widths.append(max(minimum, base >> ups_before))
    return tuple(widths)


class ContextGenerator(nn.Module):
    """Residual generator driven by an :class:`ImageContext`.

    The root resolution is ``resolution / 2**n_up``. The first block takes a
    1x1 projection of the root-level context as its activation. The last
    ``n_up`` blocks are each followed by 2x nearest upsampling, and a
    convolution with tanh maps the final activation to RGB.
    """

    def __init__(self, resolution: tuple[int, int], context_channels: int = 34, n_blocks: int = 6, n_up: int = 5,
                 widths: Sequence[int] | None = None, hidden: int = 128, use_can: bool = True):
        super().__init__()
        h, w = resolution
        if n_up > n_blocks:
            raise ValueError(f"cannot upsample {n_up} times with {n_blocks} blocks")
        if h % 2 ** n_up or w % 2 ** n_up:
            raise ValueError(f"{h}x{w} is not divisible by 2**{n_up}")
        self.resolution = (h, w)
        self.root = (h >> n_up, w >> n_up)
        self.n_up = n_up
        self.use_can = use_can
        widths = tuple(widths) if widths is not None else default_widths(n_blocks, n_up)
        if len(widths) != n_blocks:
            raise ValueError(f"need {n_blocks} block widths, got {len(widths)}")
        self.widths = widths
        self.input_proj = nn.Conv2d(context_channels, widths[0], 1)
        self.blocks = nn.ModuleList()
        self.upsample_after = []
        cin = widths[0]
        for k, cout in enumerate(widths):
            self.blocks.append(ContextResBlock(cin, cout, context_channels, hidden, use_can))
            self.upsample_after.append(k >= n_blocks - n_up)
            cin = cout
        self.to_rgb = nn.Conv2d(cin, 3, 3, padding=1)

    @property
    def n_levels(self) -> int:
        return self.n_up + 1

    def block_resolutions(self) -> list[tuple[int, int]]:
        out, (h, w) = [], self.root
        for up in self.upsample_after:
            out.append((h, w))
            if up:
                h, w = 2 * h, 2 * w
        return out

    def forward(self, ic: ImageContext) -> torch.Tensor:
        if tuple(ic.full.shape[-2:]) != self.resolution:
            raise ValueError(f"generator built for {self.resolution}, context is {tuple(ic.full.shape[-2:])}")
        x = self.input_proj(ic.level(self.root))
        for block, up in zip(self.blocks, self.upsample_after):
            x = block(x, ic.level(tuple(x.shape[-2:])))
            if up:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.to_rgb(F.leaky_relu(x, 0.2)))


# --- EMA -----------------------------------------------------------------


def ema_update(shadow: Mapping[str, torch.Tensor], live: Mapping[str, torch.Tensor], decay: float) -> dict:
    """``decay * shadow + (1 - decay) * live`` for every entry; returns a new dict."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    if shadow.keys() != live.keys():
        raise ValueError("shadow and live parameter sets have different keys")
    out = {}
    for k, s in shadow.items():
        v = live[k]
        if s.shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(s.shape)} vs {tuple(v.shape)}")
        out[k] = s * decay + v * (1 - decay) if s.is_floating_point() else v.clone()
    return out


class EMA:
    """Shadow copy of a module whose parameters track the live ones.

    Buffers (batch-norm statistics) are copied verbatim at every update.
    """

    def __init__(self, model: nn.Module, decay: float = 0.9999):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.module = copy.deepcopy(model)
        self.module.requires_grad_(False)
        self.module.eval()

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        live = dict(model.named_parameters())
        for name, p in self.module.named_parameters():
            p.mul_(self.decay).add_(live[name].detach(), alpha=1 - self.decay)
        live_buffers = dict(model.named_buffers())
        for name, b in self.module.named_buffers():
            b.copy_(live_buffers[name])

    def state_dict(self) -> dict:
        return self.module.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.module.load_state_dict(state)
