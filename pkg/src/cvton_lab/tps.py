"""Thin-plate-spline sampling grids and a bilinear warp with exact identity.

Offsets live on a regular ``n x n`` control grid in normalized coordinates
(``[-1, 1]``, x to the right, y downwards). ``offsets[..., :n*n]`` are the
x-displacements and ``offsets[..., n*n:]`` the y-displacements, control points
enumerated row-major. The dense grid maps every output pixel to the source
location it samples from: the TPS interpolant ``f`` with ``f(P_i) = P_i + d_i``.

Because the interpolant is linear in the offsets, the dense grid is
``identity + B @ offsets`` for a basis matrix ``B`` that only depends on
``(n, H, W)``; it is computed once in float64 and cached.
"""

from __future__ import annotations

import functools
import math

import numpy as np
import torch

__all__ = [
    "TpsError",
    "control_points",
    "tps_kernel",
    "identity_grid",
    "tps_basis",
    "solve_tps",
    "warp",
    "grid_size_of",
]

RIDGE = 1e-6
MAX_CONDITION = 1e12
MIN_SIDE = 4


class TpsError(ValueError):
    """Raised for degenerate control configurations or malformed inputs."""


def control_points(n: int) -> np.ndarray:
    """Regular ``n x n`` control grid as an ``(n*n, 2)`` array of (x, y)."""
    t = np.linspace(-1.0, 1.0, n)
    gy, gx = np.meshgrid(t, t, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """Radial basis ``U = r^2 log r^2`` evaluated on squared distances."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def grid_size_of(offsets: torch.Tensor) -> int:
    """Infer ``n`` from a ``(..., 2n^2)`` offset tensor."""
    k = offsets.shape[-1]
    n = int(round(math.sqrt(k / 2)))
    if n < 1 or 2 * n * n != k:
        raise TpsError(f"offset length {k} is not 2*n^2 for any integer n")
    return n


def _pixel_coords(out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    # align_corners convention: pixel centres at -1 ... 1 inclusive
    ys = np.linspace(-1.0, 1.0, out_h)
    xs = np.linspace(-1.0, 1.0, out_w)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return gx, gy


@functools.lru_cache(maxsize=64)
def _system_inverse(n: int) -> np.ndarray:
    pts = control_points(n)
    k = pts.shape[0]
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = tps_kernel(d2) + RIDGE * np.eye(k)
    system[:k, k] = 1.0
    system[:k, k + 1:] = pts
    system[k, :k] = 1.0
    system[k + 1:, :k] = pts.T
    cond = np.linalg.cond(system)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise TpsError(
            f"singular TPS system for a {n}x{n} control grid "
            f"(condition number {cond:.3g} > {MAX_CONDITION:.0e})"
        )
    return np.linalg.inv(system)


@functools.lru_cache(maxsize=64)
def _basis_np(n: int, out_h: int, out_w: int) -> np.ndarray:
    inv = _system_inverse(n)
    k = n * n
    pts = control_points(n)
    gx, gy = _pixel_coords(out_h, out_w)
    q = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d2 = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    rows = np.concatenate([tps_kernel(d2), np.ones((q.shape[0], 1)), q], axis=1)
    # coefficients = inv @ [values; 0, 0, 0]  ->  only the first k columns matter
    basis = rows @ inv[:, :k]
    basis.setflags(write=False)
    return basis


def tps_basis(n: int, out_h: int, out_w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(H*W, n*n)`` matrix mapping control-point values to dense values."""
    return torch.tensor(_basis_np(n, out_h, out_w), dtype=dtype, device=device)


def identity_grid(out_h: int, out_w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(H, W, 2)`` grid of (x, y) normalized pixel-centre coordinates."""
    gx, gy = _pixel_coords(out_h, out_w)
    return torch.as_tensor(np.stack([gx, gy], axis=-1), dtype=dtype, device=device)


def solve_tps(offsets: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Dense sampling grid for TPS control-point offsets.

    Args:
        offsets: ``(B, 2n^2)`` or ``(2n^2,)`` tensor.
        out_h, out_w: output resolution, each at least MIN_SIDE pixels.

    Returns:
        ``(B, H, W, 2)`` grid (no batch dim for 1-D input). Zero offsets give
        the identity grid exactly.
    """
    if out_h < MIN_SIDE or out_w < MIN_SIDE:
        raise TpsError(f"output resolution {out_h}x{out_w} below the {MIN_SIDE}-pixel minimum side")
    if not torch.isfinite(offsets).all():
        raise TpsError("TPS offsets contain non-finite values")
    squeeze = offsets.dim() == 1
    if squeeze:
        offsets = offsets[None]
    n = grid_size_of(offsets)
    k = n * n
    basis = tps_basis(n, out_h, out_w, dtype=offsets.dtype, device=offsets.device)
    dx = offsets[:, :k] @ basis.T
    dy = offsets[:, k:] @ basis.T
    disp = torch.stack([dx, dy], dim=-1).view(-1, out_h, out_w, 2)
    grid = identity_grid(out_h, out_w, offsets.dtype, offsets.device) + disp
    return grid[0] if squeeze else grid


def _snap(p: torch.Tensor) -> torch.Tensor:
    # positions within roundoff of an integer site are moved onto it (value only)
    tol = 64 * torch.finfo(p.dtype).eps * max(1.0, float(p.detach().abs().max()) if p.numel() else 1.0)
    r = torch.round(p)
    close = (p - r).abs() <= tol
    return p + torch.where(close, r - p, torch.zeros_like(p)).detach()


def warp(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear resampling with border padding.

    ``image`` is ``(B, C, H, W)``; ``grid`` is ``(B, H, W, 2)`` at the same
    resolution. Differentiable with respect to both arguments. Sampling at
    integer pixel sites reproduces the input exactly.
    """
    if image.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise TpsError(f"expected (B,C,H,W) image and (B,H,W,2) grid, got {tuple(image.shape)} and {tuple(grid.shape)}")
    b, c, h, w = image.shape
    if grid.shape[1:3] != (h, w):
        raise TpsError(f"grid resolution {tuple(grid.shape[1:3])} does not match image resolution {(h, w)}")
    if grid.shape[0] != b:
        raise TpsError(f"batch mismatch: image {b}, grid {grid.shape[0]}")
    if h < 2 or w < 2:
        raise TpsError("warp needs at least 2 pixels along each axis")
    grid = grid.to(image.dtype)

    px = _snap((grid[..., 0] + 1) * (0.5 * (w - 1))).clamp(0, w - 1)
    py = _snap((grid[..., 1] + 1) * (0.5 * (h - 1))).clamp(0, h - 1)
    x0 = px.detach().floor().clamp(max=w - 2)
    y0 = py.detach().floor().clamp(max=h - 2)
    fx = (px - x0).unsqueeze(1)
    fy = (py - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()

    flat = image.reshape(b, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).view(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).view(b, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x0 + 1)
    v10 = gather(y0 + 1, x0)
    v11 = gather(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bottom = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bottom * fy
