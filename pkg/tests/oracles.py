"""Slow, direct reference implementations used as test oracles.

Everything here is written from the defining formulas with explicit loops and
shares no code with the package.
"""

from __future__ import annotations

import math

import numpy as np
import torch


# --- thin-plate spline ---------------------------------------------------------


def tps_dense_bruteforce(offsets: np.ndarray, n: int, h: int, w: int, ridge: float = 1e-6) -> np.ndarray:
    """Solve the TPS interpolation system and evaluate it pixel by pixel.

    Control points sit on a regular grid in [-1, 1]; the interpolant maps
    control point ``P_i`` to ``P_i + d_i``. Returns ``(h, w, 2)``.
    """
    t = np.linspace(-1, 1, n)
    pts = [(t[c], t[r]) for r in range(n) for c in range(n)]
    k = n * n
    dx, dy = offsets[:k], offsets[k:]

    def u(r2):
        return 0.0 if r2 == 0 else r2 * math.log(r2)

    size = k + 3
    L = np.zeros((size, size))
    for i in range(k):
        for j in range(k):
            r2 = (pts[i][0] - pts[j][0]) ** 2 + (pts[i][1] - pts[j][1]) ** 2
            L[i, j] = u(r2) + (ridge if i == j else 0.0)
        L[i, k:] = (1.0, pts[i][0], pts[i][1])
        L[k:, i] = (1.0, pts[i][0], pts[i][1])
    rhs = np.zeros((size, 2))
    for i in range(k):
        rhs[i] = (pts[i][0] + dx[i], pts[i][1] + dy[i])
    coef = np.linalg.solve(L, rhs)

    out = np.zeros((h, w, 2))
    for row in range(h):
        y = -1 + 2 * row / (h - 1)
        for col in range(w):
            x = -1 + 2 * col / (w - 1)
            val = coef[k] + coef[k + 1] * x + coef[k + 2] * y
            for i in range(k):
                val = val + coef[i] * u((x - pts[i][0]) ** 2 + (y - pts[i][1]) ** 2)
            out[row, col] = val
    return out


def integer_shift(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """``out[y, x] = img[clamp(y + dy), clamp(x + dx)]`` for an ``(H, W)`` array."""
    h, w = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            out[y, x] = img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
    return out


# --- correlation -----------------------------------------------------------------


def correlation_loop(f1: np.ndarray, f2: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalized dot products of every site pair of two ``(C, H, W)`` volumes."""
    c, h, w = f1.shape
    sites = [(y, x) for y in range(h) for x in range(w)]
    out = np.zeros((h * w, h * w))
    for i, (y1, x1) in enumerate(sites):
        a = f1[:, y1, x1]
        a = a / math.sqrt(float(np.sum(a * a)) + eps ** 2)
        for j, (y2, x2) in enumerate(sites):
            b = f2[:, y2, x2]
            b = b / math.sqrt(float(np.sum(b * b)) + eps ** 2)
            out[i, j] = sum(a[q] * b[q] for q in range(c))
    return out


# --- simple losses -----------------------------------------------------------------


def mean_abs_loop(a: np.ndarray, b: np.ndarray) -> float:
    flat_a, flat_b = a.ravel(), b.ravel()
    return sum(abs(float(x) - float(y)) for x, y in zip(flat_a, flat_b)) / flat_a.size


def masked_l1_loop(c_w: np.ndarray, i: np.ndarray, m_b: np.ndarray) -> float:
    """``mean |c_w*m - i*m|`` over a ``(B, C, H, W)`` image with ``(B, 1, H, W)`` mask."""
    bsz, ch, h, w = c_w.shape
    total = 0.0
    for n in range(bsz):
        for k in range(ch):
            for y in range(h):
                for x in range(w):
                    m = m_b[n, 0, y, x]
                    total += abs(c_w[n, k, y, x] * m - i[n, k, y, x] * m)
    return total / c_w.size


# --- discriminator losses ----------------------------------------------------------


def balance_loop(s: np.ndarray) -> np.ndarray:
    """``alpha[n, k] = h*w / count`` or 0 for absent parts."""
    bsz, d, h, w = s.shape
    out = np.zeros((bsz, d))
    for n in range(bsz):
        for k in range(d):
            cnt = sum(s[n, k, y, x] for y in range(h) for x in range(w))
            out[n, k] = h * w / cnt if cnt > 0 else 0.0
    return out


def _log(p: float, clamp: float = 1e-8) -> float:
    return math.log(max(p, clamp))


def part_nll_loop(pred: np.ndarray, s: np.ndarray) -> float:
    bsz, d, h, w = s.shape
    alpha = balance_loop(s)
    total = 0.0
    for n in range(bsz):
        for y in range(h):
            for x in range(w):
                for k in range(d):
                    total += alpha[n, k] * s[n, k, y, x] * _log(pred[n, k, y, x])
    return -total / (bsz * h * w)


def dseg_loop(pred_real: np.ndarray, s: np.ndarray, pred_fake: np.ndarray) -> float:
    bsz, d, h, w = s.shape
    fake = 0.0
    for n in range(bsz):
        for y in range(h):
            for x in range(w):
                fake += _log(pred_fake[n, d, y, x])
    return part_nll_loop(pred_real, s) - fake / (bsz * h * w)


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def bce_loop(real: np.ndarray, fake: np.ndarray) -> float:
    r = -sum(math.log(_sigmoid(float(z))) for z in real) / len(real)
    f = -sum(math.log(1.0 - _sigmoid(float(z))) for z in fake) / len(fake)
    return r + f


def bce_generator_loop(fake: np.ndarray) -> float:
    return -sum(math.log(_sigmoid(float(z))) for z in fake) / len(fake)


# --- metrics ---------------------------------------------------------------------


def covariance_two_pass(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    mu = [sum(x[i, j] for i in range(n)) / n for j in range(d)]
    out = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            out[a, b] = sum((x[i, a] - mu[a]) * (x[i, b] - mu[b]) for i in range(n)) / (n - 1)
    return out


def feature_l1_loop(fa: list, fb: list, weights) -> float:
    total = 0.0
    for w, x, y in zip(weights, fa, fb):
        xa, ya = x.detach().double().numpy().ravel(), y.detach().double().numpy().ravel()
        total += w * sum(abs(p - q) for p, q in zip(xa, ya)) / xa.size
    return total


def lpips_loop(fa: list, fb: list, eps: float = 1e-10) -> np.ndarray:
    bsz = fa[0].shape[0]
    out = np.zeros(bsz)
    for x, y in zip(fa, fb):
        x = x.detach().double().numpy()
        y = y.detach().double().numpy()
        _, c, h, w = x.shape
        for n in range(bsz):
            acc = 0.0
            for yy in range(h):
                for xx in range(w):
                    p, q = x[n, :, yy, xx], y[n, :, yy, xx]
                    p = p / (math.sqrt(float(p @ p)) + eps)
                    q = q / (math.sqrt(float(q @ q)) + eps)
                    acc += sum((p[k] - q[k]) ** 2 for k in range(c))
            out[n] += acc / (h * w)
    return out


# --- finite differences ----------------------------------------------------------


def sample_parameter_entries(params: list[torch.Tensor], count: int, rng: np.random.Generator):
    """``count`` distinct ``(tensor_index, flat_index)`` pairs spread over ``params``."""
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for g in sorted(picks):
        t = int(np.searchsorted(offsets, g, side="right") - 1)
        out.append((t, int(g - offsets[t])))
    return out


def finite_difference_check(loss_fn, params: list[torch.Tensor], count: int = 20, step: float = 1e-6,
                            seed: int = 0, floor: float = 1e-9):
    """Compare autograd against central differences on sampled parameter entries.

    Returns a list of ``(analytic, numeric, relative_error)``; the relative
    error uses ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]
    rows = []
    for t, idx in sample_parameter_entries(params, count, np.random.default_rng(seed)):
        p = params[t]
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + step
            up = float(loss_fn())
            flat[idx] = orig - step
            down = float(loss_fn())
            flat[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(grads[t].reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        rows.append((analytic, numeric, rel))
    return rows
