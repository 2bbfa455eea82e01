"""Procedural toy try-on data with exact ground truth.

Each sample is a stick mannequin wearing a patterned sleeveless top. The
catalog garment is the same pattern rendered flat on a white background,
so garment masks, clothing masks and segmentations are all known exactly.

On-disk layout (all rasters are 8-bit PNG)::

    <root>/toyspec.json
    <root>/<split>/index.txt                 <id> <garment_id> <pose params...> <pattern>
    <root>/<split>/person/<id>.png           RGB
    <root>/<split>/garment/<id>.png          RGB
    <root>/<split>/seg/<id>.png              L, body-part label per pixel (0..24)
    <root>/<split>/masks/<id>.png            RGB, R = clothing mask, G = garment mask, B = 0

Mask pixels are stored as 0/255.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

__all__ = [
    "N_PARTS",
    "BACKGROUND", "TORSO", "HEAD", "NECK", "UPPER_ARM_L", "UPPER_ARM_R", "FOREARM_L", "FOREARM_R", "LEG_L", "LEG_R",
    "PATCH_PARTS",
    "PATTERNS",
    "ToySpec",
    "TryOnSample",
    "DataError",
    "render_sample",
    "generate_toy_dataset",
    "load_dataset",
    "toy_split",
    "TryOnDataset",
    "derive_masks",
    "garment_mask_from_image",
    "iterate_batches",
    "collate",
    "derangement",
]

N_PARTS = 25
BACKGROUND, TORSO, HEAD, NECK = 0, 1, 2, 3
UPPER_ARM_L, UPPER_ARM_R, FOREARM_L, FOREARM_R = 4, 5, 6, 7
LEG_L, LEG_R = 8, 9
PATCH_PARTS = (NECK, UPPER_ARM_L, UPPER_ARM_R, FOREARM_L, FOREARM_R)
PATTERNS = ("solid", "stripes", "dots", "glyph")
SPLITS = ("train", "test")

# fraction of image height covered by the garment, both flat and worn
GARMENT_HEIGHT = 0.36
GARMENT_TOP = 0.30
GARMENT_HALF_WIDTH = 0.24

_PALETTE = np.array([
    [0.80, 0.15, 0.15], [0.15, 0.45, 0.80], [0.10, 0.60, 0.25], [0.85, 0.65, 0.10],
    [0.45, 0.20, 0.60], [0.10, 0.10, 0.10], [0.80, 0.40, 0.60], [0.20, 0.65, 0.65],
])
_SKIN = np.array([[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.65, 0.45, 0.32], [0.45, 0.30, 0.22]])


class DataError(RuntimeError):
    """Missing or corrupt dataset files."""


@dataclasses.dataclass
class ToySpec:
    height: int = 64
    width: int = 48
    n_train: int = 200
    n_test: int = 50
    patterns: tuple[str, ...] = PATTERNS
    center_range: tuple[float, float] = (0.40, 0.60)
    top_range: tuple[float, float] = (0.22, 0.36)
    half_width_range: tuple[float, float] = (0.15, 0.26)
    upper_arm_angle: tuple[float, float] = (10.0, 60.0)
    forearm_angle: tuple[float, float] = (-30.0, 60.0)
    seed: int = 0

    def __post_init__(self):
        self.patterns = tuple(self.patterns)
        if self.height < 32 or self.width < 24 or self.height % 8 or self.width % 8:
            raise ValueError(
                f"toy resolution {self.height}x{self.width} must be at least 32x24 and divisible by 8")
        unknown = set(self.patterns) - set(PATTERNS)
        if unknown or not self.patterns:
            raise ValueError(f"unknown garment patterns {sorted(unknown)}; choose from {PATTERNS}")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sample counts must be non-negative")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown ToySpec fields: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclasses.dataclass
class TryOnSample:
    """One person with the garment they wear. Tensors are CHW float32."""

    person: torch.Tensor      # (3, H, W) in [-1, 1]
    garment: torch.Tensor     # (3, H, W) in [-1, 1]
    seg: torch.Tensor         # (25, H, W) one-hot
    clothing_mask: torch.Tensor  # (1, H, W) {0, 1}
    garment_mask: torch.Tensor   # (1, H, W) {0, 1}
    id: str


# --- rendering -----------------------------------------------------------


def _pattern(kind: str, u: np.ndarray, v: np.ndarray, colors: np.ndarray, period: int, h: int) -> np.ndarray:
    """RGB values of a garment pattern at garment coords.

    ``u`` is the horizontal fraction across the garment, ``v`` the row offset
    in pixels from the garment top.
    """
    a, b = colors
    if kind == "solid":
        sel = np.zeros(u.shape, bool)
    elif kind == "stripes":
        sel = (v // (period // 2)) % 2 == 1
    elif kind == "dots":
        gh = GARMENT_HEIGHT * h
        cu = (u * 4) % 1 - 0.5
        cv = (v / gh * 5) % 1 - 0.5
        sel = cu ** 2 + cv ** 2 < 0.09
    elif kind == "glyph":
        gh = GARMENT_HEIGHT * h
        vv = v / gh
        bar = (np.abs(vv - 0.3) < 0.08) & (np.abs(u - 0.5) < 0.3)
        stem = (np.abs(u - 0.5) < 0.08) & (vv > 0.3) & (vv < 0.8)
        sel = bar | stem
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    return np.where(sel[..., None], b, a)


def _capsule(px, py, x0, y0, x1, y1, r):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy + 1e-12), 0, 1)
    return (px - x0 - t * dx) ** 2 + (py - y0 - t * dy) ** 2 <= r * r


def _sample_pose(rng: np.random.Generator, spec: ToySpec) -> dict:
    return {
        "cx": rng.uniform(*spec.center_range),
        "top": rng.uniform(*spec.top_range),
        "hw_top": rng.uniform(*spec.half_width_range),
        "hw_bottom": rng.uniform(*spec.half_width_range),
        "arm_ul": rng.uniform(*spec.upper_arm_angle),
        "arm_ur": rng.uniform(*spec.upper_arm_angle),
        "arm_fl": rng.uniform(*spec.forearm_angle),
        "arm_fr": rng.uniform(*spec.forearm_angle),
        "pattern": spec.patterns[rng.integers(len(spec.patterns))],
        "colors": _PALETTE[rng.choice(len(_PALETTE), 2, replace=False)],
        "skin": _SKIN[rng.integers(len(_SKIN))],
        "background": rng.uniform(0.75, 0.92, size=3),
        "pants": rng.uniform(0.15, 0.35, size=3),
    }


def render_sample(pose: dict, h: int, w: int) -> dict[str, np.ndarray]:
    """Rasterize one pose. Returns uint8 arrays: person, garment, seg, m_c, m_t."""
    rows, cols = np.mgrid[0:h, 0:w]
    py = rows + 0.5
    px = cols + 0.5
    period = max(4, 2 * round(3 * h / 64))
    gh = int(round(GARMENT_HEIGHT * h))

    label = np.zeros((h, w), np.uint8)
    person = np.broadcast_to(pose["background"], (h, w, 3)).copy()

    top = int(round(pose["top"] * h))
    cx = pose["cx"] * w
    v = rows - top
    frac = np.clip(v / max(gh - 1, 1), 0, 1)
    hw = (pose["hw_top"] + (pose["hw_bottom"] - pose["hw_top"]) * frac) * w
    u = (px - (cx - hw)) / (2 * hw)
    torso = (v >= 0) & (v < gh) & (u >= 0) & (u < 1)

    leg_top = top + gh
    for part, side in ((LEG_L, -1), (LEG_R, 1)):
        leg = (rows >= leg_top - 1) & (np.abs(px - (cx + side * 0.10 * w)) < 0.07 * w)
        label[leg] = part
        person[leg] = pose["pants"]

    label[torso] = TORSO
    person[torso] = _pattern(pose["pattern"], u, v, pose["colors"], period, h)[torso]

    neck = (rows < top) & (rows >= top - 0.05 * h) & (np.abs(px - cx) < 0.05 * w)
    head = (px - cx) ** 2 + (py - (top - 0.11 * h)) ** 2 <= (0.075 * h) ** 2
    for part, m in ((NECK, neck), (HEAD, head)):
        label[m] = part
        person[m] = pose["skin"]

    length_u, length_f, radius = 0.17 * h, 0.15 * h, 0.035 * h
    for side, (pu, pf) in ((-1, (UPPER_ARM_L, FOREARM_L)), (1, (UPPER_ARM_R, FOREARM_R))):
        key = "l" if side < 0 else "r"
        sx = cx + side * (pose["hw_top"] * w - radius)
        sy = top + radius
        a = math.radians(pose[f"arm_u{key}"])
        ex, ey = sx + side * length_u * math.sin(a), sy + length_u * math.cos(a)
        b = a + math.radians(pose[f"arm_f{key}"])
        hx, hy = ex + side * length_f * math.sin(b), ey + length_f * math.cos(b)
        upper = _capsule(px, py, sx, sy, ex, ey, radius)
        fore = _capsule(px, py, ex, ey, hx, hy, radius) & ~upper
        for part, m in ((pu, upper), (pf, fore)):
            label[m] = part
            person[m] = pose["skin"]

    m_c = label == TORSO

    g_top = int(round(GARMENT_TOP * h))
    g_left = (0.5 - GARMENT_HALF_WIDTH) * w
    gv = rows - g_top
    gu = (px - g_left) / (2 * GARMENT_HALF_WIDTH * w)
    m_t = (gv >= 0) & (gv < gh) & (gu >= 0) & (gu < 1)
    garment = np.ones((h, w, 3))
    garment[m_t] = _pattern(pose["pattern"], gu, gv, pose["colors"], period, h)[m_t]

    to_u8 = lambda x: np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)
    return {
        "person": to_u8(person),
        "garment": to_u8(garment),
        "seg": label,
        "m_c": m_c.astype(np.uint8),
        "m_t": m_t.astype(np.uint8),
    }


def _pose_line(sid: str, pose: dict) -> str:
    nums = " ".join(f"{pose[k]:.6f}" for k in ("cx", "top", "hw_top", "hw_bottom", "arm_ul", "arm_ur", "arm_fl", "arm_fr"))
    return f"{sid} {sid} {nums} {pose['pattern']}"


def _render_split(spec: ToySpec, split: str):
    split_code = SPLITS.index(split)
    n = spec.n_train if split == "train" else spec.n_test
    for i in range(n):
        sid = f"{split}_{i:05d}"
        pose = _sample_pose(np.random.default_rng([spec.seed, split_code, i]), spec)
        yield sid, pose, render_sample(pose, spec.height, spec.width)


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def generate_toy_dataset(spec: ToySpec, root: str | Path) -> Path:
    """Render the train and test splits of ``spec`` under ``root``.

    Every sample draws from its own generator seeded by ``(seed, split, index)``,
    so output bytes depend only on the spec.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "toyspec.json").write_text(spec.to_json() + "\n")
    for split in SPLITS:
        base = root / split
        for sub in ("person", "garment", "seg", "masks"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        lines = []
        for sid, pose, r in _render_split(spec, split):
            _save_png(r["person"], base / "person" / f"{sid}.png")
            _save_png(r["garment"], base / "garment" / f"{sid}.png")
            _save_png(r["seg"], base / "seg" / f"{sid}.png")
            masks = np.stack([r["m_c"] * 255, r["m_t"] * 255, np.zeros_like(r["m_c"])], axis=-1)
            _save_png(masks, base / "masks" / f"{sid}.png")
            lines.append(_pose_line(sid, pose))
        (base / "index.txt").write_text("".join(line + "\n" for line in lines))
    return root


# --- loading -------------------------------------------------------------


def _to_image(u8: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(u8.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def _one_hot(label: np.ndarray) -> torch.Tensor:
    if label.max(initial=0) >= N_PARTS:
        raise DataError(f"segmentation label {label.max()} out of range")
    lab = torch.from_numpy(label.astype(np.int64))
    return torch.nn.functional.one_hot(lab, N_PARTS).permute(2, 0, 1).float().contiguous()


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DataError(f"{path}: expected PNG mode {mode}, found {im.mode}")
            return np.asarray(im).copy()
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def sample_from_arrays(r: dict[str, np.ndarray], sid: str) -> TryOnSample:
    return TryOnSample(
        person=_to_image(r["person"]),
        garment=_to_image(r["garment"]),
        seg=_one_hot(r["seg"]),
        clothing_mask=torch.from_numpy(r["m_c"].astype(np.float32))[None],
        garment_mask=torch.from_numpy(r["m_t"].astype(np.float32))[None],
        id=sid,
    )


def read_sample(base: Path, sid: str) -> TryOnSample:
    masks = _read_png(base / "masks" / f"{sid}.png", "RGB")
    arrays = {
        "person": _read_png(base / "person" / f"{sid}.png", "RGB"),
        "garment": _read_png(base / "garment" / f"{sid}.png", "RGB"),
        "seg": _read_png(base / "seg" / f"{sid}.png", "L"),
        "m_c": (masks[..., 0] > 127).astype(np.uint8),
        "m_t": (masks[..., 1] > 127).astype(np.uint8),
    }
    return sample_from_arrays(arrays, sid)


def derangement(n: int, seed: int) -> np.ndarray:
    """Random permutation without fixed points (Sattolo's single-cycle shuffle)."""
    if n < 2:
        raise ValueError(f"no derangement exists for {n} element(s)")
    rng = np.random.default_rng(seed)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = rng.integers(i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


class TryOnDataset:
    """Samples of one split, paired with a target garment per person.

    ``dataset[i]`` is ``(sample, target)`` where ``target`` is the
    :class:`TryOnSample` whose garment is to be worn.
    """

    def __init__(self, samples: Sequence[TryOnSample], pairing: str = "paired", seed: int = 0):
        if pairing not in ("paired", "shuffled"):
            raise ValueError(f"unknown pairing {pairing!r}; expected 'paired' or 'shuffled'")
        self.samples = list(samples)
        self.pairing = pairing
        if pairing == "paired":
            self.partner = np.arange(len(self.samples))
        else:
            self.partner = derangement(len(self.samples), seed)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> tuple[TryOnSample, TryOnSample]:
        return self.samples[i], self.samples[self.partner[i]]

    def __iter__(self) -> Iterator[tuple[TryOnSample, TryOnSample]]:
        return (self[i] for i in range(len(self)))

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.samples[0].person.shape[1:])


def load_dataset(path: str | Path, split: str, pairing: str = "paired", seed: int = 0) -> TryOnDataset:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    base = Path(path) / split
    index = base / "index.txt"
    if not index.is_file():
        raise DataError(f"missing index file {index}")
    samples = []
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{index}:{lineno}: malformed index line")
        samples.append(read_sample(base, parts[0]))
    return TryOnDataset(samples, pairing, seed)


def garment_mask_from_image(garment: torch.Tensor, threshold: float = 0.06) -> torch.Tensor:
    """Garment pixels of a catalog image on white background, ``(.., 1, H, W)``."""
    return ((1.0 - garment).amax(dim=-3, keepdim=True) > threshold).to(garment.dtype)


def toy_split(spec: ToySpec, split: str, pairing: str = "paired", seed: int = 0) -> TryOnDataset:
    """Render a split in memory; identical tensors to a write/load round trip."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    samples = [sample_from_arrays(r, sid) for sid, _, r in _render_split(spec, split)]
    return TryOnDataset(samples, pairing, seed)


def derive_masks(sample: TryOnSample, body_channels: Sequence[int] = (TORSO,)) -> tuple[torch.Tensor, ...]:
    """``(m_b, m_c, m_t)`` for a sample; ``m_b`` is the union of ``body_channels``."""
    m_b = sample.seg[list(body_channels)].amax(dim=0, keepdim=True)
    if not m_b.any():
        raise ValueError(f"sample {sample.id}: body-area channels {list(body_channels)} are empty")
    return m_b, sample.clothing_mask, sample.garment_mask


def collate(pairs: Sequence[tuple[TryOnSample, TryOnSample]], body_channels: Sequence[int] = (TORSO,)) -> dict:
    """Stack ``(sample, target)`` pairs into a batch dict of NCHW tensors."""
    people = [p for p, _ in pairs]
    targets = [t for _, t in pairs]
    seg = torch.stack([p.seg for p in people])
    return {
        "person": torch.stack([p.person for p in people]),
        "seg": seg,
        "m_c": torch.stack([p.clothing_mask for p in people]),
        "m_b": seg[:, list(body_channels)].amax(dim=1, keepdim=True),
        "own_garment": torch.stack([p.garment for p in people]),
        "own_garment_mask": torch.stack([p.garment_mask for p in people]),
        "garment": torch.stack([t.garment for t in targets]),
        "garment_mask": torch.stack([t.garment_mask for t in targets]),
        "ids": [p.id for p in people],
        "garment_ids": [t.id for t in targets],
    }


def iterate_batches(dataset: TryOnDataset, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0,
                    body_channels: Sequence[int] = (TORSO,), dtype=torch.float32) -> Iterator[dict]:
    """Yield collated batches; order depends only on ``(seed, epoch)``."""
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        batch = collate([dataset[int(i)] for i in order[start:start + batch_size]], body_channels)
        yield {k: v.to(dtype) if torch.is_tensor(v) else v for k, v in batch.items()}
