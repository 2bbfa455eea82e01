"""Small helpers shared by the demo scripts."""

import os
import sys
from pathlib import Path

import torch
from PIL import Image

torch.set_num_threads(1)


def out_dir(name: str) -> Path:
    """``demos/out/<name>``, or the directory given as the first argument."""
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(os.environ.get("DEMO_OUT", Path(__file__).parent / "out"))
    path = root / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_row(images, path: Path) -> None:
    """Write a list of ``(3, H, W)`` tensors in [-1, 1] side by side."""
    row = torch.cat([t.detach().float().clamp(-1, 1) for t in images], dim=-1)
    arr = ((row + 1) * 127.5).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path)
