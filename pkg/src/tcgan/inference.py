"""Shadow removal with classifier-based branch selection, and encoder feature dumps."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .networks import GeneratorPair, ResidualGenerator, SelectionClassifier
from .tensors import check_image, compose_shadow_free


@dataclass
class RemovalResult:
    selected: torch.Tensor
    selected_branch: int
    prob1: float
    prob2: float
    y1: torch.Tensor
    y2: torch.Tensor


def select_branch(prob1: float, prob2: float) -> int:
    """Branch with the higher shadow-free probability; ties go to branch 1."""
    return 1 if prob1 >= prob2 else 2


@torch.no_grad()
def remove_shadow_fixed(g: ResidualGenerator, x: torch.Tensor) -> torch.Tensor:
    """Single-generator removal: ``clamp(x + g(x))`` for one ``(3, H, W)`` image."""
    check_image(x)
    return compose_shadow_free(x, g(x[None])[0])


@torch.no_grad()
def remove_shadow(gp: GeneratorPair, msm: SelectionClassifier, x: torch.Tensor) -> RemovalResult:
    """Run both generators and keep the output the classifier finds more shadow-free."""
    y1 = remove_shadow_fixed(gp.g1, x)
    y2 = remove_shadow_fixed(gp.g2, x)
    p1, p2 = (float(p) for p in msm(torch.stack([y1, y2])))
    branch = select_branch(p1, p2)
    return RemovalResult(y1 if branch == 1 else y2, branch, p1, p2, y1, y2)


# --------------------------------------------------------------------------
# feature maps

MID_GRAY = 128


def heatmap_tiles(features: torch.Tensor, k: int) -> np.ndarray:
    """First ``k`` channels of a ``(C, h, w)`` map as ``(k, h, w, 3)`` uint8 heatmaps.

    Each channel is min-max scaled on its own and coloured with viridis; a
    constant channel becomes a uniform mid-gray tile.
    """
    if not 1 <= k <= features.shape[0]:
        raise ValueError(f"k must be in 1..{features.shape[0]}, got {k}")
    cmap = colormaps["viridis"]
    tiles = []
    for ch in features[:k].detach().to(torch.float64).cpu().numpy():
        lo, hi = ch.min(), ch.max()
        if hi == lo:
            tiles.append(np.full(ch.shape + (3,), MID_GRAY, dtype=np.uint8))
            continue
        levels = np.floor((ch - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
        tiles.append((cmap(levels)[..., :3] * 255.0 + 0.5).astype(np.uint8))
    return np.stack(tiles)


@torch.no_grad()
def dump_ste_features(gp: GeneratorPair, x: torch.Tensor, k: int, out_dir: str | os.PathLike,
                      stem: str = "features") -> list[Path]:
    """Write the first ``k`` encoder channels of both generators for image ``x``.

    For each encoder ``i`` this writes ``{stem}_ste{i}.png`` (the heatmaps side
    by side in one row) and ``{stem}_ste{i}.npy`` (the raw ``(k, h, w)`` values).
    """
    check_image(x)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, g in enumerate((gp.g1, gp.g2), start=1):
        feats = g.encode(x[None])[0]
        tiles = heatmap_tiles(feats, k)
        grid = np.concatenate(list(tiles), axis=1)
        png = out / f"{stem}_ste{i}.png"
        npy = out / f"{stem}_ste{i}.npy"
        Image.fromarray(grid, mode="RGB").save(png)
        np.save(npy, feats[:k].cpu().numpy())
        written += [png, npy]
    return written


def split_grid(grid: np.ndarray, k: int) -> list[np.ndarray]:
    """Inverse of the row layout used by :func:`dump_ste_features`."""
    return np.split(grid, k, axis=1)
