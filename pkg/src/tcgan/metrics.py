"""FID, KID and mask-restricted RMSE.

FID and KID operate on feature matrices; the network that produces those
features is pluggable. The built-in default is a fixed random-projection
convolutional embedding. It is cheap and deterministic, but its numbers are
not comparable with scores computed on a pretrained Inception embedding.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from skimage.color import rgb2lab

REGIONS = ("S", "N", "A")
SPACES = ("rgb", "lab")


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (n, d)
    extractor_id: str = "unknown"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be (n, d), got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", f)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def _as_features(a) -> np.ndarray:
    return a.features if isinstance(a, FeatureSet) else np.asarray(a, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("feature sets must be 2-D (n, d) matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")


def _stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.shape[0] < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {a.shape[0]}")
    mu = a.mean(axis=0)
    sigma = np.cov(a, rowvar=False, ddof=1)
    return mu, np.atleast_2d(sigma)


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """Frechet distance between two Gaussians given their moments.

    ``Tr((sigma_a sigma_b)^(1/2))`` is the sum of square roots of the
    eigenvalues of ``sigma_a @ sigma_b``; those are real and non-negative for
    PSD inputs, so rounding-level negatives are clipped to zero.
    """
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    ev = np.linalg.eigvals(sigma_a @ sigma_b)
    ev = ev.real
    scale = max(float(np.abs(ev).max(initial=0.0)), 1e-300)
    if ev.min(initial=0.0) < -1e-8 * scale:
        warnings.warn(f"covariance product has a negative eigenvalue {ev.min():.3g}; clipping",
                      RuntimeWarning, stacklevel=2)
    tr_sqrt = np.sqrt(np.clip(ev, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(a, b) -> float:
    """FID between two feature sets (sample covariances use ``1/(n-1)``)."""
    fa, fb = _as_features(a), _as_features(b)
    _check_pair(fa, fb)
    mu_a, s_a = _stats(fa)
    mu_b, s_b = _stats(fb)
    d = fa.shape[1]
    if d > min(fa.shape[0], fb.shape[0]):
        s_a = s_a + 1e-10 * np.eye(d)
        s_b = s_b + 1e-10 * np.eye(d)
    return frechet_distance(mu_a, s_a, mu_b, s_b)


def polynomial_kernel(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = u.shape[1]
    return (u @ v.T / d + 1.0) ** 3


def mmd2_unbiased(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least 2 samples per set")
    k_aa = polynomial_kernel(a, a)
    k_bb = polynomial_kernel(b, b)
    k_ab = polynomial_kernel(a, b)
    term_aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_aa + term_bb - 2.0 * k_ab.mean())


def kid(a, b, subset_size: int | None = None, n_subsets: int = 10,
        rng: np.random.Generator | int | None = 0) -> tuple[float, float]:
    """KID as ``(mean, std)`` of the unbiased MMD^2 over random subsets.

    Subsets are drawn without replacement and kept in index order, so a
    subset covering the whole set reproduces the full-set estimate exactly.
    The std is the population std (``ddof=0``) over subsets.
    """
    fa, fb = _as_features(a), _as_features(b)
    _check_pair(fa, fb)
    if subset_size is None:
        subset_size = min(100, fa.shape[0], fb.shape[0])
    if not 2 <= subset_size <= min(fa.shape[0], fb.shape[0]):
        raise ValueError(f"subset_size {subset_size} must be in [2, min(n_a, n_b)]")
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    vals = []
    for _ in range(n_subsets):
        ia = np.sort(rng.choice(fa.shape[0], subset_size, replace=False))
        ib = np.sort(rng.choice(fb.shape[0], subset_size, replace=False))
        vals.append(mmd2_unbiased(fa[ia], fb[ib]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std())


# --------------------------------------------------------------------------
# RMSE


def to_display(img: torch.Tensor, space: str) -> np.ndarray:
    """``(3, H, W)`` image in [-1, 1] -> ``(H, W, 3)`` float64 array.

    ``rgb`` gives values on the 0-255 scale; ``lab`` gives CIELAB (D65) with
    L in [0, 100] and a/b in their native ranges.
    """
    if space not in SPACES:
        raise ValueError(f"unknown colour space {space!r}; expected one of {SPACES}")
    arr = (img.detach().to(torch.float64).cpu().permute(1, 2, 0).numpy() + 1.0) * 127.5
    if space == "rgb":
        return arr
    return rgb2lab(np.clip(arr / 255.0, 0.0, 1.0), illuminant="D65")


def region_selector(mask: torch.Tensor, region: str) -> np.ndarray:
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}")
    m = mask.detach().cpu().numpy()
    if m.ndim == 3:
        m = m[0]
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("RMSE mask must be binary (0/1)")
    if region == "S":
        return m == 1
    if region == "N":
        return m == 0
    return np.ones_like(m, dtype=bool)


def masked_rmse(pred: torch.Tensor, ref: torch.Tensor, mask: torch.Tensor,
                region: str = "A", space: str = "lab") -> float:
    """RMSE over the pixels of ``region`` (S: mask==1, N: mask==0, A: all).

    The squared error is averaged over the selected pixels and all three
    channels before the square root.
    """
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(ref.shape)}")
    if mask.shape[-2:] != pred.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match image {tuple(pred.shape)}")
    sel = region_selector(mask, region)
    if not sel.any():
        raise ValueError(f"region {region} selects no pixels")
    diff = to_display(pred, space) - to_display(ref, space)
    return float(np.sqrt(np.mean(diff[sel] ** 2)))


def rmse_n_i(pred: torch.Tensor, input_shadow: torch.Tensor, mask: torch.Tensor,
             space: str = "lab") -> float:
    """Non-shadow RMSE against the *input* shadow image (how much was left alone)."""
    return masked_rmse(pred, input_shadow, mask, "N", space)


# --------------------------------------------------------------------------
# feature extraction


class FeatureExtractor(Protocol):
    extractor_id: str

    def __call__(self, images: torch.Tensor) -> np.ndarray:  # (N, 3, H, W) -> (N, d)
        ...


class RandomConvEmbedding(nn.Module):
    """Fixed random convolutional embedding used as the default FID/KID extractor.

    Images are resized to 64x64, passed through three random stride-2
    convolutions with ReLU, and described by the per-channel mean and standard
    deviation of the last layer (128 numbers).
    """

    VERSION = 1

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64), size: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, c_in = [], 3
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1).to(torch.float64)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64)
                                  * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.copy_(torch.randn(c_out, generator=gen, dtype=torch.float64) * 0.1)
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs).requires_grad_(False)
        self.size = size
        self.extractor_id = f"randconv-v{self.VERSION}-seed{seed}-w{'x'.join(map(str, widths))}-s{size}"

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> np.ndarray:
        x = images.to(torch.float64)
        if tuple(x.shape[-2:]) != (self.size, self.size):
            x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False,
                              antialias=True)
        for conv in self.convs:
            x = F.relu(conv(x))
        return torch.cat([x.mean(dim=(2, 3)), x.std(dim=(2, 3))], 1).numpy()


def extract_features(images, extractor: FeatureExtractor | None = None,
                     batch_size: int = 64) -> FeatureSet:
    """Embed a sequence of ``(3, H, W)`` images (or an ``(N, 3, H, W)`` batch)."""
    extractor = extractor or RandomConvEmbedding()
    if isinstance(images, torch.Tensor) and images.dim() == 4:
        images = list(images)
    images = list(images)
    if not images:
        raise ValueError("cannot extract features from an empty image set")
    rows = []
    for start in range(0, len(images), batch_size):
        batch = torch.stack([t.to(torch.float32) for t in images[start:start + batch_size]])
        rows.append(np.asarray(extractor(batch), dtype=np.float64))
    return FeatureSet(np.concatenate(rows, 0), extractor.extractor_id)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    extractor_id: str | None = None
    color_space: str | None = None
    fid: float | None = None
    kid_mean: float | None = None
    kid_std: float | None = None
    kid_subset_size: int | None = None
    kid_subsets: int | None = None
    rmse: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
