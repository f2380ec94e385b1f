"""Unpaired datasets, augmentation, batch sampling and a synthetic shadow corpus."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .tensors import from_uint8, load_image, save_mask

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DataError(ValueError):
    """Dataset layout or content does not satisfy a precondition."""


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --------------------------------------------------------------------------
# augmentation


def resize(img: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Bicubic resize of a ``(3, H, W)`` image, clamped back into [-1, 1]."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(img.shape[-2:]) == tuple(size):
        return img.clone()
    out = F.interpolate(img[None], size=size, mode="bicubic", align_corners=False)[0]
    return out.clamp(-1.0, 1.0)


def augment(
    img: torch.Tensor,
    rng: np.random.Generator,
    load_size: int = 72,
    crop_size: int = 64,
    flip: bool = False,
) -> torch.Tensor:
    """Resize to ``load_size`` then take a uniformly random ``crop_size`` crop."""
    if crop_size > load_size:
        raise ValueError(f"crop size {crop_size} exceeds pre-crop size {load_size}")
    img = resize(img, load_size)
    top = int(rng.integers(0, load_size - crop_size + 1))
    left = int(rng.integers(0, load_size - crop_size + 1))
    out = img[:, top:top + crop_size, left:left + crop_size]
    if flip and rng.random() < 0.5:
        out = out.flip(-1)
    return out.contiguous()


# --------------------------------------------------------------------------
# datasets


@dataclass
class TrainBatch:
    x: torch.Tensor   # (B, 3, H, W) shadow images
    y1: torch.Tensor  # real shadow-free images shown to the first discriminator
    y2: torch.Tensor  # ... and to the second
    x_index: list[int] = field(default_factory=list)
    y1_index: list[int] = field(default_factory=list)
    y2_index: list[int] = field(default_factory=list)


class UnpairedDataset:
    """Two unpaired image lists: shadow images and shadow-free images.

    Images are decoded lazily and cached in memory.
    """

    def __init__(self, shadow_paths, nonshadow_paths):
        self.shadow_paths = [Path(p) for p in shadow_paths]
        self.nonshadow_paths = [Path(p) for p in nonshadow_paths]
        if not self.shadow_paths:
            raise DataError("no shadow images")
        if not self.nonshadow_paths:
            raise DataError("no shadow-free images")
        shared = {p.resolve() for p in self.shadow_paths} & {p.resolve() for p in self.nonshadow_paths}
        if shared:
            raise DataError(f"{len(shared)} file(s) appear in both domains, e.g. {sorted(shared)[0]}")
        self._cache: dict[Path, torch.Tensor] = {}

    @classmethod
    def from_root(cls, root: str | os.PathLike) -> "UnpairedDataset":
        """Load ``root/shadow`` and ``root/nonshadow``."""
        root = Path(root)
        return cls(list_images(root / "shadow"), list_images(root / "nonshadow"))

    @classmethod
    def from_tensors(cls, shadow: list[torch.Tensor], nonshadow: list[torch.Tensor]) -> "UnpairedDataset":
        """In-memory dataset; synthetic paths only serve as cache keys."""
        ds = cls([Path(f"<mem>/shadow/{i}") for i in range(len(shadow))],
                 [Path(f"<mem>/nonshadow/{i}") for i in range(len(nonshadow))])
        for p, t in zip(ds.shadow_paths, shadow):
            ds._cache[p] = t
        for p, t in zip(ds.nonshadow_paths, nonshadow):
            ds._cache[p] = t
        return ds

    def _get(self, path: Path) -> torch.Tensor:
        if path not in self._cache:
            self._cache[path] = load_image(path)
        return self._cache[path]

    def shadow(self, i: int) -> torch.Tensor:
        return self._get(self.shadow_paths[i])

    def nonshadow(self, i: int) -> torch.Tensor:
        return self._get(self.nonshadow_paths[i])

    def __len__(self) -> int:
        return len(self.shadow_paths)


def next_batch(
    ds: UnpairedDataset,
    rng: np.random.Generator,
    batch_size: int = 1,
    load_size: int = 72,
    crop_size: int = 64,
    flip: bool = False,
) -> TrainBatch:
    """Draw one training batch.

    For each item a shadow image is drawn uniformly, and two *different*
    shadow-free images are drawn without replacement, one per discriminator.
    """
    n_y = len(ds.nonshadow_paths)
    if n_y < 2:
        raise DataError(
            "each step needs two distinct real shadow-free images (one per discriminator); "
            f"the dataset has {n_y}"
        )
    xs, y1s, y2s = [], [], []
    xi, y1i, y2i = [], [], []
    for _ in range(batch_size):
        i = int(rng.integers(len(ds.shadow_paths)))
        j, k = (int(v) for v in rng.choice(n_y, size=2, replace=False))
        xs.append(augment(ds.shadow(i), rng, load_size, crop_size, flip))
        y1s.append(augment(ds.nonshadow(j), rng, load_size, crop_size, flip))
        y2s.append(augment(ds.nonshadow(k), rng, load_size, crop_size, flip))
        xi.append(i)
        y1i.append(j)
        y2i.append(k)
    return TrainBatch(torch.stack(xs), torch.stack(y1s), torch.stack(y2s), xi, y1i, y2i)


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    n_shadow: int = 200
    n_nonshadow: int = 200
    image_size: int = 64
    attenuation_lo: float = 0.4
    attenuation_hi: float = 0.7
    coverage_lo: float = 0.10  # shadow area as a fraction of the image
    coverage_hi: float = 0.30
    ellipse_prob: float = 0.5  # otherwise a random star-shaped polygon
    edge_blur_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.n_shadow < 0 or self.n_nonshadow < 0:
            raise ValueError("image counts must be non-negative")
        if self.image_size <= 0 or self.image_size % 8:
            raise ValueError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if not 0 < self.attenuation_lo <= self.attenuation_hi <= 1:
            raise ValueError("need 0 < attenuation_lo <= attenuation_hi <= 1")
        if not 0 < self.coverage_lo <= self.coverage_hi < 1:
            raise ValueError("need 0 < coverage_lo <= coverage_hi < 1")
        if not 0 <= self.ellipse_prob <= 1:
            raise ValueError("ellipse_prob must be in [0, 1]")
        if self.edge_blur_sigma < 0:
            raise ValueError("edge_blur_sigma must be non-negative")


@dataclass
class ShadowTriplet:
    shadow: np.ndarray  # (H, W, 3) uint8
    gt: np.ndarray      # shadow-free base scene, (H, W, 3) uint8
    mask: np.ndarray    # binary (H, W) float64: every pixel the shadow touched
    soft_mask: np.ndarray  # blurred occluder (H, W) float64 in [0, 1]
    attenuation: float


@dataclass
class SynthCorpus:
    spec: SynthSpec
    triplets: list[ShadowTriplet]
    nonshadow: list[np.ndarray]

    @property
    def shadow(self) -> list[np.ndarray]:
        return [t.shadow for t in self.triplets]

    def shadow_tensors(self) -> list[torch.Tensor]:
        return [from_uint8(t.shadow) for t in self.triplets]

    def nonshadow_tensors(self) -> list[torch.Tensor]:
        return [from_uint8(a) for a in self.nonshadow]

    def write(self, root: str | os.PathLike) -> Path:
        """Write ``shadow/``, ``nonshadow/``, ``gt/``, ``mask/`` and ``manifest.jsonl``."""
        root = Path(root)
        for sub in ("shadow", "nonshadow", "gt", "mask"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        lines = []
        for i, t in enumerate(self.triplets):
            name = f"s{i:05d}.png"
            Image.fromarray(t.shadow).save(root / "shadow" / name)
            Image.fromarray(t.gt).save(root / "gt" / name)
            save_mask(t.mask, root / "mask" / name)
            lines.append(json.dumps({
                "shadow": f"shadow/{name}", "gt": f"gt/{name}",
                "mask": f"mask/{name}", "attenuation": t.attenuation,
            }))
        for i, a in enumerate(self.nonshadow):
            Image.fromarray(a).save(root / "nonshadow" / f"n{i:05d}.png")
        (root / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
        return root


def _quantize(v: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))


def _shape_outline(rng: np.random.Generator, size: int, area_frac: float, ellipse: bool) -> np.ndarray:
    """Vertices of a random ellipse or star-shaped polygon with a target area."""
    if ellipse:
        angles = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        aspect = rng.uniform(0.6, 1.0 / 0.6)
        radii = np.stack([np.sqrt(aspect) * np.cos(angles), np.sin(angles) / np.sqrt(aspect)], 1)
    else:
        n = int(rng.integers(5, 10))
        # jittered even spacing keeps the polygon simple and around the origin
        angles = (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * (2 * np.pi / n)
        r = rng.uniform(0.6, 1.0, n)
        radii = np.stack([r * np.cos(angles), r * np.sin(angles)], 1)
    theta = rng.uniform(0, np.pi)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pts = radii @ rot.T
    pts *= math.sqrt(area_frac * size * size / _polygon_area(pts))
    # keep the shape inside the frame when it fits, so coverage matches the draw
    lo, hi = pts.min(0), pts.max(0)
    cmin = np.minimum(-lo, size / 2)
    cmax = np.maximum(size - hi, size / 2)
    center = rng.uniform(cmin, cmax)
    return pts + center


def _rasterize(pts: np.ndarray, size: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon([tuple(p) for p in (pts - 0.5)], fill=1)
    return np.asarray(canvas, dtype=np.float64)


def sample_shadow_mask(rng: np.random.Generator, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(hard, soft)`` masks; the soft one is the blurred hard one."""
    frac = rng.uniform(spec.coverage_lo, spec.coverage_hi)
    hard = _rasterize(_shape_outline(rng, spec.image_size, frac, rng.random() < spec.ellipse_prob),
                      spec.image_size)
    soft = gaussian_filter(hard, spec.edge_blur_sigma) if spec.edge_blur_sigma > 0 else hard.copy()
    return hard, np.clip(soft, 0.0, 1.0)


def base_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural shadow-free scene in linear [0, 1]: a colour gradient plus textured shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1 = rng.uniform(0.35, 0.95, 3), rng.uniform(0.35, 0.95, 3)
    phi = rng.uniform(0, 2 * np.pi)
    t = np.cos(phi) * xx + np.sin(phi) * yy
    t = (t - t.min()) / (t.max() - t.min())
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(int(rng.integers(2, 6))):
        outline = _shape_outline(rng, size, rng.uniform(0.02, 0.12), rng.random() < 0.5)
        m = gaussian_filter(_rasterize(outline, size), 0.7)[..., None]
        color = rng.uniform(0.3, 0.95, 3)
        freq, ang, phase = rng.uniform(4, 14), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        stripes = 1.0 + 0.08 * np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
        img = img * (1 - m) + (color * stripes[..., None]) * m
    img = img + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_shadow(base: np.ndarray, soft_mask: np.ndarray, attenuation: float) -> np.ndarray:
    """Multiplicative shadow: ``base * (1 - (1 - a) * m)`` in linear [0, 1] space."""
    return base * (1.0 - (1.0 - attenuation) * soft_mask)[..., None]


def _child_rng(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), kind, index]))


def affected_region(shadow: np.ndarray, gt: np.ndarray, hard: np.ndarray) -> np.ndarray:
    """Binary mask of the occluder plus any pixel whose 8-bit value the shadow changed.

    Thresholding the blurred mask would leave part of the penumbra in the
    lit region, where the input already differs from the ground truth.
    """
    changed = (shadow != gt).any(axis=-1)
    return ((hard > 0.5) | changed).astype(np.float64)


def synthesize_corpus(spec: SynthSpec) -> SynthCorpus:
    """Generate a deterministic unpaired corpus with hidden ground truth.

    Every image has its own RNG stream keyed on ``(seed, domain, index)``, so
    shadow bases and shadow-free images never share a scene.
    """
    triplets = []
    for i in range(spec.n_shadow):
        rng = _child_rng(spec.seed, 0, i)
        base = base_scene(rng, spec.image_size)
        hard, soft = sample_shadow_mask(rng, spec)
        a = float(rng.uniform(spec.attenuation_lo, spec.attenuation_hi))
        shadow, gt = _quantize(apply_shadow(base, soft, a)), _quantize(base)
        triplets.append(ShadowTriplet(shadow, gt, affected_region(shadow, gt, hard), soft, a))
    nonshadow = [_quantize(base_scene(_child_rng(spec.seed, 1, i), spec.image_size))
                 for i in range(spec.n_nonshadow)]
    return SynthCorpus(spec, triplets, nonshadow)


def load_manifest(root: str | os.PathLike) -> list[dict]:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
