"""Image tensors, normalisation and file I/O.

Images are ``(3, H, W)`` float tensors in ``[-1, 1]`` (8-bit value ``v`` maps
to ``v / 127.5 - 1``). Residuals share the layout and live in ``[-2, 2]``.
Masks are ``(1, H, W)`` tensors in ``[0, 1]``.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

# Modes PIL can turn into 8-bit RGB without guessing.
_CONVERTIBLE = {"RGB", "RGBA", "RGBX", "L", "LA", "P", "PA", "1", "CMYK", "YCbCr"}


class ImageFileError(ValueError):
    """Raised when an image file is missing, unreadable or has an unusable mode."""


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` uint8 array -> ``(3, H, W)`` float32 tensor in [-1, 1]."""
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) uint8 array, got {arr.dtype} {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(torch.float32)
    return t / 127.5 - 1.0


def to_uint8(t: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`from_uint8`, rounding half away from zero."""
    check_image(t)
    v = (t.detach().to(torch.float64).cpu() + 1.0) * 127.5
    # all values are >= 0 here, so floor(v + 0.5) is round-half-away-from-zero
    v = torch.floor(v.clamp(0.0, 255.0) + 0.5)
    return v.to(torch.uint8).permute(1, 2, 0).contiguous().numpy()


def check_image(t: torch.Tensor, tol: float = 1e-6) -> None:
    if t.dim() != 3 or t.shape[0] != 3:
        raise ValueError(f"image tensor must be (3, H, W), got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError("image tensor has non-finite values")
    if t.numel() and (t.min() < -1 - tol or t.max() > 1 + tol):
        raise ValueError(f"image values outside [-1, 1]: [{t.min().item()}, {t.max().item()}]")


def _open_rgb(path: str | os.PathLike) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise ImageFileError(f"image file not found: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFileError(f"cannot decode image {path}: {exc}") from exc
    if img.mode not in _CONVERTIBLE:
        raise ImageFileError(f"{path}: image mode {img.mode!r} cannot be converted to 8-bit RGB")
    return img.convert("RGB") if img.mode != "RGB" else img


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """Read a PNG/JPEG file as a ``(3, H, W)`` tensor in [-1, 1]."""
    return from_uint8(np.asarray(_open_rgb(path), dtype=np.uint8))


def save_image(t: torch.Tensor, path: str | os.PathLike) -> None:
    """Write an image tensor as an 8-bit PNG."""
    arr = to_uint8(t)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageFileError(f"cannot write {path}: {exc}") from exc


def load_mask(path: str | os.PathLike, threshold: float | None = 0.5) -> torch.Tensor:
    """Read a grayscale mask as ``(1, H, W)``.

    With a threshold the mask is binarised (``value >= threshold`` -> 1);
    pass ``threshold=None`` to keep the soft ``[0, 1]`` values.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageFileError(f"mask file not found: {path}")
    try:
        img = Image.open(path).convert("L")
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFileError(f"cannot decode mask {path}: {exc}") from exc
    m = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)[None]
    if threshold is not None:
        m = (m >= threshold).to(torch.float32)
    return m


def save_mask(m: torch.Tensor | np.ndarray, path: str | os.PathLike) -> None:
    m = torch.as_tensor(m, dtype=torch.float64)
    if m.dim() == 3:
        m = m[0]
    arr = torch.floor(m.clamp(0, 1) * 255.0 + 0.5).to(torch.uint8).numpy()
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def compose_shadow_free(x: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Add a residual to a shadow image and clamp back into [-1, 1]."""
    if x.shape != residual.shape:
        raise ValueError(f"shape mismatch: image {tuple(x.shape)} vs residual {tuple(residual.shape)}")
    return torch.clamp(x + residual, -1.0, 1.0)
