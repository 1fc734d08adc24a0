"""Image export helpers: uint8 conversion, PNG files, and comparison grids.

All tensors handled here follow the package-wide convention of single- or
three-channel float images in [-1, 1], shaped ``(C, H, W)`` or ``(N, C, H, W)``.
Outputs are 8-bit PNGs so run directories stay small and diffable by eye.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

__all__ = [
    "to_uint8",
    "from_uint8",
    "save_png",
    "load_png",
    "image_grid",
    "save_image_grid",
    "pair_grid",
    "trajectory_strip",
]


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """Map float images in [-1, 1] to uint8 arrays in [0, 255].

    Accepts ``(C, H, W)`` or ``(N, C, H, W)``; returns ``(H, W)``/``(H, W, C)``
    or ``(N, H, W)``/``(N, H, W, C)`` with single channels squeezed out, which
    is the layout Pillow expects.
    """
    arr = images.detach().cpu().float().clamp(-1.0, 1.0).numpy()
    arr = np.round((arr + 1.0) * 127.5).astype(np.uint8)
    if arr.ndim == 3:  # C,H,W
        arr = np.moveaxis(arr, 0, -1)
    elif arr.ndim == 4:  # N,C,H,W
        arr = np.moveaxis(arr, 1, -1)
    else:
        raise ValueError(f"expected 3 or 4 dims, got shape {arr.shape}")
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    return arr


def from_uint8(array: np.ndarray) -> torch.Tensor:
    """Inverse of :func:`to_uint8`: uint8 in [0, 255] back to float in [-1, 1]."""
    arr = np.asarray(array, dtype=np.float32) / 127.5 - 1.0
    if arr.ndim == 2:  # H,W
        arr = arr[None]
    elif arr.ndim == 3:  # H,W,C
        arr = np.moveaxis(arr, -1, 0)
    else:
        raise ValueError(f"expected 2 or 3 dims, got shape {arr.shape}")
    return torch.from_numpy(arr)


def save_png(image: torch.Tensor, path: str | Path) -> Path:
    """Write one ``(C, H, W)`` float image to an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def load_png(path: str | Path) -> torch.Tensor:
    """Read a PNG written by :func:`save_png` back to a float ``(C, H, W)`` tensor."""
    with Image.open(path) as im:
        return from_uint8(np.asarray(im))


def image_grid(
    images: torch.Tensor | Sequence[torch.Tensor],
    ncols: int | None = None,
    padding: int = 2,
    pad_value: float = 1.0,
) -> torch.Tensor:
    """Tile a batch of equally sized images into one ``(C, H', W')`` image.

    ``ncols`` defaults to an approximately square layout. Padding pixels take
    ``pad_value`` (in the [-1, 1] scale; +1 renders white).
    """
    if not isinstance(images, torch.Tensor):
        images = torch.stack(list(images))
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got shape {tuple(images.shape)}")
    n, c, h, w = images.shape
    if n == 0:
        raise ValueError("cannot build a grid from zero images")
    if ncols is None:
        ncols = math.ceil(math.sqrt(n))
    ncols = max(1, min(ncols, n))
    nrows = math.ceil(n / ncols)
    grid = images.new_full(
        (c, nrows * (h + padding) + padding, ncols * (w + padding) + padding),
        pad_value,
    )
    for idx in range(n):
        r, col = divmod(idx, ncols)
        top = padding + r * (h + padding)
        left = padding + col * (w + padding)
        grid[:, top : top + h, left : left + w] = images[idx]
    return grid


def save_image_grid(
    images: torch.Tensor | Sequence[torch.Tensor],
    path: str | Path,
    ncols: int | None = None,
) -> Path:
    """Tile ``images`` and write the grid to ``path`` as PNG."""
    return save_png(image_grid(images, ncols=ncols), path)


def pair_grid(
    originals: torch.Tensor,
    edited: torch.Tensor,
    path: str | Path | None = None,
) -> torch.Tensor:
    """Two-row comparison grid: originals on top, edited versions beneath.

    Column *i* pairs ``originals[i]`` with ``edited[i]``, the natural layout
    for before/after inspection of generated samples versus their adversarial
    counterparts. Optionally saves to ``path``.
    """
    if originals.shape != edited.shape:
        raise ValueError(
            f"shape mismatch: {tuple(originals.shape)} vs {tuple(edited.shape)}"
        )
    grid = image_grid(torch.cat([originals, edited]), ncols=originals.shape[0])
    if path is not None:
        save_png(grid, path)
    return grid


def trajectory_strip(
    trajectory,
    every: int = 1,
    use_pred_x0: bool = True,
    path: str | Path | None = None,
) -> torch.Tensor:
    """One-row strip of a sampling trajectory, left (noisy) to right (clean).

    Uses the predicted-clean-image snapshots when available (they are readable
    at every step), falling back to the raw latents otherwise. ``every``
    subsamples the steps; the final state is always included.
    """
    frames: list[torch.Tensor] = []
    steps = trajectory.timesteps
    picks = list(range(0, len(steps), max(1, every)))
    if picks[-1] != len(steps) - 1:
        picks.append(len(steps) - 1)
    for i in picks:
        t = steps[i]
        if use_pred_x0 and t in trajectory.pred_x0:
            frame = trajectory.pred_x0[t]
        else:
            frame = trajectory.xs[i]
        frames.append(frame.squeeze(0) if frame.ndim == 4 else frame)
    strip = image_grid(torch.stack(frames).clamp(-1.0, 1.0), ncols=len(frames))
    if path is not None:
        save_png(strip, path)
    return strip
