"""8-bit RGB PNG I/O; the internal range [-1, 1] maps linearly onto [0, 255]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(img) -> np.ndarray:
    """[3, H, W] or [H, W, 3] in [-1, 1] -> [H, W, 3] uint8."""
    a = np.asarray(img.detach() if isinstance(img, torch.Tensor) else img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3 and a.shape[-1] != 3:
        a = a.transpose(1, 2, 0)
    return np.round((np.clip(a, -1, 1) + 1) * 127.5).astype(np.uint8)


def from_uint8(a: np.ndarray) -> np.ndarray:
    """[H, W, 3] uint8 -> [3, H, W] float32 in [-1, 1]."""
    return (np.asarray(a, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_png(path: str | Path, img, scale: int = 1) -> None:
    im = Image.fromarray(to_uint8(img), "RGB")
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def grid(images, cols: int = 8, pad: int = 2) -> np.ndarray:
    """Tile [N, 3, H, W] images into one [3, H', W'] canvas (background -1)."""
    imgs = np.asarray(images.detach() if isinstance(images, torch.Tensor) else images, dtype=np.float32)
    n, c, h, w = imgs.shape
    rows = -(-n // cols)
    out = -np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.float32)
    for i, im in enumerate(imgs):
        r, k = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + k * (w + pad)
        out[:, y:y + h, x:x + w] = im
    return out


def save_grid(path: str | Path, images, cols: int = 8, scale: int = 2) -> None:
    save_png(path, grid(images, cols), scale)
