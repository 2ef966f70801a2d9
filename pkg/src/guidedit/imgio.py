"""PNG image I/O: 8-bit RGB files mapped to float tensors in [0, 1]."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

Tensor = torch.Tensor


def load_image(path) -> Tensor:
    """Load a PNG as a (3, H, W) float64 tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: Tensor, path):
    """Write a (3, H, W) tensor in [0, 1] as an 8-bit RGB PNG."""
    t = torch.as_tensor(tensor, dtype=torch.float64)
    if t.ndim == 2:
        t = t.unsqueeze(0).expand(3, -1, -1)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {tuple(t.shape)}")
    arr = (t.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB").save(path, format="PNG")


def load_mask(path) -> Tensor:
    """Load a binary mask PNG; white (>= 128) marks background as 1."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return torch.from_numpy((arr >= 128.0).astype(np.float64))
