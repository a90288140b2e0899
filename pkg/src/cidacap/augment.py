"""Per-sample image augmentations with schedule-independent randomness.

Every call draws from a generator keyed by ``(seed, sample id, epoch, view)``,
so the result does not depend on batch composition or worker order.
"""
from __future__ import annotations

import math
import zlib

import numpy as np
import torch
import torch.nn.functional as F


def sample_rng(seed: int, sample_id: str, epoch: int, view: int = 0) -> np.random.Generator:
    key = [int(seed), zlib.crc32(sample_id.encode("utf-8")), int(epoch), int(view)]
    return np.random.default_rng(np.random.SeedSequence(key))


def _hue_rotate(img: torch.Tensor, degrees: float) -> torch.Tensor:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    m = torch.tensor([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ], dtype=img.dtype)
    return torch.einsum("ij,jhw->ihw", m, img)


def _grey(img):
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0)


def random_resized_crop(img, rng, scale=(0.6, 1.0)):
    _, H, W = img.shape
    area = rng.uniform(*scale)
    side = max(2, int(round(math.sqrt(area) * H)))
    top = int(rng.integers(0, H - side + 1))
    left = int(rng.integers(0, W - side + 1))
    crop = img[:, top:top + side, left:left + side]
    return F.interpolate(crop[None], size=(H, W), mode="bilinear", align_corners=False)[0]


def color_jitter(img, rng, brightness=0.4, contrast=0.4, saturation=0.4, hue=0.1):
    # factors applied in a random order, as in the usual torchvision recipe
    ops = rng.permutation(4)
    for op in ops:
        if op == 0 and brightness:
            img = img * rng.uniform(1 - brightness, 1 + brightness)
        elif op == 1 and contrast:
            mean = _grey(img).mean()
            img = (img - mean) * rng.uniform(1 - contrast, 1 + contrast) + mean
        elif op == 2 and saturation:
            g = _grey(img)
            img = (img - g) * rng.uniform(1 - saturation, 1 + saturation) + g
        elif op == 3 and hue:
            img = _hue_rotate(img, 360.0 * rng.uniform(-hue, hue))
        img = img.clamp(0.0, 1.0)
    return img


def strong_augment(img: torch.Tensor, rng: np.random.Generator, hue: float = 0.1) -> torch.Tensor:
    """Contrastive recipe: crop 0.6-1.0 area, flip, colour jitter (p=0.8), greyscale (p=0.2)."""
    img = random_resized_crop(img, rng, (0.6, 1.0))
    if rng.random() < 0.5:
        img = img.flip(-1)
    if rng.random() < 0.8:
        img = color_jitter(img, rng, hue=hue)
    if rng.random() < 0.2:
        img = _grey(img).expand(3, -1, -1)
    return img.contiguous()


def light_augment(img: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Crop 0.8-1.0 area and flip; colours untouched."""
    img = random_resized_crop(img, rng, (0.8, 1.0))
    if rng.random() < 0.5:
        img = img.flip(-1)
    return img.contiguous()


def augment_batch(images: torch.Tensor, ids, seed: int, epoch: int, view: int = 0,
                  kind: str = "light", hue: float = 0.1) -> torch.Tensor:
    if kind == "none":
        return images
    out = []
    for img, sid in zip(images, ids):
        rng = sample_rng(seed, sid, epoch, view)
        out.append(strong_augment(img, rng, hue) if kind == "strong" else light_augment(img, rng))
    return torch.stack(out)
