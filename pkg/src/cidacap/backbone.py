"""Residual feature extractor with optional 2D curriculum smoothing.

A small ResNet-style network (the default is three stages of basic blocks on
64x64 inputs) whose final feature map doubles as the grid of region features
handed to the captioner. The pooled feature feeds a projection head for
contrastive training and a linear classifier that can grow new classes.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .smoothing import SIGMA_FLOOR, GaussianBlur

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    stages: tuple = ((32, 2), (64, 2), (128, 2))
    input_size: int = 64
    proj_dim: int = 128
    cbs_enabled: bool = False
    num_classes: int = 1
    stem_stride: int = 2
    proj_bias: bool = True
    sigma_floor: float = SIGMA_FLOOR
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stages = tuple(tuple(s) for s in self.stages)
        if not self.stages:
            raise ValueError("need at least one stage")
        if self.proj_dim > self.feature_dim:
            raise ValueError("proj_dim must not exceed feature_dim")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][0]

    @property
    def final_map_size(self) -> int:
        size = self.input_size // self.stem_stride
        for i in range(1, len(self.stages)):
            size = (size + 1) // 2
        return size

    @property
    def n_regions(self) -> int:
        return self.final_map_size ** 2

    @classmethod
    def resnet18(cls, **kw):
        kw.setdefault("input_size", 224)
        return cls(stages=((64, 2), (128, 2), (256, 2), (512, 2)), **kw)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                                          nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ProjectionHead(nn.Module):
    """Linear, ReLU, linear, then L2 normalization."""

    def __init__(self, d_in, d_out, bias=True, eps=1e-8):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_in, bias=bias)
        self.fc2 = nn.Linear(d_in, d_out, bias=bias)
        self.eps = eps

    def forward(self, x):
        h = self.fc2(F.relu(self.fc1(x)))
        norms = h.norm(dim=-1, keepdim=True)
        if (norms < self.eps).any():
            log.warning("projection produced a zero vector; renormalizing with epsilon %g", self.eps)
            h = torch.where(norms < self.eps, h + self.eps, h)
            norms = h.norm(dim=-1, keepdim=True)
        return h / norms


class FeatureExtractor(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        c0 = cfg.stages[0][0]
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, cfg.stem_stride, 1, bias=False),
                                  nn.BatchNorm2d(c0), nn.ReLU(inplace=True))
        self.blurs = nn.ModuleList([GaussianBlur(dims=2, floor=cfg.sigma_floor)])
        stages = []
        c_prev = c0
        for i, (c, n_blocks) in enumerate(cfg.stages):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(c_prev, c, stride)] + [BasicBlock(c, c, 1) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            self.blurs.append(GaussianBlur(dims=2, floor=cfg.sigma_floor))
            c_prev = c
        self.stages = nn.ModuleList(stages)
        self.head = ProjectionHead(cfg.feature_dim, cfg.proj_dim, bias=cfg.proj_bias)
        self.classifier = nn.Linear(cfg.feature_dim, cfg.num_classes)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def set_sigma(self, sigma):
        for b in self.blurs:
            b.set_sigma(sigma if self.config.cbs_enabled else None)

    def feature_map(self, images: torch.Tensor, sigma=None) -> torch.Tensor:
        if sigma is not None:
            self.set_sigma(sigma)
        S = self.config.input_size
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (S, S):
            raise ValueError(f"expected images of shape (B, 3, {S}, {S}), got {tuple(images.shape)}")
        x = self.blurs[0](self.stem(images))
        for stage, blur in zip(self.stages, self.blurs[1:]):
            x = blur(stage(x))
        return x

    def forward_features(self, images: torch.Tensor, sigma=None):
        """Pooled ``(B, d_feat)`` vector and ``(B, N_regions, d_feat)`` region grid.

        Region rows follow raster order of the final feature map.
        """
        fmap = self.feature_map(images, sigma)
        regions = fmap.flatten(2).transpose(1, 2)
        return regions.mean(dim=1), regions

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(pooled).all():
            raise ValueError("non-finite pooled features")
        return self.head(pooled)

    def classify(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.classifier(pooled)

    def forward(self, images, sigma=None):
        pooled, _ = self.forward_features(images, sigma)
        return self.classify(pooled)

    def expand_head(self, new_total: int) -> None:
        self.classifier = expand_head(self.classifier, new_total)


def expand_head(old_head: nn.Linear, new_total: int, generator: torch.Generator | None = None) -> nn.Linear:
    """Grow a classifier to ``new_total`` outputs keeping the old rows bit-exact.

    New rows get zero bias and weights uniform in ``+-1/sqrt(d)``.
    """
    k_old, d = old_head.out_features, old_head.in_features
    if new_total <= k_old:
        raise ValueError(f"new_total {new_total} must exceed the current {k_old} classes")
    new = nn.Linear(d, new_total).to(old_head.weight.device, old_head.weight.dtype)
    bound = 1.0 / d ** 0.5
    with torch.no_grad():
        new.weight[:k_old] = old_head.weight
        new.bias[:k_old] = old_head.bias
        w = torch.rand(new_total - k_old, d, generator=generator, dtype=new.weight.dtype)
        new.weight[k_old:] = (2 * w - 1) * bound
        new.bias[k_old:] = 0.0
    return new


def images_to_tensor(images) -> torch.Tensor:
    """``(N, H, W, 3)`` uint8 array or list of them to float ``(N, 3, H, W)`` in [0, 1]."""
    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return t / 255.0 if arr.dtype == np.uint8 else t


@torch.no_grad()
def encode_images(model: FeatureExtractor, images, batch_size: int = 100, sigma=None):
    """Eval-mode pooled features, regions, projections and logits for many images."""
    was_training = model.training
    model.eval()
    pooled, regions, proj, logits = [], [], [], []
    for i in range(0, len(images), batch_size):
        x = images_to_tensor(images[i:i + batch_size])
        p, r = model.forward_features(x, sigma)
        pooled.append(p)
        regions.append(r)
        proj.append(model.project(p))
        logits.append(model.classify(p))
    model.train(was_training)
    return (torch.cat(pooled), torch.cat(regions), torch.cat(proj), torch.cat(logits))


def export_embeddings(model: FeatureExtractor, samples: Sequence, batch_size: int = 100):
    """One ``(sample id, class id, embedding)`` row per sample."""
    if not samples:
        raise ValueError("cannot export embeddings of an empty dataset")
    _, _, proj, _ = encode_images(model, [s.image for s in samples], batch_size)
    return [(s.id, int(s.label), proj[i].numpy().astype(np.float64)) for i, s in enumerate(samples)]


def write_embeddings(path, rows) -> None:
    dim = len(rows[0][2]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "label"] + [f"e{i}" for i in range(dim)])
        for sid, label, vec in rows:
            w.writerow([sid, label] + [repr(float(v)) for v in vec])


def read_embeddings(path):
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        next(r)
        for rec in r:
            rows.append((rec[0], int(rec[1]), np.array([float(v) for v in rec[2:]])))
    return rows
