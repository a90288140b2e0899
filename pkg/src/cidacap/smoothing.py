"""Gaussian kernels plus the curriculum-by-smoothing layers driven by an annealed sigma."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SIGMA_FLOOR = 0.05


@dataclass(frozen=True)
class GaussianKernel:
    taps: np.ndarray
    sigma: float
    size: int

    @property
    def dims(self) -> int:
        return self.taps.ndim


def default_kernel_size(sigma: float) -> int:
    """3 taps up to sigma = 1, otherwise wide enough to cover +-2 sigma."""
    if sigma <= 1.0:
        return 3
    return 2 * math.ceil(2 * sigma) + 1


def gaussian_kernel(sigma: float, size: int | None = None, dims: int = 1) -> GaussianKernel:
    """Sampled Gaussian, renormalized after truncation to ``size`` taps."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size is None:
        size = default_kernel_size(sigma)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if dims not in (1, 2):
        raise ValueError("dims must be 1 or 2")
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2)) / (math.sqrt(2 * math.pi) * sigma)
    g = g / g.sum()
    taps = g if dims == 1 else np.outer(g, g)
    return GaussianKernel(taps=taps, sigma=float(sigma), size=size)


@dataclass(frozen=True)
class SigmaSchedule:
    sigma0: float = 1.0
    decay: float = 0.9
    period: int = 2
    floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.floor < 0:
            raise ValueError("floor must be >= 0")

    def __call__(self, epoch: int) -> float:
        return anneal_sigma(self, epoch)

    def trace(self, n_epochs: int) -> list[float]:
        return [anneal_sigma(self, e) for e in range(n_epochs)]


def anneal_sigma(schedule: SigmaSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(schedule.floor, schedule.sigma0 * schedule.decay ** (epoch // schedule.period))


def is_bypassed(sigma: float | None, floor: float = SIGMA_FLOOR) -> bool:
    return sigma is None or sigma <= floor


def cbs_apply(features: torch.Tensor, kernel: GaussianKernel) -> torch.Tensor:
    """Depthwise blur with reflection padding; output has the input's shape.

    A 1D kernel blurs the last axis of ``(..., L)``; a 2D kernel blurs the
    spatial axes of ``(B, C, H, W)``.
    """
    taps = torch.as_tensor(kernel.taps, dtype=features.dtype, device=features.device)
    return _blur(features, taps)


def _blur(features, taps):
    size = taps.shape[0]
    pad = size // 2
    if taps.dim() == 1:
        lead = features.shape[:-1]
        L = features.shape[-1]
        x = features.reshape(-1, 1, L)
        if pad:
            x = F.pad(x, (pad, pad), mode="reflect")
        out = F.conv1d(x, taps.view(1, 1, -1))
        return out.reshape(*lead, L)
    if features.dim() != 4:
        raise ValueError("a 2D kernel needs a (B, C, H, W) feature map")
    C = features.shape[1]
    x = F.pad(features, (pad,) * 4, mode="reflect") if pad else features
    weight = taps.expand(C, 1, size, size)
    return F.conv2d(x, weight, groups=C)


class GaussianBlur(nn.Module):
    """Fixed (non-learnable) blur whose sigma is set from outside.

    Taps are rebuilt as a buffer whenever ``sigma`` changes; at or below the
    floor the module is the identity.
    """

    def __init__(self, dims: int, sigma: float | None = None, floor: float = SIGMA_FLOOR):
        super().__init__()
        self.dims = dims
        self.floor = floor
        self.sigma = None
        self.register_buffer("taps", torch.ones((1,) * dims), persistent=False)
        self.set_sigma(sigma)

    def set_sigma(self, sigma):
        if sigma == self.sigma:
            return
        self.sigma = sigma
        if not is_bypassed(sigma, self.floor):
            k = gaussian_kernel(sigma, dims=self.dims)
            self.taps = torch.as_tensor(k.taps, dtype=torch.float32)

    def forward(self, x):
        if is_bypassed(self.sigma, self.floor):
            return x
        return _blur(x, self.taps.to(dtype=x.dtype, device=x.device))


class CBS1d(nn.Module):
    """Region-feature input layer: learned conv, Gaussian blur, LayerNorm, ReLU.

    The learned convolution has kernel size 1 along the region sequence, i.e.
    a per-region linear map ``d_in -> d_model``; the blur runs along the
    feature axis of each region vector, so the layer is permutation
    equivariant over regions.
    """

    def __init__(self, d_in: int, d_model: int, cbs: bool = True, floor: float = SIGMA_FLOOR):
        super().__init__()
        self.conv = nn.Conv1d(d_in, d_model, kernel_size=1)
        self.blur = GaussianBlur(dims=1, floor=floor)
        self.norm = nn.LayerNorm(d_model)
        self.cbs = cbs

    def set_sigma(self, sigma):
        self.blur.set_sigma(sigma if self.cbs else None)

    def forward(self, regions: torch.Tensor, return_pre_activation: bool = False):
        if regions.shape[-2] == 0:
            raise ValueError("empty region set")
        squeeze = regions.dim() == 2
        if squeeze:
            regions = regions.unsqueeze(0)
        h = self.conv(regions.transpose(1, 2)).transpose(1, 2)
        h = self.norm(self.blur(h))
        out = F.relu(h)
        if squeeze:
            out, h = out[0], h[0]
        return (out, h) if return_pre_activation else out


def cbs1d_layer(regions: torch.Tensor, learned_conv: torch.Tensor, sigma: float,
                bias: torch.Tensor | None = None, floor: float = SIGMA_FLOOR,
                return_pre_activation: bool = False):
    """Functional form of :class:`CBS1d`.

    ``learned_conv`` is a ``(d_model, d_in)`` weight of the kernel-size-1 conv.
    """
    if regions.shape[0] == 0:
        raise ValueError("empty region set")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    h = regions @ learned_conv.T
    if bias is not None:
        h = h + bias
    if not is_bypassed(sigma, floor):
        h = cbs_apply(h, gaussian_kernel(sigma, dims=1))
    h = F.layer_norm(h, h.shape[-1:])
    out = F.relu(h)
    return (out, h) if return_pre_activation else out


def high_frequency_energy(x: torch.Tensor) -> float:
    """Sum of squared differences between neighbours along the last axis."""
    return float(((x[..., 1:] - x[..., :-1]) ** 2).sum())


def high_frequency_energy_2d(x: torch.Tensor) -> float:
    dh = x[..., 1:, :] - x[..., :-1, :]
    dw = x[..., :, 1:] - x[..., :, :-1]
    return float((dh ** 2).sum() + (dw ** 2).sum())
