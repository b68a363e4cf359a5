"""Noise-prediction network for label diffusion and its mask-condition input."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvariantError
from .seg_branch import FS_SHAPE, check_shape


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved ``(sin, cos)`` pairs over ``dim / 2`` geometric frequencies."""
    if dim % 2:
        raise ConfigError("timestep embedding dimension must be even")
    t = torch.as_tensor(t)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    angles = t.to(torch.float64).reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(-1, dim)
    return emb


class TimestepEmbedding(nn.Module):
    """Sinusoidal features followed by a learnable affine map."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ConfigError("timestep embedding dimension must be even")
        self.dim = dim
        self.affine = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        base = sinusoidal_embedding(t, self.dim).to(self.affine.weight.dtype)
        return self.affine(base)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax**2) / (2.0 * sigma**2))
    k = torch.outer(g, g)
    return k / k.sum()


class MaskCondition(nn.Module):
    """Compress segmentation features ``f_s`` into a vector for the denoiser.

    Smooth with a learnable depthwise Gaussian, keep the elementwise max with
    the input, refine with channel then spatial attention, max-pool to 7x7 and
    reduce channels with a 1x1 convolution.
    """

    def __init__(self, out_dim: int, channels: int = FS_SHAPE[0], pool: int = 7, kernel_size: int = 5):
        super().__init__()
        if out_dim % (pool * pool):
            raise ConfigError(f"condition dimension {out_dim} is not a multiple of {pool * pool}")
        self.channels = channels
        self.pool = pool
        self.smooth = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2,
                                groups=channels, bias=False)
        with torch.no_grad():
            k = gaussian_kernel(kernel_size, 1.0).to(self.smooth.weight.dtype)
            self.smooth.weight.copy_(k.expand_as(self.smooth.weight))
        self.channel_att = ChannelAttention(channels)
        self.spatial_att = SpatialAttention()
        self.reduce = nn.Conv2d(channels, out_dim // (pool * pool), 1)
        self.out_dim = out_dim

    def forward(self, f_s: torch.Tensor) -> torch.Tensor:
        check_shape(f_s, FS_SHAPE, "f_s")
        f_c = torch.maximum(self.smooth(f_s), f_s)
        f_c1 = self.channel_att(f_c) * f_c
        f_c2 = self.spatial_att(f_c1) * f_c1
        pooled = F.adaptive_max_pool2d(f_c2, self.pool)
        return self.reduce(pooled).flatten(1)


class DenoiserOutput(NamedTuple):
    eps_hat: torch.Tensor
    d_1: torch.Tensor
    d_2: torch.Tensor


class Denoiser(nn.Module):
    """Fully connected noise predictor with Hadamard timestep fusion.

    ``[y_t, prior]`` is projected to the latent width, the condition vector is
    added, and the result passes through two FC + batch-norm + softplus layers,
    each followed by a product with its own timestep embedding. ``d_1`` and
    ``d_2`` are the outputs of those two hidden layers.
    """

    def __init__(self, num_classes: int, latent_dim: int = 784):
        super().__init__()
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.project = nn.Linear(2 * num_classes, latent_dim)
        self.t_in = TimestepEmbedding(latent_dim)
        self.fc1 = nn.Linear(latent_dim, latent_dim)
        self.bn1 = nn.BatchNorm1d(latent_dim)
        self.t1 = TimestepEmbedding(latent_dim)
        self.fc2 = nn.Linear(latent_dim, latent_dim)
        self.bn2 = nn.BatchNorm1d(latent_dim)
        self.t2 = TimestepEmbedding(latent_dim)
        self.out = nn.Linear(latent_dim, num_classes)

    def forward(self, y_t, prior, cond, t) -> DenoiserOutput:
        n = self.num_classes
        if y_t.shape[-1] != n or prior.shape[-1] != n:
            raise InvariantError(f"label vectors must have length {n}")
        if cond is not None and cond.shape[-1] != self.latent_dim:
            raise InvariantError(f"condition must have length {self.latent_dim}")
        for name, v in (("y_t", y_t), ("prior", prior), ("cond", cond)):
            if v is not None and not torch.isfinite(v).all():
                raise InvariantError(f"{name} contains non-finite values")
        f_d = self.project(torch.cat([y_t, prior], dim=-1))
        h = f_d if cond is None else f_d + cond
        h = h * self.t_in(t)
        d_1 = F.softplus(self.bn1(self.fc1(h))) * self.t1(t)
        d_2 = F.softplus(self.bn2(self.fc2(d_1))) * self.t2(t)
        return DenoiserOutput(self.out(d_2), d_1, d_2)
