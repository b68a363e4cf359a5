"""Fourier-space attention that turns denoiser embeddings into a U-Net correction.

Tokens are transformed with a DFT along the token axis. Complex spectra are
fed to the query/key/value maps as stacked ``(real, imag)`` channels, scores
use the real part of ``Q K^H``, and the attended spectrum passes through a
learnable ``a * sin(w * .)`` before the inverse DFT.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvariantError
from .seg_branch import S1_SHAPE


def _to_pair(z: torch.Tensor) -> torch.Tensor:
    return torch.cat([z.real, z.imag], dim=-1)


def _from_pair(x: torch.Tensor) -> torch.Tensor:
    re, im = x.chunk(2, dim=-1)
    return torch.complex(re, im)


class FourierAttention(nn.Module):
    """Multi-head attention on token spectra.

    ``forward(x_kv, x_q)`` computes keys and values from ``x_kv`` and queries
    from ``x_q``; self-attention is ``forward(x)``.
    """

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"heads ({heads}) must divide the token width ({dim})")
        self.dim = dim
        self.heads = heads
        self.w_q = nn.Linear(2 * dim, 2 * dim, bias=False)
        self.w_k = nn.Linear(2 * dim, 2 * dim, bias=False)
        self.w_v = nn.Linear(2 * dim, 2 * dim, bias=False)
        self.a = nn.Parameter(torch.tensor(1.0))
        self.omega = nn.Parameter(torch.tensor(1.0))
        self.w_out = nn.Linear(dim, dim)

    def _split(self, z: torch.Tensor) -> torch.Tensor:
        b, p, _ = z.shape
        return z.reshape(b, p, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, x_kv: torch.Tensor, x_q: torch.Tensor | None = None) -> torch.Tensor:
        if x_q is None:
            x_q = x_kv
        if x_kv.shape != x_q.shape:
            raise InvariantError(f"token shapes differ: {tuple(x_kv.shape)} vs {tuple(x_q.shape)}")
        if not (torch.isfinite(x_kv).all() and torch.isfinite(x_q).all()):
            raise InvariantError("non-finite tokens")
        spec_kv = torch.fft.fft(x_kv, dim=1)
        spec_q = spec_kv if x_q is x_kv else torch.fft.fft(x_q, dim=1)
        q = self._split(_from_pair(self.w_q(_to_pair(spec_q))))
        k = self._split(_from_pair(self.w_k(_to_pair(spec_kv))))
        v = self._split(_from_pair(self.w_v(_to_pair(spec_kv))))
        scores = (q @ k.conj().transpose(-2, -1)).real / math.sqrt(self.dim)
        weights = torch.softmax(scores, dim=-1)
        attended = weights.to(v.dtype) @ v
        attended = attended.transpose(1, 2).reshape(x_q.shape[0], x_q.shape[1], self.dim)
        activated = torch.complex(
            self.a * torch.sin(self.omega * attended.real),
            self.a * torch.sin(self.omega * attended.imag),
        )
        return self.w_out(torch.fft.ifft(activated, dim=1).real)


class FusionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int = 2):
        super().__init__()
        self.self_attn = FourierAttention(dim, heads)
        self.cross_attn = FourierAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def forward(self, u: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        u = self.norm1(u + self.self_attn(u))
        u = self.norm2(u + self.cross_attn(context, u))
        return self.norm3(u + self.ff(u))


class SpectralFusion(nn.Module):
    """Fuse ``d_1`` and ``d_2`` into a correction shaped like ``s_1``.

    The final projection is zero-initialized, so a fresh module emits an
    all-zero map and leaves the segmentation network unchanged.
    """

    def __init__(self, latent_dim: int = 784, tokens: int = 16, heads: int = 7, blocks: int = 3,
                 out_shape: tuple = S1_SHAPE, coarse: int = 7):
        super().__init__()
        if latent_dim % tokens:
            raise ConfigError(f"latent width {latent_dim} is not divisible into {tokens} tokens")
        self.tokens = tokens
        self.token_dim = latent_dim // tokens
        self.out_shape = tuple(out_shape)
        self.coarse = coarse
        self.blocks = nn.ModuleList(FusionBlock(self.token_dim, heads) for _ in range(blocks))
        channels = self.out_shape[0]
        self.project = nn.Linear(latent_dim, channels * coarse * coarse)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def tokenize(self, d: torch.Tensor) -> torch.Tensor:
        return d.reshape(d.shape[0], self.tokens, self.token_dim)

    def forward(self, d_1: torch.Tensor, d_2: torch.Tensor) -> torch.Tensor:
        u = self.tokenize(d_1)
        context = self.tokenize(d_2)
        for block in self.blocks:
            u = block(u, context)
        c, h, w = self.out_shape
        coarse = self.project(u.flatten(1)).reshape(-1, c, self.coarse, self.coarse)
        if (h, w) == (self.coarse, self.coarse):
            return coarse
        return F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
