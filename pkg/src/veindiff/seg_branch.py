"""Segmentation U-Net and the residual authentication head.

Layer widths follow the fixed configuration used throughout the package:

==========  ===================  ==============
block       layer                output
==========  ===================  ==============
Conv0       conv x2, 16          16 x 224 x 224
Contract1   pool, conv x2, 32    32 x 112 x 112
Contract2   pool, conv x2, 64    64 x 56 x 56
Contract3   pool, conv x2, 128   128 x 28 x 28   (s_1)
Expand1     up, conv x2, 64      64 x 56 x 56
Expand2     up, conv x2, 32      32 x 112 x 112
Expand3     up, conv x2, 16      16 x 224 x 224  (f_s)
SegOut      1x1 conv             1 x 224 x 224   (logits)
==========  ===================  ==============

The authentication head maps ``s_2`` (128 x 28 x 28) through two bottleneck
stages to 512 x 14 x 14 and 1024 x 7 x 7, average-pools to a 1024-d
embedding and projects it to N class logits.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvariantError

INPUT_SIZE = 224
S1_SHAPE = (128, 28, 28)
FS_SHAPE = (16, 224, 224)
MASK_SHAPE = (1, 224, 224)
RES1_SHAPE = (512, 14, 14)
RES2_SHAPE = (1024, 7, 7)
EMBED_DIM = 1024


def check_shape(x: torch.Tensor, shape: tuple, name: str) -> None:
    if tuple(x.shape[1:]) != tuple(shape):
        raise InvariantError(f"{name}: expected (B, {', '.join(map(str, shape))}), got {tuple(x.shape)}")


def conv_bn_relu(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(*conv_bn_relu(cin, cout), *conv_bn_relu(cout, cout))


class SegOutput(NamedTuple):
    mask_logits: torch.Tensor
    f_s: torch.Tensor
    s_1: torch.Tensor


class SegmentationUNet(nn.Module):
    """U-Net whose bottleneck ``s_1`` can be shifted by an additive correction."""

    def __init__(self, in_channels: int = 1):
        super().__init__()
        self.conv0 = DoubleConv(in_channels, 16)
        self.contract1 = DoubleConv(16, 32)
        self.contract2 = DoubleConv(32, 64)
        self.contract3 = DoubleConv(64, 128)
        # expanding blocks see the upsampled map concatenated with the skip
        self.expand1 = DoubleConv(128 + 64, 64)
        self.expand2 = DoubleConv(64 + 32, 32)
        self.expand3 = DoubleConv(32 + 16, 16)
        # no ReLU so logits can go negative
        self.seg_out = nn.Conv2d(16, 1, 1)

    def encode(self, image: torch.Tensor):
        if image.dim() != 4 or tuple(image.shape[2:]) != (INPUT_SIZE, INPUT_SIZE):
            raise InvariantError(f"expected (B, C, 224, 224) input, got {tuple(image.shape)}")
        e0 = self.conv0(image)
        e1 = self.contract1(F.max_pool2d(e0, 2))
        e2 = self.contract2(F.max_pool2d(e1, 2))
        s_1 = self.contract3(F.max_pool2d(e2, 2))
        check_shape(e0, (16, 224, 224), "Conv0")
        check_shape(s_1, S1_SHAPE, "s_1")
        return s_1, (e0, e1, e2)

    def decode(self, s_2: torch.Tensor, skips) -> tuple[torch.Tensor, torch.Tensor]:
        e0, e1, e2 = skips
        d1 = self.expand1(torch.cat([_up(s_2), e2], dim=1))
        check_shape(d1, (64, 56, 56), "Expand1")
        d2 = self.expand2(torch.cat([_up(d1), e1], dim=1))
        check_shape(d2, (32, 112, 112), "Expand2")
        f_s = self.expand3(torch.cat([_up(d2), e0], dim=1))
        check_shape(f_s, FS_SHAPE, "f_s")
        logits = self.seg_out(f_s)
        check_shape(logits, MASK_SHAPE, "mask logits")
        return logits, f_s

    def forward(self, image: torch.Tensor, d_f: torch.Tensor | None = None) -> SegOutput:
        s_1, skips = self.encode(image)
        s_2 = fuse_bottleneck(s_1, d_f)
        logits, f_s = self.decode(s_2, skips)
        return SegOutput(logits, f_s, s_1)


def fuse_bottleneck(s_1: torch.Tensor, d_f: torch.Tensor | None) -> torch.Tensor:
    if d_f is None:
        return s_1
    check_shape(d_f, S1_SHAPE, "d_f")
    return s_1 + d_f


def _up(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand, residual add."""

    def __init__(self, cin: int, width: int, cout: int, stride: int = 1, shortcut: bool = True):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, width, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.use_shortcut = shortcut
        if stride != 1 or cin != cout:
            self.projection = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.projection = nn.Identity()

    def forward(self, x):
        out = self.body(x)
        if self.use_shortcut:
            out = out + self.projection(x)
        return F.relu(out)


def res_stage(cin: int, width: int, cout: int, blocks: int, shortcut: bool = True) -> nn.Sequential:
    layers = [Bottleneck(cin, width, cout, stride=2, shortcut=shortcut)]
    layers += [Bottleneck(cout, width, cout, shortcut=shortcut) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class AuthOutput(NamedTuple):
    embedding: torch.Tensor
    logits: torch.Tensor


class AuthHead(nn.Module):
    def __init__(self, num_classes: int, shortcut: bool = True):
        super().__init__()
        self.num_classes = num_classes
        self.res1 = res_stage(128, 128, 512, 6, shortcut)
        self.res2 = res_stage(512, 256, 1024, 3, shortcut)
        self.digits = nn.Linear(EMBED_DIM, num_classes)

    def forward(self, s_2: torch.Tensor) -> AuthOutput:
        check_shape(s_2, S1_SHAPE, "s_2")
        r1 = self.res1(s_2)
        check_shape(r1, RES1_SHAPE, "ResBlock1")
        r2 = self.res2(r1)
        check_shape(r2, RES2_SHAPE, "ResBlock2")
        embedding = F.avg_pool2d(r2, 7).flatten(1)
        check_shape(embedding, (EMBED_DIM,), "FeatOut")
        logits = self.digits(embedding)
        check_shape(logits, (self.num_classes,), "DigitsOut")
        return AuthOutput(embedding, logits)
