"""U-net architectures for detection (3D) and identification (2D), and their losses."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_EPS = 1e-7
BN_MOMENTUM = 0.1


def detection_loss(pred: torch.Tensor, target: torch.Tensor, weights=(0.1, 0.9), eps: float = LOG_EPS) -> torch.Tensor:
    """Weighted two-class cross entropy on probabilities.

    ``pred`` has the class axis at dim 1 (``(N, 2, ...)``); ``target`` is the
    matching ``(N, ...)`` map of 0/1. Returns the voxel mean of
    ``-(w0 [t=0] log p0 + w1 [t=1] log p1)``.
    """
    if pred.dim() < 2 or pred.shape[1] != 2:
        raise ValueError(f"expected (N, 2, ...) probabilities, got {tuple(pred.shape)}")
    if pred.shape[:1] + pred.shape[2:] != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0)
    if torch.any(pred < -eps) or torch.any(pred > 1 + eps):
        raise ValueError("probabilities outside [0, 1]")
    t = target.to(p.dtype)
    ce = weights[0] * (1 - t) * torch.log(p[:, 0]) + weights[1] * t * torch.log(p[:, 1])
    return -ce.mean()


def identification_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 over pixels whose target is nonzero, averaged over those pixels; 0 if there are none."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    mask = target != 0
    count = mask.sum()
    if count == 0:
        return (pred * 0).sum()
    diff = torch.where(mask, (pred - target.to(pred.dtype)).abs(), torch.zeros_like(pred))
    return diff.sum() / count


def _same_conv(conv, cin, cout, kernel, dims):
    kernel = (kernel,) * dims if isinstance(kernel, int) else tuple(kernel)
    if all(k % 2 for k in kernel):
        return conv(cin, cout, kernel, padding=tuple(k // 2 for k in kernel))
    # even kernels: extra zero goes after, as in "same" padding
    pads = []
    for k in reversed(kernel):
        pads += [(k - 1) // 2, (k - 1) - (k - 1) // 2]
    return nn.Sequential(nn.ConstantPad3d(pads, 0.0) if dims == 3 else nn.ConstantPad2d(pads, 0.0),
                         conv(cin, cout, kernel))


def _block(conv, bn, cin, cout, kernel, n_convs, dims):
    layers = []
    for i in range(n_convs):
        layers += [_same_conv(conv, cin if i == 0 else cout, cout, kernel, dims),
                   bn(cout, momentum=BN_MOMENTUM), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class _UNet(nn.Module):
    dims = 3

    def __init__(self, in_channels: int, out_channels: int, channels: Sequence[int],
                 kernel, bottom_kernel, convs_per_level: int = 2):
        super().__init__()
        conv = nn.Conv3d if self.dims == 3 else nn.Conv2d
        bn = nn.BatchNorm3d if self.dims == 3 else nn.BatchNorm2d
        up = nn.ConvTranspose3d if self.dims == 3 else nn.ConvTranspose2d
        pool = nn.MaxPool3d if self.dims == 3 else nn.MaxPool2d
        self.channels = tuple(channels)
        self.kernel = kernel
        self.bottom_kernel = bottom_kernel
        self.convs_per_level = convs_per_level

        self.down = nn.ModuleList()
        cin = in_channels
        for c in self.channels[:-1]:
            self.down.append(_block(conv, bn, cin, c, kernel, convs_per_level, self.dims))
            cin = c
        self.pool = pool(2)
        self.bottom = _block(conv, bn, cin, self.channels[-1], bottom_kernel, convs_per_level, self.dims)
        self.ups = nn.ModuleList()
        self.decode = nn.ModuleList()
        cin = self.channels[-1]
        for c in reversed(self.channels[:-1]):
            self.ups.append(up(cin, c, 2, stride=2))
            self.decode.append(_block(conv, bn, 2 * c, c, kernel, convs_per_level, self.dims))
            cin = c
        self.head = conv(cin, out_channels, 1)

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottom(x)
        for up, block, skip in zip(self.ups, self.decode, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def receptive_field(self, axis: int) -> int:
        """Theoretical receptive field (input pixels) along spatial ``axis``."""
        def k(kernel):
            return kernel if isinstance(kernel, int) else kernel[axis]

        rf, jump = 1, 1
        levels = len(self.channels) - 1
        for _ in range(levels):
            rf += self.convs_per_level * (k(self.kernel) - 1) * jump
            rf += jump  # 2-wide pooling
            jump *= 2
        rf += self.convs_per_level * (k(self.bottom_kernel) - 1) * jump
        for _ in range(levels):
            jump //= 2
            rf += self.convs_per_level * (k(self.kernel) - 1) * jump
        return rf


class DetectionNet(_UNet):
    """3D U-net: ``(N, 1, X, Y, Z)`` intensities -> ``(N, 2, X, Y, Z)`` class probabilities."""

    dims = 3

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128), convs_per_level: int = 2):
        super().__init__(1, 2, channels, 3, 3, convs_per_level)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.features(x), dim=1)


class IdentificationNet(_UNet):
    """2D U-net over 8-slice slabs: ``(N, 8, H, W)`` -> ``(N, 1, H, W)`` real vertebra index.

    The bottom level uses anisotropic ``bottom_kernel`` convolutions (5 x 20
    by default) to stretch the receptive field along the long axis.
    """

    dims = 2

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 256), in_channels: int = 8,
                 bottom_kernel=(5, 20), convs_per_level: int = 2):
        super().__init__(in_channels, 1, channels, 3, tuple(bottom_kernel), convs_per_level)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)
