"""Neural building blocks: depthwise-separable double convolutions, CBAM,
SPADE conditioning and spectrally normalized residual blocks.

All blocks preserve the spatial size of their input.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, InvalidInputError, ShapeError

NORM_EPS = 1e-5


def _check_channels(x: torch.Tensor, expected: int, where: str):
    if x.dim() != 4:
        raise ShapeError(f"{where}: expected a (B, C, H, W) tensor, got {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{where}: expected {expected} input channels, got {x.shape[1]}")


def resize_bilinear(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize with pixel-center sampling (no corner alignment)."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class DepthwiseSeparableConv(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, kernels_per_layer=2):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels,
            in_channels * kernels_per_layer,
            kernel_size,
            padding=kernel_size // 2,
            groups=in_channels,
        )
        self.pointwise = nn.Conv2d(in_channels * kernels_per_layer, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class DoubleConvDS(nn.Module):
    """Two rounds of depthwise-separable conv, batch norm and ReLU."""

    def __init__(self, in_channels, out_channels, mid_channels=None, kernels_per_layer=2):
        super().__init__()
        mid_channels = mid_channels or out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.double_conv = nn.Sequential(
            DepthwiseSeparableConv(in_channels, mid_channels, 3, kernels_per_layer),
            nn.BatchNorm2d(mid_channels, eps=NORM_EPS),
            nn.ReLU(inplace=True),
            DepthwiseSeparableConv(mid_channels, out_channels, 3, kernels_per_layer),
            nn.BatchNorm2d(out_channels, eps=NORM_EPS),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        _check_channels(x, self.in_channels, "DoubleConvDS")
        return self.double_conv(x)


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.ReLU(inplace=True),
            nn.Linear(channels // reduction, channels),
        )

    def gate(self, x):
        avg = self.mlp(x.mean(dim=(2, 3)))
        mx = self.mlp(x.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx)[:, :, None, None]

    def forward(self, x):
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def gate(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x):
        return x * self.gate(x)


class CBAM(nn.Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels, reduction=16, kernel_size=7):
        super().__init__()
        if reduction < 1:
            raise ConfigurationError(f"CBAM reduction must be >= 1, got {reduction}")
        if reduction > channels:
            raise ConfigurationError(f"CBAM reduction {reduction} exceeds channel count {channels}")
        self.channels = channels
        self.channel_att = ChannelAttention(channels, reduction)
        self.spatial_att = SpatialAttention(kernel_size)

    def forward(self, x):
        _check_channels(x, self.channels, "CBAM")
        return self.spatial_att(self.channel_att(x))


class SPADE(nn.Module):
    """Parameter-free batch norm modulated by per-pixel scale and shift maps
    computed from a conditioning tensor."""

    def __init__(self, norm_channels, cond_channels, hidden=64, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.norm_channels = norm_channels
        self.cond_channels = cond_channels
        self.param_free_norm = nn.BatchNorm2d(norm_channels, eps=NORM_EPS, affine=False)
        self.shared = nn.Sequential(
            nn.Conv2d(cond_channels, hidden, kernel_size, padding=pad),
            nn.ReLU(inplace=True),
        )
        self.to_gamma = nn.Conv2d(hidden, norm_channels, kernel_size, padding=pad)
        self.to_beta = nn.Conv2d(hidden, norm_channels, kernel_size, padding=pad)

    def modulation(self, cond, size):
        if cond.dim() != 4 or cond.shape[-1] == 0 or cond.shape[-2] == 0:
            raise InvalidInputError(f"SPADE conditioning must be a non-empty (B, C, H, W) tensor, got {tuple(cond.shape)}")
        _check_channels(cond, self.cond_channels, "SPADE conditioning")
        actv = self.shared(resize_bilinear(cond, size))
        return self.to_gamma(actv), self.to_beta(actv)

    def forward(self, x, cond):
        _check_channels(x, self.norm_channels, "SPADE")
        normalized = self.param_free_norm(x)
        gamma, beta = self.modulation(cond, x.shape[-2:])
        return normalized * (1 + gamma) + beta


class SpectralNormConv2d(nn.Module):
    """Convolution whose kernel is divided by a power-iteration estimate of
    its leading singular value.

    One power iteration runs per training-mode forward pass; the iteration
    vectors are buffers, so they persist across steps and checkpoints.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, bias=True, eps=1e-12):
        super().__init__()
        self.padding = kernel_size // 2
        self.eps = eps
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        if self.bias is not None:
            bound = 1 / (in_channels * kernel_size * kernel_size) ** 0.5
            nn.init.uniform_(self.bias, -bound, bound)
        self.register_buffer("u", torch.empty(out_channels))
        self.register_buffer("v", torch.empty(in_channels * kernel_size * kernel_size))
        self.reset_singular_vectors()

    @torch.no_grad()
    def reset_singular_vectors(self):
        """Start the iteration at the exact leading singular pair.

        Random starts converge slowly when the top singular values of a
        freshly initialized kernel are close together.
        """
        w = self.weight.detach().reshape(self.weight.shape[0], -1).double()
        u, _, vh = torch.linalg.svd(w, full_matrices=False)
        self.u.copy_(u[:, 0])
        self.v.copy_(vh[0])

    @torch.no_grad()
    def power_iteration(self, n=1):
        w = self.weight.detach().reshape(self.weight.shape[0], -1).to(self.u.dtype)
        u, v = self.u, self.v
        for _ in range(n):
            v = F.normalize(w.t() @ u, dim=0, eps=self.eps)
            u = F.normalize(w @ v, dim=0, eps=self.eps)
        self.u.copy_(u)
        self.v.copy_(v)

    def sigma(self) -> torch.Tensor:
        w = self.weight.reshape(self.weight.shape[0], -1)
        u = self.u.clone().to(w.dtype)
        v = self.v.clone().to(w.dtype)
        return torch.dot(u, w @ v)

    def normalized_weight(self) -> torch.Tensor:
        return self.weight / self.sigma().clamp_min(self.eps)

    def forward(self, x):
        if self.training:
            self.power_iteration(1)
        return F.conv2d(x, self.normalized_weight(), self.bias, padding=self.padding)


class SpectralResidualBlock(nn.Module):
    """Double [BN, ReLU, SN-conv] with a [BN, SN-conv] residual shortcut."""

    def __init__(self, in_channels, out_channels, mid_channels=None, kernel_size=3):
        super().__init__()
        mid_channels = mid_channels or out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.double_conv = nn.Sequential(
            nn.BatchNorm2d(in_channels, eps=NORM_EPS),
            nn.ReLU(inplace=True),
            SpectralNormConv2d(in_channels, mid_channels, kernel_size),
            nn.BatchNorm2d(mid_channels, eps=NORM_EPS),
            nn.ReLU(inplace=True),
            SpectralNormConv2d(mid_channels, out_channels, kernel_size),
        )
        self.shortcut = nn.Sequential(
            nn.BatchNorm2d(in_channels, eps=NORM_EPS),
            SpectralNormConv2d(in_channels, out_channels, kernel_size),
        )

    def forward(self, x):
        _check_channels(x, self.in_channels, "SpectralResidualBlock")
        return self.double_conv(x) + self.shortcut(x)
