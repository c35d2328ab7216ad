"""Advection-based evolution network.

A U-Net over the input rain frames with two decoders: one predicts a motion
field per future step, the other an intensity residual per step scaled by a
learnable vector ``gamma``. The evolution operator advects the latest frame
with the motion field (backward bilinear warp, border clamped), adds the
residual, and repeats autoregressively.

Motion is in pixels per step at native resolution; ``u`` is horizontal
(columns, +x to the right) and ``v`` vertical (rows, +y downward).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SpectralResidualBlock, resize_bilinear
from .exceptions import ConfigurationError, InvalidInputError, ShapeError

N_POOLS = 4
MIN_SPATIAL = 2 ** N_POOLS


def check_poolable(size, where="input"):
    h, w = (int(s) for s in size)
    if min(h, w) < MIN_SPATIAL:
        raise ConfigurationError(f"{where} size {h}x{w} is too small for {N_POOLS} pooling stages (minimum {MIN_SPATIAL})")


def encoder_sizes(size) -> list[tuple[int, int]]:
    """Spatial sizes at each encoder level, e.g. 115 -> 57 -> 28 -> 14 -> 7."""
    h, w = (int(s) for s in size)
    sizes = [(h, w)]
    for _ in range(N_POOLS):
        h, w = h // 2, w // 2
        sizes.append((h, w))
    return sizes


@dataclass
class MotionField:
    u: torch.Tensor  # (B, T, H, W)
    v: torch.Tensor  # (B, T, H, W)

    @property
    def steps(self) -> int:
        return self.u.shape[1]

    @classmethod
    def from_channels(cls, motion: torch.Tensor) -> "MotionField":
        """Split a ``(B, 2T, H, W)`` head output laid out as u1, v1, u2, v2, ..."""
        b, c, h, w = motion.shape
        m = motion.reshape(b, c // 2, 2, h, w)
        return cls(m[:, :, 0], m[:, :, 1])


@dataclass
class IntensityResidual:
    raw: torch.Tensor  # (B, T, H, W), head output before scaling
    gamma: torch.Tensor  # (T,)

    @property
    def steps(self) -> int:
        return self.raw.shape[1]

    @property
    def scaled(self) -> torch.Tensor:
        return self.raw * self.gamma.reshape(1, -1, 1, 1)


@dataclass
class EvolutionOutput:
    frames: torch.Tensor  # (B, T, H, W)
    motion: MotionField
    residual: IntensityResidual


def warp_bilinear(frame: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``frame`` by the displacement ``(u, v)``.

    ``out[..., y, x] = frame(y - v[..., y, x], x - u[..., y, x])`` sampled
    bilinearly, with sample coordinates clamped to the grid. All arguments
    share the trailing ``(H, W)`` dims and broadcast over leading dims.
    Integer displacements reproduce an index shift exactly.
    """
    if frame.shape[-2:] != u.shape[-2:] or frame.shape[-2:] != v.shape[-2:]:
        raise ShapeError(f"warp: frame {tuple(frame.shape)} and motion {tuple(u.shape)}/{tuple(v.shape)} not congruent")
    frame, u, v = torch.broadcast_tensors(frame, u, v)
    h, w = frame.shape[-2:]
    ys = torch.arange(h, dtype=frame.dtype, device=frame.device).reshape(h, 1)
    xs = torch.arange(w, dtype=frame.dtype, device=frame.device).reshape(1, w)
    sy = (ys - v).clamp(0, h - 1)
    sx = (xs - u).clamp(0, w - 1)
    # non-finite coordinates keep safe indices; the NaN still reaches the output via the weights
    y0 = torch.nan_to_num(sy.detach().floor(), nan=0.0).clamp(0, h - 1)
    x0 = torch.nan_to_num(sx.detach().floor(), nan=0.0).clamp(0, w - 1)
    wy = sy - y0
    wx = sx - x0
    y0 = y0.long()
    x0 = x0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)

    flat = frame.reshape(*frame.shape[:-2], h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(*yi.shape[:-2], h * w)
        return torch.gather(flat, -1, idx).reshape(frame.shape)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def evolution_rollout(last_frame: torch.Tensor, motion: MotionField, residual: IntensityResidual) -> torch.Tensor:
    """Advect ``last_frame`` (B, H, W) step by step; returns (B, T, H, W)."""
    if motion.steps != residual.steps or residual.gamma.numel() != residual.steps:
        raise InvalidInputError(
            f"step mismatch: motion has {motion.steps} steps, residual {residual.steps}, gamma {residual.gamma.numel()}"
        )
    if last_frame.dim() == 4:
        last_frame = last_frame[:, -1]
    scaled = residual.scaled
    frames = []
    current = last_frame
    for t in range(motion.steps):
        current = warp_bilinear(current, motion.u[:, t], motion.v[:, t]) + scaled[:, t]
        frames.append(current)
    return torch.stack(frames, dim=1)


INJECTION_LEVELS = ("bottleneck", "first_up", "final")


def inject_features(evo_frames: torch.Tensor, level: str, size=None) -> torch.Tensor:
    """Bring evolution output to a decoder level for SPADE conditioning.

    ``bottleneck`` and ``first_up`` max-pool to ``size`` (the destination
    level's exact dims, a factor 16 / 8 reduction on power-of-two inputs);
    ``final`` passes the frames through at native resolution.
    """
    if level not in INJECTION_LEVELS:
        raise ConfigurationError(f"unknown injection level {level!r}; expected one of {INJECTION_LEVELS}")
    if level == "final":
        return evo_frames
    if size is None:
        h, w = evo_frames.shape[-2:]
        factor = 16 if level == "bottleneck" else 8
        size = encoder_sizes((h, w))[N_POOLS if factor == 16 else N_POOLS - 1]
    return F.adaptive_max_pool2d(evo_frames, tuple(int(s) for s in size))


class _Up(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = SpectralResidualBlock(in_channels, out_channels, in_channels // 2)

    def forward(self, x, skip):
        x = resize_bilinear(x, skip.shape[-2:])
        return self.conv(torch.cat([skip, x], dim=1))


def decoder_widths(widths):
    """Output channels of the four up stages for encoder ``widths``.

    Each up stage halves the concatenated channel count so that the
    upsampled path matches the next skip connection; the last stage returns
    to the stem width.
    """
    levels = len(widths) - 1
    return [widths[max(k - 1, 0)] for k in reversed(range(levels))]


def encoder_widths(base):
    """Encoder channels stem-to-bottleneck; the bottleneck keeps the width
    of the level above it (bilinear upsampling carries no channel change)."""
    widths = [base * 2 ** i for i in range(N_POOLS)]
    return widths + [widths[-1]]


class _Decoder(nn.Module):
    def __init__(self, widths, out_channels):
        super().__init__()
        ups = []
        below = widths[-1]
        for skip, out in zip(reversed(widths[:-1]), decoder_widths(widths)):
            ups.append(_Up(skip + below, out))
            below = out
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv2d(below, out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            x = up(x, skip)
        return self.out(x)


class EvolutionNet(nn.Module):
    """Evolution network: shared encoder, motion decoder and intensity decoder."""

    def __init__(self, in_frames=4, horizon=4, base_channels=16):
        super().__init__()
        self.in_frames = in_frames
        self.horizon = horizon
        widths = encoder_widths(base_channels)
        self.widths = widths
        self.inc = SpectralResidualBlock(in_frames, widths[0])
        self.downs = nn.ModuleList(SpectralResidualBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.intensity_decoder = _Decoder(widths, horizon)
        self.motion_decoder = _Decoder(widths, 2 * horizon)
        self.gamma = nn.Parameter(torch.zeros(horizon))

    def encode(self, rain):
        feats = [self.inc(rain)]
        for down in self.downs:
            feats.append(down(F.max_pool2d(feats[-1], 2)))
        return feats

    def predict_fields(self, rain: torch.Tensor) -> tuple[MotionField, IntensityResidual]:
        if rain.dim() != 4 or rain.shape[1] != self.in_frames:
            raise ShapeError(f"evolution net expects (B, {self.in_frames}, H, W), got {tuple(rain.shape)}")
        check_poolable(rain.shape[-2:], "evolution net input")
        feats = self.encode(rain)
        motion = MotionField.from_channels(self.motion_decoder(feats))
        residual = IntensityResidual(self.intensity_decoder(feats), self.gamma)
        return motion, residual

    def forward(self, rain: torch.Tensor) -> EvolutionOutput:
        motion, residual = self.predict_fields(rain)
        frames = evolution_rollout(rain[:, -1], motion, residual)
        return EvolutionOutput(frames, motion, residual)


def evo_predict_fields(net: EvolutionNet, rain_in: torch.Tensor):
    return net.predict_fields(rain_in)
