"""The six forecasters behind a single ``forward(rain, aux)`` interface."""
from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .blocks import CBAM, SPADE, DoubleConvDS, resize_bilinear
from .datamodel import N_AUX_CHANNELS, N_INPUT_FRAMES, N_TARGET_FRAMES, Sample
from .evolution import (
    N_POOLS,
    EvolutionNet,
    check_poolable,
    decoder_widths,
    encoder_widths,
    inject_features,
)
from .exceptions import ConfigurationError, ShapeError


class ModelVariant(str, enum.Enum):
    SMAAT_UNET = "smaat_unet"
    MAD_SMAAT_GNET = "mad_smaat_gnet"
    SMAAT_EVO = "smaat_evo"
    SMAAT_2STREAM = "smaat_2stream"
    EVO_NET = "evo_net"
    PERSISTENCE = "persistence"

    @property
    def uses_aux(self) -> bool:
        return self in (ModelVariant.MAD_SMAAT_GNET, ModelVariant.SMAAT_2STREAM)

    @property
    def uses_evolution(self) -> bool:
        return self in (ModelVariant.MAD_SMAAT_GNET, ModelVariant.SMAAT_EVO, ModelVariant.EVO_NET)

    @property
    def trainable(self) -> bool:
        return self is not ModelVariant.PERSISTENCE


VARIANT_NAMES = tuple(v.value for v in ModelVariant)

# Parameter counts reported for the reference models.
REFERENCE_PARAMETER_COUNTS = {
    ModelVariant.SMAAT_UNET: 4_110_400,
    ModelVariant.MAD_SMAAT_GNET: 7_453_676,
    ModelVariant.SMAAT_EVO: 3_745_936,
    ModelVariant.SMAAT_2STREAM: 4_766_624,
    ModelVariant.EVO_NET: 2_219_500,
    ModelVariant.PERSISTENCE: 0,
}


@dataclass
class ModelConfig:
    variant: ModelVariant
    in_rain_frames: int = N_INPUT_FRAMES
    out_frames: int = N_TARGET_FRAMES
    aux_channels: int = N_AUX_CHANNELS
    rain_base_channels: int | None = None
    aux_base_channels: int | None = None
    evo_base_channels: int = 16
    input_size: tuple = (64, 64)
    kernels_per_layer: int = 2
    cbam_reduction: int = 16
    spade_hidden: int = 64

    def __post_init__(self):
        self.variant = ModelVariant(self.variant)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.rain_base_channels is None:
            self.rain_base_channels = 64 if self.variant is ModelVariant.SMAAT_UNET else 32
        if self.aux_base_channels is None:
            self.aux_base_channels = 2 * self.rain_base_channels

    def validate(self):
        if self.variant.trainable:
            check_poolable(self.input_size, "model input")
        if self.variant.uses_aux and self.aux_channels != N_AUX_CHANNELS:
            raise ConfigurationError(f"{self.variant.value} needs {N_AUX_CHANNELS} auxiliary channels, got {self.aux_channels}")
        if self.out_frames != N_TARGET_FRAMES or self.in_rain_frames != N_INPUT_FRAMES:
            raise ConfigurationError("models take 4 input rain frames and predict 4 frames")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class AttentionEncoder(nn.Module):
    """Stem double-conv plus four [max-pool, DSC double-conv] stages; every
    level's output also passes through a CBAM, and the attended maps are
    what the decoder sees."""

    def __init__(self, in_channels, base_channels, kernels_per_layer=2, reduction=16):
        super().__init__()
        self.widths = encoder_widths(base_channels)
        self.inc = DoubleConvDS(in_channels, self.widths[0], kernels_per_layer=kernels_per_layer)
        self.downs = nn.ModuleList(
            DoubleConvDS(a, b, kernels_per_layer=kernels_per_layer)
            for a, b in zip(self.widths[:-1], self.widths[1:])
        )
        self.cbams = nn.ModuleList(CBAM(w, reduction) for w in self.widths)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        feats = [self.inc(x)]
        for down in self.downs:
            feats.append(down(self.pool(feats[-1])))
        return [cbam(f) for cbam, f in zip(self.cbams, feats)]


class UpDS(nn.Module):
    def __init__(self, in_channels, out_channels, kernels_per_layer=2):
        super().__init__()
        self.conv = DoubleConvDS(in_channels, out_channels, in_channels // 2, kernels_per_layer)

    def forward(self, x, skip):
        # upsample to the skip's exact size so odd sizes (57 vs 2*28) line up
        x = resize_bilinear(x, skip.shape[-2:])
        return self.conv(torch.cat([skip, x], dim=1))


# decoder SPADE sites, bottom-up: site i sits at encoder level N_POOLS - i
EVO_SITES = {0: "bottleneck", 1: "first_up", N_POOLS: "final"}


class SmaAtGNet(nn.Module):
    """Attention U-Net with optional auxiliary encoder and evolution network.

    Auxiliary features condition a SPADE layer at every decoder site; the
    evolution output conditions a second SPADE layer at the bottleneck,
    first-up and final sites only. With neither, this is the plain
    SmaAt-UNet.
    """

    def __init__(self, cfg: ModelConfig, use_aux: bool, use_evolution: bool):
        super().__init__()
        self.cfg = cfg
        self.use_aux = use_aux
        self.use_evolution = use_evolution
        kpl = cfg.kernels_per_layer
        self.rain_encoder = AttentionEncoder(cfg.in_rain_frames, cfg.rain_base_channels, kpl, cfg.cbam_reduction)
        widths = self.rain_encoder.widths
        if use_aux:
            self.aux_encoder = AttentionEncoder(cfg.aux_channels, cfg.aux_base_channels, kpl, cfg.cbam_reduction)
        if use_evolution:
            self.evolution = EvolutionNet(cfg.in_rain_frames, cfg.out_frames, cfg.evo_base_channels)

        ups, below = [], widths[-1]
        for skip, out in zip(reversed(widths[:-1]), decoder_widths(widths)):
            ups.append(UpDS(skip + below, out, kpl))
            below = out
        self.ups = nn.ModuleList(ups)
        site_channels = [widths[-1]] + decoder_widths(widths)

        aux_spades, evo_spades = {}, {}
        for site, norm_channels in enumerate(site_channels):
            if use_aux:
                cond = self.aux_encoder.widths[N_POOLS - site]
                aux_spades[str(site)] = SPADE(norm_channels, cond, cfg.spade_hidden)
            if use_evolution and site in EVO_SITES:
                evo_spades[str(site)] = SPADE(norm_channels, cfg.out_frames, cfg.spade_hidden)
        self.aux_spades = nn.ModuleDict(aux_spades)
        self.evo_spades = nn.ModuleDict(evo_spades)
        self.outc = nn.Conv2d(below, cfg.out_frames, 1)

    def _condition(self, site, x, aux_feats, evo_frames):
        key = str(site)
        if key in self.aux_spades:
            x = self.aux_spades[key](x, aux_feats[N_POOLS - site])
        if key in self.evo_spades:
            x = self.evo_spades[key](x, inject_features(evo_frames, EVO_SITES[site], x.shape[-2:]))
        return x

    def forward(self, rain, aux=None):
        skips = self.rain_encoder(rain)
        aux_feats = None
        if self.use_aux:
            if aux is None:
                raise ShapeError(f"this model needs auxiliary input of shape (B, {self.cfg.aux_channels}, H, W)")
            aux_feats = self.aux_encoder(aux)
        evo_frames = self.evolution(rain).frames if self.use_evolution else None

        x = self._condition(0, skips[-1], aux_feats, evo_frames)
        for i, up in enumerate(self.ups):
            x = up(x, skips[-2 - i])
            x = self._condition(i + 1, x, aux_feats, evo_frames)
        return self.outc(x)


class EvoNetForecaster(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.evolution = EvolutionNet(cfg.in_rain_frames, cfg.out_frames, cfg.evo_base_channels)

    def forward(self, rain, aux=None):
        return self.evolution(rain).frames


class Persistence(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, rain, aux=None):
        last = rain[:, -1:]
        return last.expand(-1, self.cfg.out_frames, -1, -1).clone()


class Forecaster(nn.Module):
    """Uniform wrapper: validates shapes and carries the config and variant."""

    def __init__(self, cfg: ModelConfig, net: nn.Module):
        super().__init__()
        self.cfg = cfg
        self.net = net

    @property
    def variant(self) -> ModelVariant:
        return self.cfg.variant

    def forward(self, rain, aux=None):
        cfg = self.cfg
        if rain.dim() != 4 or rain.shape[1] != cfg.in_rain_frames:
            raise ShapeError(f"rain input must be (B, {cfg.in_rain_frames}, H, W), got {tuple(rain.shape)}")
        if tuple(rain.shape[-2:]) != cfg.input_size:
            raise ShapeError(f"rain input is {tuple(rain.shape[-2:])} but the model was built for {cfg.input_size}")
        if cfg.variant.uses_aux:
            if aux is None or aux.dim() != 4 or aux.shape[1] != cfg.aux_channels:
                got = None if aux is None else tuple(aux.shape)
                raise ShapeError(f"auxiliary input must be (B, {cfg.aux_channels}, H, W), got {got}")
            if aux.shape[0] != rain.shape[0] or aux.shape[-2:] != rain.shape[-2:]:
                raise ShapeError(f"auxiliary input {tuple(aux.shape)} does not match rain input {tuple(rain.shape)}")
        return self.net(rain, aux if cfg.variant.uses_aux else None)

    @property
    def evolution(self) -> EvolutionNet | None:
        return getattr(self.net, "evolution", None)


def build_model(cfg: ModelConfig, seed: int = 0) -> Forecaster:
    """Build a forecaster with deterministic initialization for ``seed``."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        v = cfg.variant
        if v is ModelVariant.PERSISTENCE:
            net = Persistence(cfg)
        elif v is ModelVariant.EVO_NET:
            net = EvoNetForecaster(cfg)
        else:
            net = SmaAtGNet(cfg, use_aux=v.uses_aux, use_evolution=v.uses_evolution)
    return Forecaster(cfg, net)


def count_parameters(model: nn.Module) -> tuple[int, "OrderedDict[str, int]"]:
    """Trainable scalar count, total and per top-level submodule."""
    breakdown: OrderedDict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        parts = name.split(".")
        if parts[0] == "net":
            parts = parts[1:]
        key = parts[0] if len(parts) > 1 else "(own)"
        breakdown[key] = breakdown.get(key, 0) + p.numel()
    return sum(breakdown.values()), breakdown


def sample_tensors(samples, dtype=torch.float32):
    """Stack samples into ``(rain_in, aux, target)`` tensors."""
    if isinstance(samples, Sample):
        samples = [samples]
    rain = torch.from_numpy(np.stack([s.rain_in for s in samples])).to(dtype)
    aux = torch.from_numpy(np.stack([s.aux_stack() for s in samples])).to(dtype)
    target = torch.from_numpy(np.stack([s.rain_target for s in samples])).to(dtype)
    return rain, aux, target


@torch.no_grad()
def forward(model: Forecaster, sample: Sample) -> np.ndarray:
    """Forecast the 4 target frames of one normalized sample, ``(4, H, W)``."""
    if tuple(sample.shape) != model.cfg.input_size:
        raise ShapeError(f"sample is {sample.shape} but the model was built for {model.cfg.input_size}")
    was_training = model.training
    model.eval()
    try:
        rain, aux, _ = sample_tensors(sample, next(model.parameters(), torch.empty(0)).dtype)
        return model(rain, aux)[0].cpu().numpy()
    finally:
        model.train(was_training)
