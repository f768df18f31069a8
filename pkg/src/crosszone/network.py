"""Full depth-completion network and its training loss.

RGB pyramid encoder -> per-zone depth-distribution encoder -> three fusion
stages (coarse to fine) -> adaptive-bins refinement head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import FusionRound, PropagationConfig
from .zone_model import sample_frame, zone_index_map

STRIDES = (1, 2, 4, 8, 16)
FUSION_STRIDES = (16, 8, 4)


@dataclass
class NetworkConfig:
    """Architecture hyper-parameters.

    ``encoder_channels`` lists widths from the finest (stride 1) to the
    coarsest (stride 16) level; ``fusion_channels`` lists stages from the
    coarsest (stride 16) to the finest (stride 4).
    """

    encoder_channels: tuple[int, ...] = (16, 24, 32, 48, 64)
    fusion_channels: tuple[int, ...] = (64, 48, 32)
    tof_hidden: tuple[int, ...] = (32, 64)
    token_dim: int = 64
    samples_per_zone: int = 16
    tokens_per_zone: int = 4
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    bins: int = 64
    d_min: float = 0.1
    d_max: float = 4.0
    height: int = 128
    width: int = 160
    rounds_per_stage: int = 2

    def __post_init__(self):
        if isinstance(self.propagation, dict):
            self.propagation = PropagationConfig(**self.propagation)
        self.encoder_channels = tuple(self.encoder_channels)
        self.fusion_channels = tuple(self.fusion_channels)
        self.tof_hidden = tuple(self.tof_hidden)
        self.validate()

    def validate(self):
        if self.height % 16 or self.width % 16:
            raise ValueError(f"input resolution {self.height}x{self.width} must be divisible by 16 "
                             "(supported toy sizes include 128x160 and 64x80; full size 480x640)")
        if len(self.encoder_channels) != 5:
            raise ValueError("encoder needs five levels")
        if len(self.fusion_channels) != 3:
            raise ValueError("there are exactly three fusion stages")
        if len(self.propagation.kernel_schedule) != 3:
            raise ValueError("kernel schedule needs one entry per fusion stage")
        if self.tokens_per_zone < 1:
            raise ValueError("need at least one token per zone")
        if not 0 <= self.d_min < self.d_max:
            raise ValueError("need 0 <= d_min < d_max")
        self.propagation.validate()

    def stage_shapes(self) -> list[tuple[int, int]]:
        return [(self.height // s, self.width // s) for s in FUSION_STRIDES]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["propagation"] = self.propagation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        return cls(**d)


@dataclass
class LossParams:
    alpha: float = 10.0
    lam: float = 0.85

    def __post_init__(self):
        if self.alpha <= 0 or not 0 <= self.lam <= 1:
            raise ValueError("need alpha > 0 and 0 <= lam <= 1")


def si_loss(pred, gt, valid, params: LossParams = LossParams()):
    """Scaled scale-invariant log loss of one sample.

    ``alpha * sqrt(mean(g^2) - lam * mean(g)^2)`` with ``g = log pred - log gt``
    over valid pixels; the radicand is clamped at zero.
    """
    valid = valid.bool()
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid pixels")
    g = torch.log(pred[valid]) - torch.log(gt[valid])
    radicand = (g * g).sum() / n - params.lam * g.sum() ** 2 / n ** 2
    return params.alpha * torch.sqrt(radicand.clamp_min(0.0))


def batch_si_loss(pred, gt, valid, params: LossParams = LossParams()):
    """Mean of per-sample :func:`si_loss` over a batch."""
    losses = [si_loss(p, g, v, params) for p, g, v in zip(pred, gt, valid)]
    return torch.stack(losses).mean()


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GELU())


class RGBEncoder(nn.Module):
    """Small strided-conv pyramid producing maps at strides 1, 2, 4, 8, 16."""

    def __init__(self, channels=(16, 24, 32, 48, 64)):
        super().__init__()
        c = channels
        self.levels = nn.ModuleList([
            _conv(3, c[0]),
            _conv(c[0], c[1], 2),
            nn.Sequential(_conv(c[1], c[2], 2), _conv(c[2], c[2])),
            nn.Sequential(_conv(c[2], c[3], 2), _conv(c[3], c[3])),
            nn.Sequential(_conv(c[3], c[4], 2), _conv(c[4], c[4])),
        ])

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image size {h}x{w} is not divisible by 16")
        feats = []
        x = image - 0.5
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


class ToFEncoder(nn.Module):
    """Shared per-zone MLP over the sampled depth values (no spatial downsampling).

    Each zone yields ``tokens_per_zone`` tokens so that the patchwise attention
    in the fusion stages has more than one key per zone to weigh.
    """

    def __init__(self, samples_per_zone=16, hidden=(32, 64), token_dim=64, depth_scale=4.0,
                 tokens_per_zone=4):
        super().__init__()
        dims = (samples_per_zone,) + tuple(hidden)
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        layers.append(nn.Linear(dims[-1], token_dim * tokens_per_zone))
        self.mlp = nn.Sequential(*layers)
        self.depth_scale = depth_scale
        self.tokens_per_zone = tokens_per_zone

    def forward(self, values, valid):
        """values (B, Z, S) meters, valid (B, Z) -> tokens (B, Z, T, D), zero for invalid zones."""
        tokens = self.mlp(values / self.depth_scale).unflatten(-1, (self.tokens_per_zone, -1))
        return tokens * valid[..., None, None].to(tokens.dtype)


def encode_tof(encoder: ToFEncoder, samples) -> torch.Tensor:
    """Tokens (n_valid, T, D) for the valid zones of one :class:`ZoneSampleSet`, row-major order."""
    valid = torch.as_tensor(samples.valid.ravel())
    values = torch.as_tensor(samples.values.reshape(valid.numel(), -1),
                             dtype=next(encoder.parameters()).dtype)
    return encoder(values[valid][None], torch.ones(1, int(valid.sum()), dtype=torch.bool))[0]


def bins_to_depth(widths, probs, d_min, d_max):
    """Adaptive-bins regression.

    widths (B, K) positive, probs (B, K, ...) on the simplex along dim 1.
    Returns (depth (B, ...), centers (B, K)).
    """
    w = widths / widths.sum(dim=1, keepdim=True)
    edges = d_min + (d_max - d_min) * torch.cumsum(w, dim=1)
    edges = torch.cat([torch.full_like(edges[:, :1], d_min), edges], dim=1)
    centers = 0.5 * (edges[:, :-1] + edges[:, 1:])
    shape = centers.shape + (1,) * (probs.dim() - 2)
    depth = (probs * centers.view(shape)).sum(dim=1)
    return depth, centers


class RefinementHead(nn.Module):
    """Predicts image-adaptive bin widths (global) and per-pixel bin probabilities."""

    def __init__(self, channels, bins=64, d_min=0.1, d_max=4.0, hidden=128):
        super().__init__()
        self.d_min, self.d_max = d_min, d_max
        self.global_branch = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, bins))
        self.pixel_branch = nn.Sequential(_conv(channels, channels), nn.Conv2d(channels, bins, 1))

    def forward(self, x, out_size=None):
        widths = F.softplus(self.global_branch(x.mean(dim=(2, 3)))) + 1e-3
        probs = torch.softmax(self.pixel_branch(x), dim=1)
        depth, centers = bins_to_depth(widths, probs, self.d_min, self.d_max)
        if out_size is not None and tuple(out_size) != tuple(depth.shape[-2:]):
            # bilinear weights are convex, so this equals weighting upsampled probabilities
            depth = F.interpolate(depth[:, None], size=out_size, mode="bilinear", align_corners=False)[:, 0]
        return depth, centers


class FusionStage(nn.Module):
    def __init__(self, stage, prev_channels, skip_channels, channels, token_dim, config: NetworkConfig):
        super().__init__()
        self.stage = stage
        self.proj = _conv((prev_channels or 0) + skip_channels, channels)
        self.rounds = nn.ModuleList(
            FusionRound(channels, token_dim, stage, config.propagation) for _ in range(config.rounds_per_stage))

    def forward(self, prev, skip, tokens, index_map):
        if prev is not None:
            if prev.shape[-2] * 2 != skip.shape[-2] or prev.shape[-1] * 2 != skip.shape[-1]:
                raise ValueError(f"stage {self.stage}: previous map {tuple(prev.shape[-2:])} is not half "
                                 f"of skip map {tuple(skip.shape[-2:])}")
            prev = F.interpolate(prev, scale_factor=2, mode="bilinear", align_corners=False)
            skip = torch.cat([prev, skip], dim=1)
        x = self.proj(skip)
        mask = index_map >= 0
        for r in self.rounds:
            x = r(x, tokens, index_map, mask)
        return x


class DepthCompletionNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        enc = config.encoder_channels
        self.rgb = RGBEncoder(enc)
        self.tof = ToFEncoder(config.samples_per_zone, config.tof_hidden, config.token_dim, config.d_max,
                              config.tokens_per_zone)
        skips = (enc[4], enc[3], enc[2])
        prevs = (None,) + config.fusion_channels[:2]
        self.stages = nn.ModuleList(
            FusionStage(s, prevs[s], skips[s], config.fusion_channels[s], config.token_dim, config)
            for s in range(3))
        self.head = RefinementHead(config.fusion_channels[2], config.bins, config.d_min, config.d_max)

    def forward(self, rgb, tof_values, tof_valid, index_maps):
        """rgb (B,3,H,W); tof_values (B,Z,S); tof_valid (B,Z); index_maps: per-stage (B,h,w) zone ids."""
        feats = self.rgb(rgb)
        tokens = self.tof(tof_values, tof_valid)
        skips = (feats[4], feats[3], feats[2])
        x = None
        for stage, skip, idx in zip(self.stages, skips, index_maps):
            x = stage(x, skip, tokens, idx)
        return self.head(x, out_size=rgb.shape[-2:])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_inputs(samples, config: NetworkConfig, dtype=torch.float32):
    """Stack samples into network inputs: (rgb, tof_values, tof_valid, index_maps)."""
    rgb = torch.as_tensor(np.stack([s.rgb for s in samples]), dtype=dtype)
    sets = [sample_frame(s.tof, config.samples_per_zone) for s in samples]
    values = torch.as_tensor(np.stack([z.values.reshape(-1, config.samples_per_zone) for z in sets]),
                             dtype=dtype)
    valid = torch.as_tensor(np.stack([z.valid.ravel() for z in sets]))
    index_maps = [
        torch.as_tensor(np.stack([zone_index_map(s.layout, s.tof, h, w) for s in samples]))
        for h, w in config.stage_shapes()
    ]
    return rgb, values, valid, index_maps


def forward(model: DepthCompletionNet, sample) -> np.ndarray:
    """Predict an (H, W) depth map in meters for one sample."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        depth, _ = model(*build_inputs([sample], model.config, dtype))
    return depth[0].cpu().numpy()
