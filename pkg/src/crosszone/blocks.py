"""Propagation blocks used inside each fusion stage.

All blocks take feature maps shaped ``(B, C, H, W)``. Zone membership is
given either as a boolean in-zone mask ``(B, H, W)`` or as a zone index map
``(B, H, W)`` holding the row-major zone id of each pixel (``-1`` outside
valid zones).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

MODES = ("A", "B", "C", "D", "baseline", "dapm_only", "lkpm_only")
DEFAULT_SCHEDULE = (7, 15, 31)


# floor for attention denominators; real rows are sums of positive terms far above it,
# and a squared floor stays representable in float32 so backward never hits inf * 0
DEN_EPS = 1e-6


def phi(x: torch.Tensor) -> torch.Tensor:
    """Positive feature map of linear attention."""
    return F.elu(x) + 1.0


def linear_cross_attention(queries, keys, values, num_heads: int, key_mask=None):
    """Multi-head linear attention, cost linear in the token counts.

    Shapes are ``(..., N, d)`` for queries, ``(..., M, d)`` for keys and
    ``(..., M, dv)`` for values. Per head the output for query ``i`` is
    ``phi(q_i) . sum_j phi(k_j) v_j^T / (phi(q_i) . sum_j phi(k_j))``.
    ``key_mask`` ``(..., M)`` removes keys from the sums; rows whose mask is
    empty produce zeros and must be handled by the caller.
    """
    if keys.shape[-2] == 0:
        raise ValueError("no key tokens")
    d, dv = queries.shape[-1], values.shape[-1]
    if d % num_heads or dv % num_heads or keys.shape[-1] != d:
        raise ValueError("feature dims must match and be divisible by num_heads")
    q = phi(queries).unflatten(-1, (num_heads, d // num_heads))
    k = phi(keys).unflatten(-1, (num_heads, d // num_heads))
    v = values.unflatten(-1, (num_heads, dv // num_heads))
    if key_mask is not None:
        k = k * key_mask[..., None, None].to(k.dtype)
    kv = torch.einsum("...mhd,...mhe->...hde", k, v)
    ksum = k.sum(dim=-3)
    num = torch.einsum("...nhd,...hde->...nhe", q, kv)
    den = torch.einsum("...nhd,...hd->...nh", q, ksum)
    out = num / den.clamp_min(DEN_EPS).unsqueeze(-1)
    return out.flatten(-2)


def _tokens(x):
    return x.flatten(2).transpose(1, 2)


def _untokens(t, h, w):
    return t.transpose(1, 2).unflatten(2, (h, w))


def _degenerate(mask):
    """Per-sample flag: mask empty or full, so there is nothing to propagate."""
    n = mask.flatten(1).sum(1)
    return (n == 0) | (n == mask[0].numel())


class DAPM(nn.Module):
    """Direct cross-attention from in-zone pixels (keys/values) to outside-zone pixels (queries).

    Forward: attention updates outside-zone tokens only, the result is
    concatenated with the input and merged back to ``channels`` by a 3x3
    convolution, then a 3x3 convolution and a residual skip follow. Samples
    whose mask is empty or full skip the attention and merge steps.
    """

    def __init__(self, channels: int, num_heads: int = 4):
        super().__init__()
        if channels % num_heads:
            raise ValueError("channels must be divisible by num_heads")
        self.num_heads = num_heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.merge = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def attend(self, x, mask):
        """Cross-attention sub-step; in-zone tokens are returned untouched."""
        _, _, h, w = x.shape
        t = _tokens(x)
        m = mask.flatten(1)
        out = linear_cross_attention(self.q(t), self.k(t), self.v(t), self.num_heads, key_mask=m)
        # samples without in-zone keys have nothing to propagate
        keep = m | ~m.any(dim=1, keepdim=True)
        out = torch.where(keep[..., None], t, out)
        return _untokens(out, h, w)

    def forward(self, x, mask):
        if mask.shape != (x.shape[0],) + x.shape[2:]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match features {tuple(x.shape)}")
        skip = _degenerate(mask)
        if bool(skip.all()):
            h = x
        else:
            fused = self.merge(torch.cat([self.attend(x, mask), x], dim=1))
            h = torch.where(skip[:, None, None, None], x, fused)
        return self.conv(h) + x

    @torch.no_grad()
    def attention_weights(self, x, mask, probe: tuple[int, int]):
        """Normalized per-key weights of one query pixel, head-averaged, as an (H, W) map.

        ``x`` is a single feature map ``(C, H, W)`` and ``mask`` ``(H, W)``.
        """
        r, c = probe
        if bool(mask[r, c]):
            raise ValueError(f"probe pixel {probe} lies inside the zone area")
        if not bool(mask.any()):
            raise ValueError("mask has no in-zone pixels")
        t = _tokens(x[None])[0]
        keys = t[mask.flatten()]
        h = self.num_heads
        q = phi(self.q(t[r * x.shape[2] + c])).unflatten(-1, (h, -1))
        k = phi(self.k(keys)).unflatten(-1, (h, -1))
        scores = torch.einsum("hd,mhd->hm", q, k)
        weights = (scores / scores.sum(dim=1, keepdim=True)).mean(dim=0)
        out = torch.zeros(mask.shape, dtype=x.dtype)
        out[mask] = weights
        return out


class ChannelNorm(nn.Module):
    """LayerNorm over the channel vector of each pixel."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


FFT_MIN_KERNEL = 13


def depthwise_conv2d(x, weight, bias=None, method: str = "auto"):
    """Zero-padded, shape-preserving depthwise cross-correlation with an odd s x s kernel.

    ``method="fft"`` evaluates the same operator through real FFTs, which on
    CPU is an order of magnitude faster for s >= 13; ``"auto"`` picks it for
    kernels of at least ``FFT_MIN_KERNEL``.
    """
    s = weight.shape[-1]
    if method == "auto":
        method = "fft" if s >= FFT_MIN_KERNEL else "direct"
    if method == "direct":
        return F.conv2d(x, weight, bias, padding=s // 2, groups=x.shape[1])
    h, w = x.shape[-2:]
    p = s // 2
    size = (h + s - 1, w + s - 1)
    prod = torch.fft.rfft2(x, s=size) * torch.fft.rfft2(weight[:, 0].flip(-2, -1), s=size)
    y = torch.fft.irfft2(prod, s=size)[..., p:p + h, p:p + w]
    if bias is not None:
        y = y + bias[:, None, None]
    return y


class LKPM(nn.Module):
    """Large-kernel residual block: depthwise s x s conv, norm, pointwise MLP."""

    def __init__(self, channels: int, kernel_size: int = 31, expansion: int = 4, conv_method: str = "auto"):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd integer, got {kernel_size}")
        self.kernel_size = kernel_size
        self.conv_method = conv_method
        self.dw = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels)
        self.norm = ChannelNorm(channels)
        self.pw1 = nn.Conv2d(channels, expansion * channels, 1)
        self.act = nn.GELU(approximate="none")
        self.pw2 = nn.Conv2d(expansion * channels, channels, 1)

    def depthwise(self, x):
        return depthwise_conv2d(x, self.dw.weight, self.dw.bias, self.conv_method)

    def forward(self, x):
        return x + self.pw2(self.act(self.pw1(self.norm(self.depthwise(x)))))


class DToImage(nn.Module):
    """Patchwise cross-attention from zone tokens (keys/values) to RGB pixels (queries).

    Each in-zone pixel attends only to the tokens of its own zone; other
    pixels pass through. The attended map is concatenated with the input and
    merged back to ``channels`` by a 3x3 convolution.
    """

    def __init__(self, channels: int, token_dim: int, num_heads: int = 4):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(token_dim, channels)
        self.v = nn.Linear(token_dim, channels)
        self.merge = nn.Conv2d(2 * channels, channels, 3, padding=1)

    @torch.no_grad()
    def init_identity(self):
        """Set the merge conv to copy the pass-through half of its input."""
        c = self.merge.out_channels
        self.merge.weight.zero_()
        self.merge.bias.zero_()
        self.merge.weight[torch.arange(c), c + torch.arange(c), 1, 1] = 1.0

    def attend(self, x, tokens, index_map):
        """tokens: (B, Z, D) or (B, Z, T, D) for T tokens per zone."""
        if tokens.dim() == 3:
            tokens = tokens.unsqueeze(2)
        b, c, h, w = x.shape
        if index_map.shape != (b, h, w):
            raise ValueError("index map does not match feature map")
        t = _tokens(x)
        idx = index_map.flatten(1)
        inside = idx >= 0
        if tokens.shape[1] == 0 or not bool(inside.any()):
            return x
        nh = self.num_heads
        q = phi(self.q(t)).unflatten(-1, (nh, -1))              # B P h d
        k = phi(self.k(tokens)).unflatten(-1, (nh, -1))         # B Z T h d
        v = self.v(tokens).unflatten(-1, (nh, -1))              # B Z T h e
        kv = torch.einsum("bzthd,bzthe->bzhde", k, v)
        ks = k.sum(dim=2)
        gather = idx.clamp_min(0)
        kv_p = kv[torch.arange(b)[:, None], gather]             # B P h d e
        ks_p = ks[torch.arange(b)[:, None], gather]             # B P h d
        num = torch.einsum("bphd,bphde->bphe", q, kv_p)
        den = (q * ks_p).sum(-1, keepdim=True)
        # pixels outside the zones are discarded below; keep their branch finite for backward
        den = torch.where(inside[..., None, None], den, torch.ones_like(den)).clamp_min(DEN_EPS)
        out = (num / den).flatten(-2)
        out = torch.where(inside[..., None], out, t)
        return _untokens(out, h, w)

    def forward(self, x, tokens, index_map):
        return self.merge(torch.cat([self.attend(x, tokens, index_map), x], dim=1))


class SelfAttentionBlend(nn.Module):
    """Global linear self-attention layer with the DAPM tail and a feed-forward sublayer."""

    def __init__(self, channels: int, num_heads: int = 4, ffn_ratio: int = 8):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.merge = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        if ffn_ratio:
            self.ffn = nn.Sequential(
                nn.Conv2d(channels, ffn_ratio * channels, 1),
                nn.GELU(approximate="none"),
                nn.Conv2d(ffn_ratio * channels, channels, 1),
            )
        else:
            self.ffn = None

    def attend(self, x):
        _, _, h, w = x.shape
        t = _tokens(x)
        return _untokens(linear_cross_attention(self.q(t), self.k(t), self.v(t), self.num_heads), h, w)

    def forward(self, x):
        y = self.conv(self.merge(torch.cat([self.attend(x), x], dim=1))) + x
        if self.ffn is not None:
            y = y + self.ffn(y)
        return y


@dataclass
class PropagationConfig:
    """Which propagation blocks run in each fusion round, and how they are sized."""

    mode: str = "A"
    kernel_schedule: tuple[int, ...] = DEFAULT_SCHEDULE
    num_heads: int = 4
    lkpm_expansion: int = 4
    sa_ffn_ratio: int = 8

    def __post_init__(self):
        self.kernel_schedule = tuple(int(s) for s in self.kernel_schedule)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown propagation mode {self.mode!r}; expected one of {MODES}")
        if not self.kernel_schedule or any(s < 1 or s % 2 == 0 for s in self.kernel_schedule):
            raise ValueError(f"kernel schedule entries must be odd, got {self.kernel_schedule}")

    @property
    def uses_dapm(self) -> bool:
        return self.mode in ("A", "B", "C", "D", "dapm_only")

    @property
    def uses_lkpm(self) -> bool:
        return self.mode in ("A", "B", "C", "D", "lkpm_only")

    @property
    def uses_self_attention(self) -> bool:
        return self.mode != "D"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_schedule"] = list(self.kernel_schedule)
        return d


def kernel_for_stage(schedule, stage: int) -> int:
    """Depthwise kernel size for a fusion stage; stage 0 is the coarsest."""
    if not 0 <= stage < len(schedule):
        raise IndexError(f"stage {stage} out of range for schedule {tuple(schedule)}")
    return int(schedule[stage])


class FusionRound(nn.Module):
    """One round of D-to-image fusion, mode-dependent propagation, and self-attention."""

    def __init__(self, channels: int, token_dim: int, stage: int, config: PropagationConfig):
        super().__init__()
        config.validate()
        self.mode = config.mode
        self.d2i = DToImage(channels, token_dim, config.num_heads)
        self.dapm = DAPM(channels, config.num_heads) if config.uses_dapm else None
        self.lkpm = (LKPM(channels, kernel_for_stage(config.kernel_schedule, stage), config.lkpm_expansion)
                     if config.uses_lkpm else None)
        self.sa = (SelfAttentionBlend(channels, config.num_heads, config.sa_ffn_ratio)
                   if config.uses_self_attention else None)

    def propagate(self, x, mask):
        mode = self.mode
        if mode in ("A", "D"):
            return self.lkpm(self.dapm(x, mask))
        if mode == "B":
            return self.dapm(self.lkpm(x), mask)
        if mode == "C":
            return self.dapm(x, mask) + self.lkpm(x)
        if mode == "dapm_only":
            return self.dapm(x, mask)
        if mode == "lkpm_only":
            return self.lkpm(x)
        return x

    def forward(self, x, tokens, index_map, mask=None):
        if mask is None:
            mask = index_map >= 0
        x = self.d2i(x, tokens, index_map)
        x = self.propagate(x, mask)
        if self.sa is not None:
            x = self.sa(x)
        return x


def combine_propagation(x, mask, index_map, tof_tokens, fusion_round: FusionRound):
    """Functional alias of :meth:`FusionRound.forward`."""
    return fusion_round(x, tof_tokens, index_map, mask)
