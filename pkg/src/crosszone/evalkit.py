"""Depth metrics with an in-zone / outside-zone split, error maps, and
mechanism diagnostics (effective receptive fields, attention maps, kernels).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
from PIL import Image

REGIONS = ("all", "in_zone", "out_zone")
SIDECAR_MAGIC = b"CFPRAW\0\0"
METRIC_KEYS = ("delta1", "delta2", "delta3", "rel", "rmse", "log10")


@dataclass
class MetricsRecord:
    delta1: float
    delta2: float
    delta3: float
    rel: float
    rmse: float
    log10: float
    n_pixels: int
    region: str = "all"

    @classmethod
    def empty(cls, region: str) -> MetricsRecord:
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, nan, 0, region)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in METRIC_KEYS:
            if math.isnan(d[k]):
                d[k] = None  # JSON has no NaN
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricsRecord:
        d = dict(d)
        for k in METRIC_KEYS:
            if d[k] is None:
                d[k] = float("nan")
        return cls(**d)


def compute_metrics(pred, gt, valid, region: str = "all") -> MetricsRecord:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    p, g = pred[valid], gt[valid]
    if p.size == 0:
        raise ValueError("no valid pixels")
    ratio = np.maximum(p / g, g / p)
    return MetricsRecord(
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        rel=float(np.mean(np.abs(p - g) / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        n_pixels=int(p.size),
        region=region,
    )


def region_breakdown(pred, gt, valid, mask):
    """Metrics over all valid pixels and over the in-zone / outside-zone parts.

    ``mask`` is the full-resolution in-zone mask. An empty region gives a
    record with ``n_pixels == 0`` and NaN metrics.
    """
    valid = np.asarray(valid, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != valid.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {valid.shape}")
    out = []
    for region, sel in zip(REGIONS, (valid, valid & mask, valid & ~mask)):
        out.append(compute_metrics(pred, gt, sel, region) if sel.any() else MetricsRecord.empty(region))
    return tuple(out)


def aggregate(records) -> MetricsRecord:
    """Per-image average (images with an empty region are skipped), in list order."""
    records = [r for r in records if r.n_pixels > 0]
    if not records:
        return MetricsRecord.empty("all")
    vals = {k: math.fsum(getattr(r, k) for r in records) / len(records) for k in METRIC_KEYS}
    return MetricsRecord(**vals, n_pixels=sum(r.n_pixels for r in records), region=records[0].region)


def render_error_map(pred, gt, valid, vmax: float | None = None):
    """Absolute error as an 8-bit grayscale image; missing ground truth renders as 0.

    Returns ``(image, meta)``; ``meta`` records the linear scale (error in meters
    mapped from [0, vmax] to [0, 255]).
    """
    valid = np.asarray(valid, dtype=bool)
    err = np.where(valid, np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64)), 0.0)
    if vmax is None:
        vmax = float(err.max()) if err.size else 0.0
    if vmax > 0:
        img = np.round(np.clip(err / vmax, 0, 1) * 255).astype(np.uint8)
    else:
        img = np.zeros(err.shape, dtype=np.uint8)
    return img, {"kind": "abs_error", "units": "m", "vmin": 0.0, "vmax": vmax}


def write_sidecar(path: str, array, meta: dict | None = None) -> None:
    """Raw little-endian float32 array behind an 8-byte magic and a length-prefixed JSON header."""
    a = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = json.dumps({"shape": list(a.shape), "dtype": "float32-le", "meta": meta or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(SIDECAR_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(a.tobytes())


def read_sidecar(path: str):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a sidecar file")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n])
    a = np.frombuffer(blob[16 + n:], dtype="<f4").reshape(header["shape"])
    return a.copy(), header


def save_png(path: str, image) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def chebyshev_radius(h: int, w: int, probe: tuple[int, int]) -> np.ndarray:
    r = np.abs(np.arange(h) - probe[0])[:, None]
    c = np.abs(np.arange(w) - probe[1])[None, :]
    return np.maximum(r, c)


@dataclass
class ERFResult:
    grad_map: np.ndarray  # (H, W) mean |d out[probe] / d x| summed over input channels
    profile: np.ndarray  # mean of grad_map per Chebyshev radius
    energy_map: np.ndarray  # (H, W) mean squared gradient, summed over input channels
    probe: tuple[int, int]

    @property
    def support_radius(self) -> int:
        nz = np.nonzero(self.profile)[0]
        return int(nz[-1]) if nz.size else -1

    def energy_radius(self) -> float:
        """Gradient-energy weighted mean Chebyshev distance from the probe."""
        h, w = self.energy_map.shape
        r = chebyshev_radius(h, w, self.probe)
        total = self.energy_map.sum()
        return float((r * self.energy_map).sum() / total) if total > 0 else 0.0


def estimate_erf(make_block, channels: int, resolution: tuple[int, int], probe=None, trials: int = 32,
                 seed: int = 0, mask=None, dtype=torch.float64) -> ERFResult:
    """Input-gradient receptive field of the probe pixel.

    ``make_block()`` builds a fresh randomly initialised block per trial (it is
    called under a seeded generator); each trial also draws a fresh random
    input. Blocks taking a mask (DAPM) get ``mask`` as second argument.
    """
    h, w = resolution
    probe = probe or (h // 2, w // 2)
    grad_abs = np.zeros((h, w))
    energy = np.zeros((h, w))
    for t in range(trials):
        torch.manual_seed(seed * 100003 + t)
        block = make_block().to(dtype)
        x = torch.randn(1, channels, h, w, dtype=dtype, requires_grad=True)
        y = block(x) if mask is None else block(x, torch.as_tensor(mask)[None])
        y[0, :, probe[0], probe[1]].sum().backward()
        g = x.grad[0].detach().numpy()
        grad_abs += np.abs(g).sum(axis=0)
        energy += (g ** 2).sum(axis=0)
    grad_abs /= trials
    energy /= trials
    r = chebyshev_radius(h, w, probe)
    profile = np.array([grad_abs[r == k].mean() for k in range(r.max() + 1)])
    return ERFResult(grad_abs, profile, energy, tuple(probe))


def dump_attention(dapm, x, mask, probe) -> np.ndarray:
    """Normalized attention weights of an outside-zone probe over the in-zone pixels, as an (H, W) map."""
    x = torch.as_tensor(x)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    return dapm.attention_weights(x.to(next(dapm.parameters()).dtype), mask, tuple(probe)).numpy()


def dump_kernels(lkpm):
    """Per-channel depthwise kernels: (display images uint8 (C, s, s), raw weights float32 (C, s, s)).

    Display images are |w| scaled per channel so its largest entry is 255.
    """
    raw = lkpm.dw.weight.detach().cpu().to(torch.float32).numpy()[:, 0]
    mag = np.abs(raw.astype(np.float64))
    peak = mag.reshape(len(mag), -1).max(axis=1)[:, None, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        img = np.where(peak > 0, mag / np.where(peak > 0, peak, 1.0), 0.0)
    return np.round(img * 255).astype(np.uint8), raw


def kernel_mosaic(images, cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile (C, s, s) kernel images into a single 2-D picture."""
    c, s, _ = images.shape
    rows = -(-c // cols)
    out = np.zeros((rows * (s + pad) + pad, cols * (s + pad) + pad), dtype=np.uint8)
    for i in range(c):
        r, q = divmod(i, cols)
        out[pad + r * (s + pad):pad + r * (s + pad) + s, pad + q * (s + pad):pad + q * (s + pad) + s] = images[i]
    return out


def write_metrics(path: str, per_sample: list[dict], aggregate_records: dict) -> None:
    doc = {"schema_version": 1, "aggregate": aggregate_records, "samples": per_sample}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1, allow_nan=False)
