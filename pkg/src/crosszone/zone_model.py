"""Zone-based ToF sensor model.

Simulates the per-zone depth distributions a lightweight multi-zone ToF
sensor reports (a Gaussian fit per zone), and owns the geometry that maps
the zone grid onto image and feature-map pixels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

DEFAULT_MAX_RANGE = 4.0
DEFAULT_MIN_PIXELS = 16
DEFAULT_SAMPLES_PER_ZONE = 16


@dataclass
class ToFFrame:
    """One sensor readout: per-zone Gaussian (mean, variance) plus validity."""

    mean: np.ndarray
    variance: np.ndarray
    valid: np.ndarray
    max_range: float = DEFAULT_MAX_RANGE

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.mean.shape == self.variance.shape == self.valid.shape) or self.mean.ndim != 2:
            raise ValueError("mean, variance and valid must be 2-D arrays of one shape")

    @property
    def grid_h(self) -> int:
        return self.mean.shape[0]

    @property
    def grid_w(self) -> int:
        return self.mean.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def to_dict(self, layout: ZoneLayout | None = None) -> dict:
        def sig9(a):
            return [float(f"{v:.9g}") for v in np.asarray(a, dtype=np.float64).ravel()]

        # invalid entries carry no content; write zeros so files are canonical
        mean = np.where(self.valid, self.mean, 0.0)
        var = np.where(self.valid, self.variance, 0.0)
        doc = {
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "max_range": float(f"{self.max_range:.9g}"),
            "mean": sig9(mean),
            "variance": sig9(var),
            "valid": [bool(v) for v in self.valid.ravel()],
        }
        if layout is not None:
            doc["layout"] = layout.params()
        return doc

    def to_json(self, layout: ZoneLayout | None = None) -> str:
        return json.dumps(self.to_dict(layout), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> ToFFrame:
        try:
            gh, gw = int(doc["grid_h"]), int(doc["grid_w"])
            mean = np.asarray(doc["mean"], dtype=np.float64).reshape(gh, gw)
            var = np.asarray(doc["variance"], dtype=np.float64).reshape(gh, gw)
            valid = np.asarray(doc["valid"], dtype=bool).reshape(gh, gw)
            max_range = float(doc["max_range"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"malformed ToF frame document: {exc}") from exc
        return cls(mean, var, valid, max_range)

    @classmethod
    def from_json(cls, text: str) -> ToFFrame:
        return cls.from_dict(json.loads(text))


@dataclass
class ZoneSampleSet:
    """Per-zone sampled depth values, shape (grid_h, grid_w, count)."""

    values: np.ndarray
    valid: np.ndarray


@dataclass
class ZoneLayout:
    """Placement of the zone grid on the image plane.

    ``zone_rects[i, j]`` is ``(top, left, bottom, right)`` in native image
    pixels; coordinates may be fractional and may extend past the image.
    Rectangles are half-open: a pixel center ``(r + 0.5, c + 0.5)`` belongs to
    a zone when ``top <= r + 0.5 < bottom`` and ``left <= c + 0.5 < right``.
    """

    image_h: int
    image_w: int
    row_edges: np.ndarray  # grid_h + 1 increasing values
    col_edges: np.ndarray  # grid_w + 1 increasing values
    meta: dict = field(default_factory=dict)

    @property
    def grid_h(self) -> int:
        return len(self.row_edges) - 1

    @property
    def grid_w(self) -> int:
        return len(self.col_edges) - 1

    @property
    def zone_rects(self) -> np.ndarray:
        top = np.repeat(self.row_edges[:-1, None], self.grid_w, axis=1)
        bottom = np.repeat(self.row_edges[1:, None], self.grid_w, axis=1)
        left = np.repeat(self.col_edges[None, :-1], self.grid_h, axis=0)
        right = np.repeat(self.col_edges[None, 1:], self.grid_h, axis=0)
        return np.stack([top, left, bottom, right], axis=-1)

    @property
    def zone_area_rect(self) -> tuple[float, float, float, float]:
        return (float(self.row_edges[0]), float(self.col_edges[0]),
                float(self.row_edges[-1]), float(self.col_edges[-1]))

    def clipped_rect(self, i: int, j: int) -> tuple[float, float, float, float]:
        t, l, b, r = self.zone_rects[i, j]
        return (max(t, 0.0), max(l, 0.0), min(b, float(self.image_h)), min(r, float(self.image_w)))

    def params(self) -> dict:
        return dict(self.meta)

    @classmethod
    def from_params(cls, params: dict) -> ZoneLayout:
        p = dict(params)
        return build_zone_layout(
            p["image_h"], p["image_w"], p["cam_fov_h"], p["cam_fov_v"],
            p["tof_fov_h"], p["tof_fov_v"], p["grid_h"], p["grid_w"],
            native_grid=tuple(p["native_grid"]) if p.get("native_grid") else None,
        )


@dataclass
class DropoutSpec:
    """Zone dropout: i.i.d. per-zone loss plus an optional rectangular block."""

    p_iid: float = 0.15
    p_block: float = 0.25

    @classmethod
    def none(cls) -> DropoutSpec:
        return cls(0.0, 0.0)


def fit_zone_gaussian(depths, max_range: float = DEFAULT_MAX_RANGE,
                      min_pixels: int = DEFAULT_MIN_PIXELS) -> tuple[float, float, bool]:
    """Fit a Gaussian to the depths seen by one zone.

    Pixels beyond ``max_range`` and non-positive/NaN depths are dropped before
    the moments are taken. Returns ``(mean, population variance, valid)``;
    ``valid`` is False when fewer than ``min_pixels`` depths survive.
    """
    d = np.asarray(depths, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("no pixels in zone footprint")
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    keep = np.isfinite(d) & (d > 0) & (d <= max_range)
    d = d[keep]
    if d.size < min_pixels:
        return 0.0, 0.0, False
    mean = float(d.mean())
    var = float(np.mean((d - mean) ** 2))
    return mean, var, True


def _quantile_offsets(count: int) -> np.ndarray:
    p = (np.arange(count) + 0.5) / count
    z = ndtri(p)
    # exact antisymmetry so offsets cancel; limit to +-4 sigma
    z = 0.5 * (z - z[::-1])
    return np.clip(z, -4.0, 4.0)


def sample_zone_values(mean: float, variance: float, count: int = DEFAULT_SAMPLES_PER_ZONE,
                       floor: float = 1e-6) -> np.ndarray:
    """Deterministic equal-probability Gaussian quantiles, sorted ascending."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    if count < 1:
        raise ValueError("count must be >= 1")
    values = mean + math.sqrt(variance) * _quantile_offsets(count)
    return np.maximum(values, floor)


def sample_frame(frame: ToFFrame, count: int = DEFAULT_SAMPLES_PER_ZONE) -> ZoneSampleSet:
    """Apply :func:`sample_zone_values` to every valid zone of a frame."""
    offsets = _quantile_offsets(count)
    std = np.sqrt(np.where(frame.valid, frame.variance, 0.0))
    values = frame.mean[..., None] + std[..., None] * offsets
    values = np.maximum(values, 1e-6)
    values[~frame.valid] = 0.0
    return ZoneSampleSet(values=values, valid=frame.valid.copy())


def _check_fov(name, deg):
    if not 0.0 < deg < 180.0:
        raise ValueError(f"{name} must lie in (0, 180) degrees, got {deg}")


def build_zone_layout(image_h: int, image_w: int, cam_fov_h: float, cam_fov_v: float,
                      tof_fov_h: float, tof_fov_v: float, grid_h: int, grid_w: int,
                      native_grid: tuple[int, int] | None = None) -> ZoneLayout:
    """Project the ToF zone grid onto the camera image (pinhole model).

    FOVs are full angles in degrees; ``*_h`` is horizontal, ``*_v`` vertical.
    The sensor's field of view is split into ``native_grid`` zones (defaults
    to ``(grid_h, grid_w)``). When ``grid`` is smaller than ``native_grid``
    only the central ``grid_h x grid_w`` block of native zones is kept, which
    is how a coarser sensor with the same per-zone footprint is simulated.
    """
    if image_h <= 0 or image_w <= 0 or grid_h < 1 or grid_w < 1:
        raise ValueError("image and grid dimensions must be positive")
    for name, v in (("cam_fov_h", cam_fov_h), ("cam_fov_v", cam_fov_v),
                    ("tof_fov_h", tof_fov_h), ("tof_fov_v", tof_fov_v)):
        _check_fov(name, v)
    nat_h, nat_w = native_grid if native_grid is not None else (grid_h, grid_w)
    if nat_h < 1 or nat_w < 1:
        raise ValueError("native grid dimensions must be positive")

    def side(dim, tof, cam):
        return dim * math.tan(math.radians(tof) / 2) / math.tan(math.radians(cam) / 2)

    pitch_h = side(image_h, tof_fov_v, cam_fov_v) / nat_h
    pitch_w = side(image_w, tof_fov_h, cam_fov_h) / nat_w
    area_h, area_w = grid_h * pitch_h, grid_w * pitch_w
    top = (image_h - area_h) / 2.0
    left = (image_w - area_w) / 2.0
    row_edges = top + pitch_h * np.arange(grid_h + 1)
    col_edges = left + pitch_w * np.arange(grid_w + 1)
    meta = {
        "image_h": int(image_h), "image_w": int(image_w),
        "cam_fov_h": float(cam_fov_h), "cam_fov_v": float(cam_fov_v),
        "tof_fov_h": float(tof_fov_h), "tof_fov_v": float(tof_fov_v),
        "grid_h": int(grid_h), "grid_w": int(grid_w),
        "native_grid": [int(nat_h), int(nat_w)] if native_grid is not None else None,
    }
    return ZoneLayout(int(image_h), int(image_w), row_edges, col_edges, meta)


def _center_bins(edges: np.ndarray, n_feat: int, native: int) -> np.ndarray:
    """Zone index along one axis for every feature pixel center, -1 outside."""
    centers = (np.arange(n_feat) + 0.5) * (native / n_feat)
    idx = np.searchsorted(edges, centers, side="right") - 1
    idx[(idx < 0) | (idx >= len(edges) - 1)] = -1
    return idx


def zone_index_map(layout: ZoneLayout, frame: ToFFrame, feat_h: int, feat_w: int) -> np.ndarray:
    """Row-major zone index of each feature pixel, or -1 outside valid zones."""
    if feat_h < 1 or feat_w < 1:
        raise ValueError("feature dimensions must be >= 1")
    ri = _center_bins(layout.row_edges, feat_h, layout.image_h)
    ci = _center_bins(layout.col_edges, feat_w, layout.image_w)
    out = np.full((feat_h, feat_w), -1, dtype=np.int64)
    inside = (ri[:, None] >= 0) & (ci[None, :] >= 0)
    rr, cc = np.broadcast_arrays(ri[:, None], ci[None, :])
    valid = np.zeros_like(inside)
    valid[inside] = frame.valid[rr[inside], cc[inside]]
    out[valid] = (rr * layout.grid_w + cc)[valid]
    return out


def rescale_mask(layout: ZoneLayout, frame: ToFFrame, feat_h: int, feat_w: int) -> np.ndarray:
    """In-zone mask at feature resolution: union of valid (clipped) zone rects."""
    if feat_h < 1 or feat_w < 1:
        raise ValueError("feature dimensions must be >= 1")
    ys = (np.arange(feat_h) + 0.5) * (layout.image_h / feat_h)
    xs = (np.arange(feat_w) + 0.5) * (layout.image_w / feat_w)
    mask = np.zeros((feat_h, feat_w), dtype=bool)
    for i, j in zip(*np.nonzero(frame.valid)):
        t, l, b, r = layout.clipped_rect(i, j)
        rows = (ys >= t) & (ys < b)
        cols = (xs >= l) & (xs < r)
        mask |= rows[:, None] & cols[None, :]
    return mask


def simulate_tof(depth: np.ndarray, layout: ZoneLayout, max_range: float = DEFAULT_MAX_RANGE,
                 dropout: DropoutSpec | None = None, seed: int = 0,
                 depth_valid: np.ndarray | None = None,
                 min_pixels: int = DEFAULT_MIN_PIXELS) -> ToFFrame:
    """Simulate one ToF readout from a dense depth map.

    Each zone fits a Gaussian to the ground-truth depths whose pixel centers
    fall in its footprint; dropout then removes zones at random. The result
    is a pure function of the inputs and ``seed``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (layout.image_h, layout.image_w):
        raise ValueError(f"depth shape {depth.shape} does not match layout "
                         f"{(layout.image_h, layout.image_w)}")
    good = np.isfinite(depth) & (depth > 0)
    if depth_valid is not None:
        good &= np.asarray(depth_valid, dtype=bool)
    if not good.any():
        raise ValueError("no valid depth pixels in the depth map")
    d = np.where(good, depth, np.nan)

    gh, gw = layout.grid_h, layout.grid_w
    mean = np.zeros((gh, gw))
    var = np.zeros((gh, gw))
    valid = np.zeros((gh, gw), dtype=bool)
    ri = _center_bins(layout.row_edges, layout.image_h, layout.image_h)
    ci = _center_bins(layout.col_edges, layout.image_w, layout.image_w)
    for i in range(gh):
        rows = np.nonzero(ri == i)[0]
        for j in range(gw):
            cols = np.nonzero(ci == j)[0]
            if rows.size == 0 or cols.size == 0:
                continue  # zone projects entirely outside the image
            footprint = d[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
            mean[i, j], var[i, j], valid[i, j] = fit_zone_gaussian(footprint, max_range, min_pixels)

    dropout = dropout or DropoutSpec()
    rng = np.random.default_rng(seed)
    # draw every variate unconditionally so the stream layout never depends on p
    iid = rng.random((gh, gw)) < dropout.p_iid
    use_block = rng.random() < dropout.p_block
    r0, c0 = rng.integers(0, gh), rng.integers(0, gw)
    r1, c1 = rng.integers(r0 + 1, gh + 1), rng.integers(c0 + 1, gw + 1)
    valid &= ~iid
    if use_block:
        valid[r0:r1, c0:c1] = False
    mean[~valid] = 0.0
    var[~valid] = 0.0
    return ToFFrame(mean, var, valid, max_range)


def reference_layout(image_h: int = 480, image_w: int = 640, grid: tuple[int, int] = (8, 8)) -> ZoneLayout:
    """Camera 55x43 deg, ToF 45x45 deg; coarser grids keep the 8x8 zone pitch."""
    native = None if grid == (8, 8) else (8, 8)
    return build_zone_layout(image_h, image_w, 55.0, 43.0, 45.0, 45.0, grid[0], grid[1],
                             native_grid=native)
