"""Synthetic indoor-like scenes (wall + floor + boxes) with dense depth, and
dataset persistence.

Scenes are ray cast under a pinhole camera. Shading uses a random light
power with inverse-square falloff, so image brightness alone does not pin
down absolute scale; the ToF frame is what carries metric depth.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np
from PIL import Image

from .zone_model import DropoutSpec, ToFFrame, ZoneLayout, reference_layout, simulate_tof

SCHEMA_VERSION = 1
CAM_FOV = (55.0, 43.0)  # horizontal, vertical degrees


@dataclass
class SceneSpec:
    seed: int = 0
    boxes: tuple[int, int] = (1, 4)  # inclusive range of box count
    wall_depth: tuple[float, float] = (1.8, 3.8)
    wall_yaw: tuple[float, float] = (-25.0, 25.0)  # degrees
    cam_height: tuple[float, float] = (0.35, 0.9)
    light_power: tuple[float, float] = (1.0, 6.0)
    noise: float = 0.02
    d_max_scene: float = 4.0
    hole_fraction: float = 0.0  # fraction of pixels knocked out of the GT (off by default)
    cam_fov: tuple[float, float] = CAM_FOV

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        d = dict(d)
        for k in ("boxes", "wall_depth", "wall_yaw", "cam_height", "light_power", "cam_fov"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Sample:
    rgb: np.ndarray  # (3, H, W) in [0, 1], multiples of 1/255
    depth: np.ndarray  # (H, W) meters, multiples of 1 mm, 0 where invalid
    depth_valid: np.ndarray  # (H, W) bool
    tof: ToFFrame | None
    layout: ZoneLayout | None
    id: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def _rays(h, w, fov):
    fx = (w / 2) / math.tan(math.radians(fov[0]) / 2)
    fy = (h / 2) / math.tan(math.radians(fov[1]) / 2)
    u = (np.arange(w) + 0.5 - w / 2) / fx
    v = (np.arange(h) + 0.5 - h / 2) / fy
    return np.broadcast_to(u[None, :], (h, w)), np.broadcast_to(v[:, None], (h, w))


def scene_geometry(spec: SceneSpec) -> dict:
    """Draw the scene layout (camera frame: x right, y down, z forward)."""
    rng = np.random.default_rng(spec.seed)
    wall = float(rng.uniform(*spec.wall_depth))
    yaw = math.radians(rng.uniform(*spec.wall_yaw))
    height = float(rng.uniform(*spec.cam_height))
    power = float(rng.uniform(*spec.light_power))
    surfaces = rng.uniform(0.25, 0.9, size=(2, 3))
    stripes = rng.uniform(0.15, 0.6, size=2)  # texture period in meters
    n_boxes = int(rng.integers(spec.boxes[0], spec.boxes[1] + 1))
    boxes = []
    half_w = math.tan(math.radians(spec.cam_fov[0]) / 2)
    for _ in range(n_boxes):
        size = rng.uniform([0.2, 0.2, 0.2], [0.7, 0.9, 0.6])
        z0 = rng.uniform(0.8, max(0.85, wall - size[2] - 0.6))
        x = rng.uniform(-0.8, 0.8) * half_w * z0
        boxes.append({
            "lo": [x - size[0] / 2, height - size[1], z0],
            "hi": [x + size[0] / 2, height, z0 + size[2]],
            "albedo": rng.uniform(0.2, 0.95, size=3).tolist(),
        })
    return {"wall": wall, "yaw": yaw, "height": height, "power": power,
            "albedo": surfaces.tolist(), "stripes": stripes.tolist(), "boxes": boxes}


def _render(geo, h, w, fov):
    """z-depth, albedo and surface normals' facing term of the nearest surface."""
    dx, dy = _rays(h, w, fov)
    t_yaw = math.tan(geo["yaw"])
    # wall plane z = wall + tan(yaw) * x, intersected by the ray (dx, dy, 1) * z
    depth = geo["wall"] / (1.0 - t_yaw * dx)
    depth = np.where(depth > 0, depth, np.inf)
    xw = dx * depth
    tex = 0.75 + 0.25 * np.sign(np.sin(2 * np.pi * xw / geo["stripes"][0]))
    albedo = np.asarray(geo["albedo"][0])[:, None, None] * tex
    facing = np.full((h, w), 1.0 / math.sqrt(1 + t_yaw ** 2))

    # floor: plane y = height, visible where dy > 0
    with np.errstate(divide="ignore"):
        zf = np.where(dy > 0, geo["height"] / np.where(dy > 0, dy, 1.0), np.inf)
    near = zf < depth
    depth = np.where(near, zf, depth)
    zf_finite = np.where(near, zf, 0.0)
    tex_f = 0.75 + 0.25 * np.sign(np.sin(2 * np.pi * (dx * zf_finite) / geo["stripes"][1]))
    albedo = np.where(near, np.asarray(geo["albedo"][1])[:, None, None] * tex_f, albedo)
    facing = np.where(near, dy / np.sqrt(1 + dx ** 2 + dy ** 2), facing)

    # boxes: slab test on the ray (dx, dy, 1) parameterised by z
    d = np.stack([dx, dy, np.ones_like(dx)])
    for box in geo["boxes"]:
        lo = np.asarray(box["lo"])[:, None, None]
        hi = np.asarray(box["hi"])[:, None, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t0, t1 = lo / d, hi / d
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        enter = tmin.max(axis=0)
        axis = tmin.argmax(axis=0)
        hit = (enter <= tmax.min(axis=0)) & (enter > 0) & (enter < depth)
        depth = np.where(hit, enter, depth)
        albedo = np.where(hit, np.asarray(box["albedo"])[:, None, None], albedo)
        shade = np.choose(axis, [np.abs(dx), np.abs(dy), np.ones_like(dx)]) / np.sqrt(1 + dx ** 2 + dy ** 2)
        facing = np.where(hit, shade, facing)
    return depth, albedo, facing


def generate_scene(spec: SceneSpec, resolution: tuple[int, int] = (128, 160)) -> Sample:
    """Render one scene (no ToF attached). Pure function of ``spec``."""
    h, w = resolution
    geo = scene_geometry(spec)
    depth, albedo, facing = _render(geo, h, w, spec.cam_fov)
    depth = np.round(np.minimum(depth, spec.d_max_scene) * 1000.0) / 1000.0

    rng = np.random.default_rng([spec.seed, 1])
    falloff = geo["power"] / (1.0 + depth ** 2)
    rgb = albedo * (0.35 + 0.65 * facing) * np.minimum(falloff, 1.5)[None]
    rgb = rgb + spec.noise * rng.standard_normal(rgb.shape)
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0

    valid = depth > 0
    if spec.hole_fraction > 0:
        valid &= _holes(rng, h, w, spec.hole_fraction)
    depth = np.where(valid, depth, 0.0)
    return Sample(rgb=rgb, depth=depth, depth_valid=valid, tof=None, layout=None,
                  seed=spec.seed, meta={"scene": spec.to_dict()})


def _holes(rng, h, w, fraction):
    """Keep-mask with a few rectangular holes covering about ``fraction`` of the image."""
    keep = np.ones((h, w), dtype=bool)
    target = fraction * h * w
    while (~keep).sum() < target:
        rh, rw = rng.integers(2, max(3, h // 8)), rng.integers(2, max(3, w // 8))
        r, c = rng.integers(0, h - rh), rng.integers(0, w - rw)
        keep[r:r + rh, c:c + rw] = False
    return keep


@dataclass
class ToFParams:
    grid: tuple[int, int] = (8, 8)
    max_range: float = 4.0
    p_iid: float = 0.15
    p_block: float = 0.25

    def layout(self, resolution) -> ZoneLayout:
        return reference_layout(resolution[0], resolution[1], tuple(self.grid))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ToFParams:
        d = dict(d)
        d["grid"] = tuple(d.get("grid", (8, 8)))
        return cls(**d)


def make_sample(index: int, base_seed: int, resolution=(128, 160), tof: ToFParams | None = None,
                scene: SceneSpec | None = None) -> Sample:
    """Sample ``index`` of a dataset: scene seed ``base_seed + index`` plus its ToF frame."""
    tof = tof or ToFParams()
    seed = base_seed + index
    spec = SceneSpec.from_dict({**(scene or SceneSpec()).to_dict(), "seed": seed})
    sample = generate_scene(spec, resolution)
    layout = tof.layout(resolution)
    frame = simulate_tof(sample.depth, layout, tof.max_range, DropoutSpec(tof.p_iid, tof.p_block),
                         seed=seed, depth_valid=sample.depth_valid)
    # round through the file format so in-memory and on-disk samples agree exactly
    sample.tof = ToFFrame.from_dict(frame.to_dict())
    sample.layout = layout
    sample.id = f"{index:06d}"
    return sample


def write_sample(sample: Sample, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    rgb = np.round(np.transpose(sample.rgb, (1, 2, 0)) * 255.0).astype(np.uint8)
    Image.fromarray(rgb).save(os.path.join(path, "rgb.png"))
    mm = np.where(sample.depth_valid, np.round(sample.depth * 1000.0), 0)
    if mm.max(initial=0) > 65535:
        raise ValueError(f"sample {sample.id}: depth exceeds the 16-bit millimeter range")
    Image.fromarray(mm.astype(np.uint16)).save(os.path.join(path, "depth.png"))
    with open(os.path.join(path, "tof.json"), "w") as f:
        f.write(sample.tof.to_json(sample.layout))
    meta = {"id": sample.id, "seed": sample.seed, "resolution": [sample.height, sample.width],
            "layout": sample.layout.params(), **sample.meta}
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def read_sample(path: str) -> Sample:
    try:
        with open(os.path.join(path, "meta.json")) as f:
            meta = json.load(f)
        with open(os.path.join(path, "tof.json")) as f:
            tof = ToFFrame.from_json(f.read())
        rgb = np.asarray(Image.open(os.path.join(path, "rgb.png")).convert("RGB"))
        mm = np.asarray(Image.open(os.path.join(path, "depth.png")))
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise ValueError(f"cannot read sample at {path}: {exc}") from exc
    h, w = meta["resolution"]
    if rgb.shape != (h, w, 3) or mm.shape != (h, w) or mm.dtype != np.uint16:
        raise ValueError(f"sample at {path}: image sizes/types do not match meta.json")
    layout = ZoneLayout.from_params(meta["layout"])
    extra = {k: v for k, v in meta.items() if k not in ("id", "seed", "resolution", "layout")}
    return Sample(rgb=np.transpose(rgb, (2, 0, 1)) / 255.0, depth=mm / 1000.0, depth_valid=mm > 0,
                  tof=tof, layout=layout, id=meta["id"], seed=meta["seed"], meta=extra)


def build_dataset(n: int, base_seed: int, out_dir: str, resolution=(128, 160),
                  tof: ToFParams | None = None, scene: SceneSpec | None = None) -> dict:
    """Write ``n`` samples plus ``manifest.json`` under ``out_dir``; returns the manifest."""
    tof = tof or ToFParams()
    scene = scene or SceneSpec()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n):
        sample = make_sample(i, base_seed, resolution, tof, scene)
        rel = sample.id
        try:
            write_sample(sample, os.path.join(out_dir, rel))
        except OSError as exc:
            raise OSError(f"writing sample {sample.id}: {exc}") from exc
        entries.append({"id": sample.id, "path": rel, "seed": sample.seed})
    manifest = {"schema_version": SCHEMA_VERSION, "n": n, "base_seed": base_seed,
                "resolution": list(resolution), "tof": tof.to_dict(),
                "scene": scene.to_dict(), "samples": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return manifest


def load_manifest(root: str) -> dict:
    try:
        with open(os.path.join(root, "manifest.json")) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read dataset manifest in {root}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema_version {manifest.get('schema_version')}")
    return manifest


def load_dataset(root: str) -> list[Sample]:
    manifest = load_manifest(root)
    return [read_sample(os.path.join(root, e["path"])) for e in manifest["samples"]]


def split_indices(seeds, val_every: int = 10):
    """Seed partition: seeds divisible by ``val_every`` go to validation (10%)."""
    train = [i for i, s in enumerate(seeds) if s % val_every]
    val = [i for i, s in enumerate(seeds) if s % val_every == 0]
    return train, val
