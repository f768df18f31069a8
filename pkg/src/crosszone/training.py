"""Experiment configuration, checkpoints, the training loop and evaluation."""
from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .data import SceneSpec, ToFParams, load_dataset, make_sample, split_indices
from .evalkit import REGIONS, MetricsRecord, aggregate, region_breakdown, render_error_map, save_png, write_metrics
from .network import DepthCompletionNet, LossParams, NetworkConfig, batch_si_loss, count_parameters
from .zone_model import rescale_mask, sample_frame, zone_index_map

CONFIG_SCHEMA_VERSION = 1
CKPT_MAGIC = b"CFPCKPT\0"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DataConfig:
    """Either a dataset directory, or parameters to generate samples in memory."""

    root: str | None = None
    n: int = 200
    base_seed: int = 0
    resolution: tuple[int, int] = (128, 160)
    tof: ToFParams = field(default_factory=ToFParams)
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        if isinstance(self.tof, dict):
            self.tof = ToFParams.from_dict(self.tof)
        if isinstance(self.scene, dict):
            self.scene = SceneSpec.from_dict(self.scene)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tof"], d["scene"] = self.tof.to_dict(), self.scene.to_dict()
        return d

    def load(self):
        if self.root:
            return load_dataset(self.root)
        return [make_sample(i, self.base_seed, self.resolution, self.tof, self.scene) for i in range(self.n)]


@dataclass
class OptimConfig:
    max_lr: float = 3e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    grad_clip: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossParams = field(default_factory=LossParams)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    out_dir: str = "runs/default"
    log_every: int = 25
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.loss, dict):
            self.loss = LossParams(**self.loss)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "data": self.data.to_dict(),
            "network": self.network.to_dict(),
            "loss": asdict(self.loss),
            "optim": asdict(self.optim),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "log_every": self.log_every,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> ExperimentConfig:
        with open(path) as f:
            return cls.from_dict(json.load(f))


def set_threads():
    n = int(os.environ.get("CFP_THREADS", "1"))
    torch.set_num_threads(max(1, n))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str, model: torch.nn.Module, config: dict, epoch: int, best: dict | None = None):
    """Magic, u64 little-endian header length, JSON header, raw float32 LE tensors."""
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        a = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy().astype("<f4"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"config": config, "epoch": epoch, "best": best, "dtype": "float32-le",
                         "tensors": entries}, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def read_checkpoint(path: str):
    """Returns (header, {name: float32 tensor})."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n])
    payload = memoryview(blob)[16 + n:]
    tensors = {}
    for e in header["tensors"]:
        a = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(a.copy())
    return header, tensors


def load_model(path: str):
    header, tensors = read_checkpoint(path)
    config = ExperimentConfig.from_dict(header["config"])
    model = DepthCompletionNet(config.network)
    model.load_state_dict(tensors)
    model.eval()
    return model, config, header


# ---------------------------------------------------------------- batching

class TensorCache:
    """All samples converted to network inputs once, kept compact in memory."""

    def __init__(self, samples, net: NetworkConfig):
        self.samples = samples
        self.ids = [s.id for s in samples]
        self.rgb = torch.as_tensor(np.stack([np.round(s.rgb * 255) for s in samples]).astype(np.uint8))
        self.depth = torch.as_tensor(np.stack([s.depth for s in samples]).astype(np.float32))
        self.valid = torch.as_tensor(np.stack([s.depth_valid for s in samples]))
        sets = [sample_frame(s.tof, net.samples_per_zone) for s in samples]
        self.tof = torch.as_tensor(np.stack([z.values.reshape(-1, net.samples_per_zone) for z in sets])
                                   .astype(np.float32))
        self.tof_valid = torch.as_tensor(np.stack([z.valid.ravel() for z in sets]))
        self.maps = [torch.as_tensor(np.stack([zone_index_map(s.layout, s.tof, h, w) for s in samples]))
                     for h, w in net.stage_shapes()]
        self.masks = np.stack([rescale_mask(s.layout, s.tof, s.height, s.width) for s in samples])

    def __len__(self):
        return len(self.samples)

    def batch(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        rgb = self.rgb[idx].to(torch.float32) / 255.0
        return (rgb, self.tof[idx], self.tof_valid[idx], [m[idx] for m in self.maps]), self.depth[idx], self.valid[idx]


# ---------------------------------------------------------------- evaluation

def predict(model, cache: TensorCache, batch_size: int = 16) -> np.ndarray:
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(cache), batch_size):
            inputs, _, _ = cache.batch(range(i, min(i + batch_size, len(cache))))
            out.append(model(*inputs)[0].numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_predictions(preds, cache: TensorCache):
    """Per-sample region records and their per-region aggregates."""
    per_sample, by_region = [], {r: [] for r in REGIONS}
    for i, pred in enumerate(preds):
        s = cache.samples[i]
        recs = region_breakdown(pred, s.depth, s.depth_valid, cache.masks[i])
        per_sample.append({"id": s.id, **{r.region: r.to_dict() for r in recs}})
        for r in recs:
            by_region[r.region].append(r)
    agg = {r: aggregate(v) for r, v in by_region.items()}
    return per_sample, agg


def evaluate(model, cache: TensorCache, batch_size: int = 16):
    return evaluate_predictions(predict(model, cache, batch_size), cache)


# ---------------------------------------------------------------- training

class JsonlLog:
    def __init__(self, path):
        self.f = open(path, "w")

    def write(self, **rec):
        self.f.write(json.dumps(rec, sort_keys=True, allow_nan=True) + "\n")
        self.f.flush()

    def close(self):
        self.f.close()


def _nan_dump(path, model, epoch, step, ids, loss):
    norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()}
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    with open(path, "w") as f:
        json.dump({"epoch": epoch, "step": step, "batch_ids": ids, "loss": repr(loss),
                   "non_finite_params": bad, "param_norms": norms}, f, indent=1, sort_keys=True)


def train(config: ExperimentConfig, samples=None, test_samples=None, verbose: bool = False) -> dict:
    """Train per ``config``; returns a summary dict.

    Validation is the 10% seed partition of the training samples; the best
    checkpoint by validation REL is written to ``out_dir/best.ckpt``.
    ``test_samples`` (optional) are evaluated with the best weights at the end.
    """
    set_threads()
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "config.json"), "w") as f:
        f.write(config.to_json())
    samples = samples if samples is not None else config.data.load()
    tr_idx, va_idx = split_indices([s.seed for s in samples])
    if not tr_idx:
        raise ValueError("no training samples after the validation split")
    net_cfg = config.network
    train_cache = TensorCache([samples[i] for i in tr_idx], net_cfg)
    val_cache = TensorCache([samples[i] for i in va_idx], net_cfg) if va_idx else None

    torch.manual_seed(config.seed)
    model = DepthCompletionNet(net_cfg)
    o = config.optim
    opt = torch.optim.AdamW(model.parameters(), lr=o.max_lr, betas=o.betas, weight_decay=o.weight_decay)
    steps_per_epoch = math.ceil(len(train_cache) / config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=o.max_lr, total_steps=config.epochs * steps_per_epoch, pct_start=o.pct_start,
        div_factor=o.div_factor, final_div_factor=o.final_div_factor)
    gen = torch.Generator().manual_seed(config.seed)
    log = JsonlLog(os.path.join(config.out_dir, "train_log.jsonl"))
    log.write(kind="start", n_train=len(train_cache), n_val=len(val_cache) if val_cache else 0,
              params=count_parameters(model), mode=net_cfg.propagation.mode)
    best, step, last_loss = None, 0, float("nan")
    ckpt_best = os.path.join(config.out_dir, "best.ckpt")
    t0 = time.time()
    try:
        for epoch in range(config.epochs):
            model.train()
            order = torch.randperm(len(train_cache), generator=gen)
            total = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                inputs, gt, valid = train_cache.batch(idx)
                depth, _ = model(*inputs)
                loss = batch_si_loss(depth, gt, valid, config.loss)
                if not torch.isfinite(loss):
                    dump = os.path.join(config.out_dir, "nan_dump.json")
                    _nan_dump(dump, model, epoch, step, [train_cache.ids[i] for i in idx.tolist()], loss.item())
                    log.write(kind="abort", epoch=epoch, step=step, dump=dump)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; see {dump}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), o.grad_clip or float("inf"))
                if not torch.isfinite(gnorm):
                    dump = os.path.join(config.out_dir, "nan_dump.json")
                    _nan_dump(dump, model, epoch, step, [train_cache.ids[i] for i in idx.tolist()], loss.item())
                    log.write(kind="abort", epoch=epoch, step=step, dump=dump, reason="gradient")
                    raise TrainingDiverged(f"non-finite gradient at epoch {epoch} step {step}; see {dump}")
                opt.step()
                sched.step()
                last_loss = loss.item()
                total += last_loss * len(idx)
                if config.log_every and step % config.log_every == 0:
                    log.write(kind="step", epoch=epoch, step=step, loss=last_loss, lr=sched.get_last_lr()[0])
                step += 1
            rec = {"kind": "epoch", "epoch": epoch, "train_loss": total / len(train_cache),
                   "elapsed": round(time.time() - t0, 1)}
            if val_cache is not None:
                _, agg = evaluate(model, val_cache)
                rec["val"] = {k: v.to_dict() for k, v in agg.items()}
                score = agg["all"].rel
            else:
                score = rec["train_loss"]
            if best is None or score < best["score"]:
                best = {"epoch": epoch, "score": score, "metric": "val_rel" if val_cache else "train_loss"}
                save_checkpoint(ckpt_best, model, config.to_dict(), epoch, best)
            rec["best_epoch"] = best["epoch"]
            log.write(**rec)
            if verbose:
                print(json.dumps({k: rec[k] for k in ("epoch", "train_loss", "elapsed")}), flush=True)
        save_checkpoint(os.path.join(config.out_dir, "last.ckpt"), model, config.to_dict(), config.epochs - 1, best)
        summary = {"best": best, "final_loss": last_loss, "params": count_parameters(model),
                   "elapsed": time.time() - t0, "out_dir": config.out_dir}
        if test_samples is not None:
            best_model, _, _ = load_model(ckpt_best)
            _, agg = evaluate(best_model, TensorCache(test_samples, net_cfg))
            summary["test"] = {k: v.to_dict() for k, v in agg.items()}
        log.write(kind="end", **{k: v for k, v in summary.items() if k != "test"})
    finally:
        log.close()
    return summary


def eval_report(model, samples, out_path: str, net_cfg: NetworkConfig, error_maps: str | None = None,
                oracle: bool = False) -> dict:
    """Evaluate and write the metrics report; ``oracle`` predicts the ground truth itself."""
    cache = TensorCache(samples, net_cfg)
    if oracle:
        preds = np.stack([np.where(s.depth_valid, s.depth, 1.0) for s in samples])
    else:
        preds = predict(model, cache)
    per_sample, agg = evaluate_predictions(preds, cache)
    agg_d = {k: v.to_dict() for k, v in agg.items()}
    write_metrics(out_path, per_sample, agg_d)
    if error_maps:
        os.makedirs(error_maps, exist_ok=True)
        for s, p in zip(samples, preds):
            img, meta = render_error_map(p, s.depth, s.depth_valid)
            save_png(os.path.join(error_maps, f"{s.id}_error.png"), img)
            with open(os.path.join(error_maps, f"{s.id}_error.json"), "w") as f:
                json.dump(meta, f, sort_keys=True)
    return {"aggregate": agg_d, "samples": per_sample}


def read_report(path: str) -> dict:
    with open(path) as f:
        doc = json.load(f)
    doc["aggregate"] = {k: MetricsRecord.from_dict(v) for k, v in doc["aggregate"].items()}
    return doc


ABLATION_MODES = ("baseline", "dapm_only", "lkpm_only", "A", "B", "C", "D")
ABLATION_SCHEDULES = ((7, 7, 7), (31, 31, 31), (7, 15, 31))


def run_ablation(base: ExperimentConfig, samples, test_samples=None, modes=ABLATION_MODES,
                 schedules=ABLATION_SCHEDULES) -> dict:
    """Train and evaluate every (mode, schedule) cell on one shared dataset and seed.

    Modes without an LKPM ignore the schedule, so they run once and fill every
    column. A failing cell is recorded and the matrix continues.
    """
    from .blocks import PropagationConfig

    eval_set = test_samples if test_samples is not None else samples
    rows = []
    for mode in modes:
        uses_lkpm = PropagationConfig(mode=mode).uses_lkpm
        cells, shared = {}, None
        for sched in schedules:
            key = ",".join(str(s) for s in sched)
            if shared is not None:
                cells[key] = dict(shared, schedule_unused=True)
                continue
            net = NetworkConfig.from_dict({**base.network.to_dict(),
                                           "propagation": {**base.network.propagation.to_dict(), "mode": mode,
                                                           "kernel_schedule": list(sched)}})
            tag = f"{mode}_{key.replace(',', '-')}" if uses_lkpm else mode
            cfg = ExperimentConfig.from_dict({**base.to_dict(), "network": net.to_dict(),
                                              "out_dir": os.path.join(base.out_dir, tag)})
            try:
                summary = train(cfg, samples)
                model, _, _ = load_model(os.path.join(cfg.out_dir, "best.ckpt"))
                _, agg = evaluate(model, TensorCache(eval_set, net))
                cell = {"status": "ok", "params": summary["params"],
                        **{r: agg[r].to_dict() for r in REGIONS}}
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the matrix
                cell = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            cells[key] = cell
            if not uses_lkpm:
                shared = cell
        rows.append({"mode": mode, "cells": cells})
    table = {"schema_version": 1, "seed": base.seed, "schedules": [list(s) for s in schedules],
             "sample_ids": [s.id for s in samples], "rows": rows}
    with open(os.path.join(base.out_dir, "ablation.json"), "w") as f:
        json.dump(table, f, indent=1, sort_keys=True, allow_nan=False)
    return table
