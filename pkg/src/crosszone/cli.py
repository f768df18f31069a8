"""Command-line entry point: gen-data, train, eval, diagnose, ablate."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from .blocks import DAPM, LKPM, MODES
from .data import SceneSpec, ToFParams, build_dataset, load_dataset, load_manifest
from .evalkit import dump_attention, dump_kernels, estimate_erf, kernel_mosaic, save_png, write_sidecar
from .training import (
    ABLATION_MODES, ExperimentConfig, TensorCache, TrainingDiverged, eval_report, load_model,
    run_ablation, set_threads, train,
)


def _pair(text, sep="x"):
    a, b = text.lower().split(sep)
    return int(a), int(b)


def _schedule(text):
    return tuple(int(s) for s in text.split(","))


def cmd_gen_data(args):
    tof = ToFParams(grid=_pair(args.zones), p_iid=args.p_iid, p_block=args.p_block)
    scene = SceneSpec(hole_fraction=args.holes)
    build_dataset(args.n, args.seed, args.out, _pair(args.res), tof, scene)
    print(os.path.join(args.out, "manifest.json"))


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
    d = cfg.to_dict()
    if args.data:
        d["data"]["root"] = args.data
        manifest = load_manifest(args.data)
        d["data"]["resolution"] = manifest["resolution"]
        d["network"]["height"], d["network"]["width"] = manifest["resolution"]
    if args.mode:
        d["network"]["propagation"]["mode"] = args.mode
    if args.schedule:
        d["network"]["propagation"]["kernel_schedule"] = list(_schedule(args.schedule))
    if args.toy:
        d["network"].update(encoder_channels=[8, 8, 16, 16, 16], fusion_channels=[16, 16, 8],
                            tof_hidden=[32], token_dim=16, bins=32)
    for key in ("epochs", "batch_size", "seed"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.lr is not None:
        d["optim"]["max_lr"] = args.lr
    if args.out:
        d["out_dir"] = args.out
    return ExperimentConfig.from_dict(d)


def cmd_train(args):
    cfg = _experiment_config(args)
    summary = train(cfg, verbose=not args.quiet)
    print(json.dumps({k: summary[k] for k in ("best", "final_loss", "params", "out_dir")}, sort_keys=True))


def cmd_eval(args):
    if not os.path.exists(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model, cfg, _ = load_model(args.ckpt)
    samples = load_dataset(args.data)
    report = eval_report(model, samples, args.out, cfg.network, args.error_maps, oracle=args.oracle)
    print(json.dumps(report["aggregate"], sort_keys=True))


def _capture_dapm_input(model, inputs, stage, rnd):
    fr = model.stages[stage].rounds[rnd]
    if fr.dapm is None:
        return None
    seen = {}
    handle = fr.dapm.register_forward_hook(lambda m, inp, out: seen.update(x=inp[0], mask=inp[1]))
    with torch.no_grad():
        model(*inputs)
    handle.remove()
    return fr.dapm, seen["x"][0], seen["mask"][0]


def run_diagnostics(model, cfg: ExperimentConfig, sample, probe, out_dir, stage=2, rnd=0, trials=32,
                    erf_size=64, erf_channels=8):
    """Attention map of one outside-zone probe, learned kernels, and random-init ERF profiles."""
    os.makedirs(out_dir, exist_ok=True)
    report = {"sample": sample.id, "probe": list(probe), "stage": stage, "round": rnd}
    cache = TensorCache([sample], cfg.network)
    inputs, _, _ = cache.batch([0])
    captured = _capture_dapm_input(model, inputs, stage, rnd)
    if captured is not None:
        dapm, x, mask = captured
        h, w = mask.shape
        fr, fc = int(probe[0] * h / sample.height), int(probe[1] * w / sample.width)
        if bool(mask[fr, fc]):
            raise ValueError(f"probe pixel {tuple(probe)} (feature {fr},{fc}) lies inside the zone area")
        weights = dump_attention(dapm, x, mask, (fr, fc))
        peak = weights.max()
        save_png(os.path.join(out_dir, "attention.png"),
                 np.round(255 * weights / peak) if peak > 0 else np.zeros_like(weights))
        write_sidecar(os.path.join(out_dir, "attention.raw"), weights, {"probe_feature": [fr, fc]})
        report["attention"] = {"feature_probe": [fr, fc], "sum": float(weights.sum()),
                               "n_keys": int(mask.sum())}
    else:
        report["attention"] = None  # this mode has no DAPM
    kernels = []
    for si, st in enumerate(model.stages):
        for ri, fr_ in enumerate(st.rounds):
            if fr_.lkpm is None:
                continue
            img, raw = dump_kernels(fr_.lkpm)
            name = f"kernels_s{si}_r{ri}"
            save_png(os.path.join(out_dir, name + ".png"), kernel_mosaic(img))
            write_sidecar(os.path.join(out_dir, name + ".raw"), raw, {"stage": si, "round": ri})
            kernels.append({"stage": si, "round": ri, "size": fr_.lkpm.kernel_size})
    report["kernels"] = kernels
    erf = {}
    for s in sorted(set(cfg.network.propagation.kernel_schedule)):
        res = estimate_erf(lambda: LKPM(erf_channels, s, conv_method="direct"), erf_channels,
                           (erf_size, erf_size), trials=trials)
        erf[f"lkpm_{s}"] = {"profile": res.profile.tolist(), "energy_radius": res.energy_radius(),
                            "support_radius": res.support_radius}
    mask = np.zeros((erf_size, erf_size), bool)
    q = erf_size // 4
    mask[q:erf_size - q, q:erf_size - q] = True
    res = estimate_erf(lambda: DAPM(erf_channels), erf_channels, (erf_size, erf_size), probe=(1, 1),
                       trials=max(1, trials // 8), mask=mask)
    erf["dapm"] = {"min_in_zone_gradient": float(res.grad_map[mask].min()),
                   "reaches_every_in_zone_pixel": bool((res.grad_map[mask] > 0).all())}
    report["erf"] = erf
    with open(os.path.join(out_dir, "diagnostics.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    return report


def cmd_diagnose(args):
    model, cfg, _ = load_model(args.ckpt)
    samples = load_dataset(args.data)
    sample = samples[args.sample]
    report = run_diagnostics(model, cfg, sample, _pair(args.probe, ","), args.out, args.stage, args.round,
                             args.trials)
    print(json.dumps({k: report[k] for k in ("attention", "kernels")}, sort_keys=True))


def cmd_ablate(args):
    base = _experiment_config(args)
    samples = load_dataset(args.data)
    test = load_dataset(args.test_data) if args.test_data else None
    modes = tuple(args.modes.split(",")) if args.modes else ABLATION_MODES
    schedules = tuple(_schedule(s) for s in args.schedules.split(";"))
    os.makedirs(base.out_dir, exist_ok=True)
    table = run_ablation(base, samples, test, modes, schedules)
    for row in table["rows"]:
        cells = " ".join(f"{k}:{v['out_zone']['rel']}" if v["status"] == "ok" else f"{k}:FAILED"
                         for k, v in row["cells"].items())
        print(f"{row['mode']:10s} {cells}")
    print(os.path.join(base.out_dir, "ablation.json"))


def _train_flags(p):
    p.add_argument("--data", help="dataset directory (from gen-data)")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--schedule", help="kernel sizes per stage, e.g. 7,15,31")
    p.add_argument("--toy", action="store_true", help="desk-scale channel widths")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")


def build_parser():
    ap = argparse.ArgumentParser(prog="crosszone", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--zones", default="8x8")
    p.add_argument("--res", default="128x160")
    p.add_argument("--p-iid", type=float, default=0.15)
    p.add_argument("--p-block", type=float, default=0.25)
    p.add_argument("--holes", type=float, default=0.0, help="fraction of GT pixels to knock out")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _train_flags(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--error-maps", help="directory for error-map PNGs")
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself (sanity check)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="attention map, kernel dumps, ERF profiles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--probe", required=True, help="full-resolution pixel row,col (outside the zones)")
    p.add_argument("--stage", type=int, default=2)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--trials", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("ablate", help="train/eval matrix over modes and kernel schedules")
    _train_flags(p)
    p.add_argument("--test-data")
    p.add_argument("--modes", help="comma separated, default all seven")
    p.add_argument("--schedules", default="7,7,7;31,31,31;7,15,31")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_threads()
    try:
        args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
