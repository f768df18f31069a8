"""Directional toy experiments: propagation variants vs the baseline on
outside-zone accuracy, with the dense 8x8 zone grid and with a 2x2 grid
that leaves a wide field-of-view gap.

Each (mode, seed) run trains from scratch on the same generated data and is
scored on a separate held-out set. Finished runs are cached on disk so an
interrupted experiment resumes where it stopped.
"""
from __future__ import annotations

import argparse
import json
import os
import time

from .blocks import PropagationConfig
from .data import ToFParams, make_sample
from .network import NetworkConfig
from .training import DataConfig, ExperimentConfig, train

MODES = ("baseline", "lkpm_only", "dapm_only", "A")
SEEDS = (0, 1, 2)
TRAIN_SEED_BASE = 1000
TEST_SEED_BASE = 1_000_000

# desk-scale widths and one fusion round per stage, so four models x three
# seeds fit the 2 h single-core budget; everything else stays at the defaults
TOY_NETWORK = dict(encoder_channels=(8, 8, 16, 16, 16), fusion_channels=(16, 16, 8), tof_hidden=(32,),
                   token_dim=16, bins=32, rounds_per_stage=1)

PROTOCOLS = {
    "zones8": {"grid": (8, 8), "n_train": 2000, "n_test": 200, "epochs": 10},
    "zones2": {"grid": (2, 2), "n_train": 2000, "n_test": 200, "epochs": 10},
}


def _samples(n, base, grid):
    tof = ToFParams(grid=grid)
    return [make_sample(i, base, (128, 160), tof) for i in range(n)]


def run_protocol(name: str, out_root: str, n_train=None, n_test=None, epochs=None, modes=MODES, seeds=SEEDS,
                 network: dict | None = None, verbose=True) -> dict:
    proto = dict(PROTOCOLS[name])
    n_train = n_train or proto["n_train"]
    n_test = n_test or proto["n_test"]
    epochs = epochs or proto["epochs"]
    grid = proto["grid"]
    net_kw = dict(TOY_NETWORK, **(network or {}))
    root = os.path.join(out_root, name)
    os.makedirs(root, exist_ok=True)
    train_set = test_set = None
    runs = {}
    t0 = time.time()
    for seed in seeds:
        for mode in modes:
            run_dir = os.path.join(root, f"{mode}_seed{seed}")
            done = os.path.join(run_dir, "summary.json")
            if os.path.exists(done):
                with open(done) as f:
                    runs[f"{mode}/{seed}"] = json.load(f)
                continue
            if train_set is None:
                train_set = _samples(n_train, TRAIN_SEED_BASE, grid)
                test_set = _samples(n_test, TEST_SEED_BASE, grid)
            cfg = ExperimentConfig(
                data=DataConfig(n=n_train, base_seed=TRAIN_SEED_BASE, tof=ToFParams(grid=grid)),
                network=NetworkConfig(**net_kw, propagation=PropagationConfig(mode=mode)),
                epochs=epochs, batch_size=8, seed=seed, out_dir=run_dir, log_every=0)
            summary = train(cfg, train_set, test_set)
            summary["mode"], summary["seed"] = mode, seed
            with open(done, "w") as f:
                json.dump(summary, f, indent=1, sort_keys=True)
            runs[f"{mode}/{seed}"] = summary
            if verbose:
                print(f"[{name}] {mode} seed {seed}: out-zone REL {summary['test']['out_zone']['rel']:.4f} "
                      f"({summary['elapsed']:.0f}s)", flush=True)
    result = {"protocol": name, "grid": list(grid), "n_train": n_train, "n_test": n_test, "epochs": epochs,
              "network": net_kw, "runs": runs, "table": outcome_table(runs, modes, seeds),
              "wall_time_this_call": time.time() - t0,
              "train_time_total": sum(r["elapsed"] for r in runs.values())}
    with open(os.path.join(root, "results.json"), "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    return result


def outcome_table(runs, modes=MODES, seeds=SEEDS):
    """Held-out outside-zone REL per mode and seed, plus relative improvement over baseline."""
    table = {}
    for seed in seeds:
        row = {m: runs[f"{m}/{seed}"]["test"]["out_zone"]["rel"] for m in modes if f"{m}/{seed}" in runs}
        if "baseline" in row:
            base = row["baseline"]
            row["improvement"] = {m: (base - v) / base for m, v in row.items() if m != "baseline"}
        table[str(seed)] = row
    return table


def check_a_beats_baseline(result) -> tuple[bool, list]:
    wins = [row["A"] < row["baseline"] for row in result["table"].values()]
    return sum(wins) >= 2, wins


def check_dapm_gain_exceeds_lkpm(result) -> tuple[bool, list]:
    wins = [row["improvement"]["dapm_only"] > row["improvement"]["lkpm_only"] for row in result["table"].values()]
    return sum(wins) >= 2, wins


CHECKS = {"zones8": check_a_beats_baseline, "zones2": check_dapm_gain_exceeds_lkpm}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("protocol", choices=sorted(PROTOCOLS))
    ap.add_argument("--out", default="results")
    ap.add_argument("--n-train", type=int)
    ap.add_argument("--n-test", type=int)
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args(argv)
    res = run_protocol(args.protocol, args.out, args.n_train, args.n_test, args.epochs)
    check = CHECKS[args.protocol]
    ok, wins = check(res)
    print(json.dumps(res["table"], indent=1))
    print(f"{args.protocol}: {'PASS' if ok else 'FAIL'} per-seed {wins}; train time {res['train_time_total']:.0f}s")


if __name__ == "__main__":
    main()
