"""Acceptance criteria 1-12, one test each.

Every test tags itself with its criterion number; conftest prints one
PASS/FAIL line per criterion at the end of the run. Criteria 8 and 9 train
the toy protocols (hours on one CPU core) and reuse finished runs cached
under results/ in the repository root.
"""
import math
import os
import time

import numpy as np
import pytest
import torch

from crosszone.blocks import (
    DAPM, LKPM, DToImage, PropagationConfig, SelfAttentionBlend, kernel_for_stage, linear_cross_attention, phi,
)
from crosszone.cli import main as cli_main
from crosszone.data import make_sample, read_sample, write_sample
from crosszone.evalkit import compute_metrics, estimate_erf
from crosszone.network import DepthCompletionNet, NetworkConfig, RefinementHead, count_parameters, si_loss
from crosszone.training import ExperimentConfig, load_model, read_checkpoint, save_checkpoint
from crosszone.zone_model import DropoutSpec, ToFFrame, build_zone_layout, reference_layout, rescale_mask, simulate_tof
from fdcheck import check_gradients
from test_data import tree_digest
from test_evalkit import brute_metrics, random_triple
from test_zone_model import all_valid, brute_mask

RESULTS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "results")


@pytest.fixture
def crit(record_property):
    def tag(n, title):
        record_property("criterion", f"{n:2d} {title}")
    return tag


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def random_mask(h, w, n_in, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.zeros(h * w, dtype=torch.bool)
    m[torch.randperm(h * w, generator=g)[:n_in]] = True
    return m.view(h, w)


def test_c01_metric_oracle(crit):
    crit(1, "metric oracle equivalence")
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        pred, gt, valid = random_triple(rng)
        got = compute_metrics(pred, gt, valid)
        for k, v in brute_metrics(pred, gt, valid).items():
            worst = max(worst, abs(getattr(got, k) - v))
    assert worst <= 1e-9

    gt = rng.uniform(0.5, 4.0, (12, 16))
    valid = np.ones_like(gt, bool)
    m = compute_metrics(1.2 * gt, gt, valid)
    assert (m.delta1, m.delta2, m.delta3) == (1.0, 1.0, 1.0)
    assert abs(m.rel - 0.2) <= 1e-12
    assert abs(m.log10 - math.log10(1.2)) <= 1e-12
    m = compute_metrics(2 * gt, gt, valid)
    assert (m.delta1, m.delta2, m.delta3) == (0.0, 0.0, 0.0)
    assert abs(m.rel - 1.0) <= 1e-12
    assert abs(m.log10 - math.log10(2)) <= 1e-12
    assert time.perf_counter() - t0 < 10


def test_c02_gradient_suite(crit, f64):
    crit(2, "finite-difference gradient suite")
    t0 = time.perf_counter()
    errs = {}
    for seed in range(3):
        torch.manual_seed(seed)
        x = torch.randn(1, 4, 5, 6)
        mask = random_mask(5, 6, 9, seed)[None]
        dapm = DAPM(4, num_heads=2)
        errs[("dapm", seed)] = check_gradients(lambda: dapm(x, mask), [x, dapm.q.weight, dapm.k.weight,
                                                                       dapm.v.weight, dapm.merge.weight], seed)

        lk = LKPM(4, 7)
        x = torch.randn(1, 4, 9, 10)
        errs[("lkpm", seed)] = check_gradients(lambda: lk(x), [x, lk.dw.weight, lk.pw1.weight, lk.pw2.weight], seed)

        d2i = DToImage(4, 6, num_heads=2)
        x = torch.randn(1, 4, 4, 10)
        idx = torch.full((1, 4, 10), -1, dtype=torch.long)
        idx[0, :, 1:5], idx[0, :, 5:9] = 0, 1
        tok = torch.randn(1, 2, 2, 6)
        errs[("d2i", seed)] = check_gradients(lambda: d2i(x, tok, idx), [x, tok, d2i.q.weight, d2i.k.weight,
                                                                         d2i.v.weight], seed)

        sa = SelfAttentionBlend(4, num_heads=2)
        x = torch.randn(1, 4, 5, 6)
        errs[("sa", seed)] = check_gradients(lambda: sa(x), [x, sa.q.weight, sa.k.weight, sa.merge.weight], seed)

        g = torch.Generator().manual_seed(seed)
        pred = torch.rand(5, 6, generator=g) + 0.3
        gt = torch.rand(5, 6, generator=g) + 0.3
        valid = torch.rand(5, 6, generator=g) > 0.3
        errs[("si_loss", seed)] = check_gradients(lambda: si_loss(pred, gt, valid), [pred], seed)

        head = RefinementHead(4, bins=6, hidden=8)
        x = torch.randn(1, 4, 3, 4)
        errs[("refine", seed)] = check_gradients(lambda: head(x, out_size=(6, 8))[0],
                                                 [x] + list(head.parameters()), seed)
    worst = {k: max(v) for k, v in errs.items()}
    assert max(worst.values()) <= 1e-4, worst
    assert time.perf_counter() - t0 < 120


def test_c03_dapm_contracts(crit, f64):
    crit(3, "DAPM contracts")
    torch.manual_seed(3)
    dapm = DAPM(8, num_heads=4)
    x = torch.randn(2, 8, 6, 8)
    mask = torch.stack([random_mask(6, 8, 11, 0), random_mask(6, 8, 30, 1)])
    # (a) in-zone tokens pass through the cross-attention step untouched
    a = dapm.attend(x, mask)
    assert torch.equal(a.permute(0, 2, 3, 1)[mask], x.permute(0, 2, 3, 1)[mask])
    # (b) shuffling which in-zone pixel carries which feature
    m1 = mask[:1]
    inside = m1[0].flatten().nonzero().flatten()
    perm = inside[torch.randperm(len(inside), generator=torch.Generator().manual_seed(5))]
    xp = x[:1].flatten(2).clone()
    xp[..., inside] = x[:1].flatten(2)[..., perm]
    ap = dapm.attend(xp.view_as(x[:1]), m1)
    out = ~m1[0]
    assert (dapm.attend(x[:1], m1)[0][:, out] - ap[0][:, out]).abs().max() <= 1e-6
    # (c) empty (and full) masks reduce to conv tail plus skip
    for fill in (False, True):
        full = torch.full((2, 6, 8), fill)
        assert torch.equal(dapm(x, full), dapm.conv(x) + x)
    # (d) O(NM) oracle on N=3, M=5, d=4
    q, k, v = torch.randn(3, 4), torch.randn(5, 4), torch.randn(5, 4)
    ref = torch.zeros(3, 4)
    for i in range(3):
        s = [float(phi(q[i]) @ phi(k[j])) for j in range(5)]
        ref[i] = sum(sj * v[j] for j, sj in enumerate(s)) / sum(s)
    assert (linear_cross_attention(q, k, v, num_heads=1) - ref).abs().max() <= 1e-6


def test_c04_lkpm_contracts(crit, f64):
    crit(4, "LKPM contracts")
    for s in (3, 7, 15, 31):
        torch.manual_seed(s)
        block = LKPM(4, s)
        size = s + 8
        x = torch.randn(1, 4, size, size)
        c = size // 2
        base = block(x)[0, :, c, c]
        r = s // 2
        for dist, inside in [(r, True), (r + 1, False), (r + 3, False)]:
            for dr, dc in [(dist, 0), (-dist, dist), (0, -dist), (dist, dist)]:
                xp = x.clone()
                xp[0, :, c + dr, c + dc] += 1.0
                delta = (block(xp)[0, :, c, c] - base).abs().max().item()
                assert (delta > 1e-8) if inside else (delta < 1e-12), (s, dist, delta)

    block = LKPM(4, 7)
    with torch.no_grad():
        block.pw2.weight.zero_()
        block.pw2.bias.zero_()
    x = torch.randn(2, 4, 10, 12)
    assert torch.equal(block(x), x)

    block = LKPM(5, 7)
    x = torch.randn(1, 5, 9, 9)
    base = block.depthwise(x)
    for ch in range(5):
        xp = x.clone()
        xp[0, ch] += torch.randn(9, 9)
        changed = (block.depthwise(xp) - base).abs().flatten(2).amax(-1)[0]
        assert changed[ch] > 0 and (changed[torch.arange(5) != ch] == 0).all()


def _frame_480():
    layout = reference_layout(480, 640)
    rng = np.random.default_rng(0)
    frame = simulate_tof(rng.uniform(1, 3, (480, 640)), layout, dropout=DropoutSpec.none())
    from crosszone.data import Sample
    return Sample(rgb=rng.random((3, 480, 640)), depth=np.ones((480, 640)), depth_valid=np.ones((480, 640), bool),
                  tof=frame, layout=layout)


def test_c05_kernel_schedule(crit, f64):
    crit(5, "kernel schedule")
    from crosszone.network import build_inputs
    assert [kernel_for_stage((7, 15, 31), i) for i in range(3)] == [7, 15, 31]
    cfg = NetworkConfig(encoder_channels=(4, 4, 8, 8, 8), fusion_channels=(8, 8, 8), tof_hidden=(8,), token_dim=8,
                        bins=8, height=480, width=640)
    net = DepthCompletionNet(cfg)
    seen = []
    for m in net.modules():
        if isinstance(m, LKPM):
            m.register_forward_hook(lambda mod, inp, out: seen.append((tuple(inp[0].shape[-2:]), mod.kernel_size)))
    with torch.no_grad():
        net(*build_inputs([_frame_480()], cfg, torch.float64))
    assert sorted(set(seen)) == [((30, 40), 7), ((60, 80), 15), ((120, 160), 31)]
    for sched in [(7, 7, 7), (31, 31, 31)]:
        d = ExperimentConfig().to_dict()
        d["network"]["propagation"]["kernel_schedule"] = list(sched)
        net = DepthCompletionNet(ExperimentConfig.from_dict(d).network)
        sizes = sorted({m.kernel_size for m in net.modules() if isinstance(m, LKPM)})
        assert sizes == sorted(set(sched))


def test_c06_zone_geometry(crit):
    crit(6, "zone geometry")
    lay = build_zone_layout(480, 640, 55, 43, 45, 45, 8, 8)
    # independent pinhole arithmetic: half-width ratio of the two tangents
    width = 640 * math.tan(math.radians(22.5)) / math.tan(math.radians(27.5))
    t, l, b, r = lay.zone_area_rect
    assert abs((r - l) - width) < 1e-6
    mask = rescale_mask(lay, all_valid(lay), 120, 160)
    cols = np.nonzero(mask.any(axis=0))[0]
    assert len(cols) == 128 and cols[0] == 16 and 159 - cols[-1] == 16
    assert round((r - l) / 4 / 8) == 16
    lay2 = reference_layout(480, 640, grid=(2, 2))
    mask2 = rescale_mask(lay2, all_valid(lay2), 120, 160)
    cols2 = np.nonzero(mask2.any(axis=0))[0]
    assert cols2[0] == 64 and 159 - cols2[-1] == 64
    rng = np.random.default_rng(6)
    for layout in (lay, lay2):
        for fh, fw in [(30, 40), (60, 80), (120, 160)]:
            for trial in range(3):
                g = (layout.grid_h, layout.grid_w)
                valid = np.ones(g, bool) if trial == 0 else rng.random(g) < 0.6
                frame = ToFFrame(np.full(g, 2.0), np.zeros(g), valid)
                got = rescale_mask(layout, frame, fh, fw)
                ref = brute_mask(layout, valid, fh, fw)
                assert got.sum() == ref.sum() and np.array_equal(got, ref)


def test_c07_loss(crit, f64):
    crit(7, "scale-invariant loss")
    torch.manual_seed(7)
    gt = torch.rand(6, 7) + 0.3
    valid = torch.rand(6, 7) > 0.3
    assert si_loss(gt, gt, valid).item() == 0
    one = torch.zeros(6, 7, dtype=torch.bool)
    one[2, 3] = True
    for ratio in (2.0, 0.5, 1.7):
        pred = gt.clone()
        pred[2, 3] *= ratio
        g = math.log(ratio)
        assert abs(si_loss(pred, gt, one).item() - 10 * abs(g) * math.sqrt(1 - 0.85)) <= 1e-9
    pred = torch.rand(6, 7) + 0.3
    for c in (0.5, 2.0, 10.0):
        assert abs(si_loss(c * pred, c * gt, valid).item() - si_loss(pred, gt, valid).item()) <= 1e-10


def _protocol(name):
    from crosszone.experiments import CHECKS, run_protocol
    res = run_protocol(name, RESULTS, verbose=False)
    ok, wins = CHECKS[name](res)
    return res, ok, wins


@pytest.mark.slow
def test_c08_zones8_direction(crit):
    crit(8, "toy propagation experiment, 8x8 zones")
    res, ok, wins = _protocol("zones8")
    print(f"\nper-seed A < baseline: {wins}; train time {res['train_time_total']:.0f}s")
    assert ok, res["table"]
    assert res["train_time_total"] <= 7200


@pytest.mark.slow
def test_c09_zones2_direction(crit):
    crit(9, "toy propagation experiment, 2x2 zones")
    res, ok, wins = _protocol("zones2")
    print(f"\nper-seed dapm gain > lkpm gain: {wins}; train time {res['train_time_total']:.0f}s")
    assert ok, res["table"]
    assert res["train_time_total"] <= 7200


def test_c10_erf_ordering(crit):
    crit(10, "effective receptive field ordering")
    t0 = time.perf_counter()
    radius = {}
    for s in (7, 31):
        res = estimate_erf(lambda: LKPM(8, s, conv_method="direct"), 8, (64, 64), trials=32)
        radius[s] = res.energy_radius()
    assert radius[31] >= 2 * radius[7], radius
    h = w = 40
    mask = np.zeros((h, w), bool)
    mask[20:38, 22:39] = True  # probe sits far away in the opposite corner
    res = estimate_erf(lambda: DAPM(8), 8, (h, w), probe=(1, 1), trials=4, mask=mask)
    assert (res.grad_map[mask] > 0).all()
    assert time.perf_counter() - t0 < 60


def test_c11_parameter_ordering(crit):
    crit(11, "parameter-count ordering")
    n = {m: count_parameters(DepthCompletionNet(NetworkConfig(propagation=PropagationConfig(m))))
         for m in ("A", "B", "C", "D", "baseline", "dapm_only", "lkpm_only")}
    assert n["A"] == n["B"] == n["C"]
    assert n["D"] < n["baseline"] < min(n["dapm_only"], n["lkpm_only"])
    assert max(n["dapm_only"], n["lkpm_only"]) < n["A"]


def test_c12_persistence(crit, tmp_path):
    crit(12, "persistence round trips")
    s = make_sample(5, 77)
    write_sample(s, str(tmp_path / "s"))
    r = read_sample(str(tmp_path / "s"))
    assert np.array_equal(r.rgb, s.rgb) and np.array_equal(r.depth, s.depth)
    assert np.array_equal(r.depth_valid, s.depth_valid)
    for f in ("mean", "variance", "valid"):
        assert np.array_equal(getattr(r.tof, f), getattr(s.tof, f))
    write_sample(r, str(tmp_path / "s2"))
    assert tree_digest(tmp_path / "s") == tree_digest(tmp_path / "s2")

    torch.manual_seed(12)
    cfg = ExperimentConfig()
    model = DepthCompletionNet(cfg.network)
    save_checkpoint(str(tmp_path / "a.ckpt"), model, cfg.to_dict(), 1)
    _, tensors = read_checkpoint(str(tmp_path / "a.ckpt"))
    assert all(torch.equal(tensors[k], v) for k, v in model.state_dict().items())
    again, cfg2, _ = load_model(str(tmp_path / "a.ckpt"))
    save_checkpoint(str(tmp_path / "b.ckpt"), again, cfg2.to_dict(), 1)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    for name in ("g1", "g2"):
        assert cli_main(["gen-data", "--n", "3", "--seed", "9", "--res", "64x80", "--out", str(tmp_path / name)]) == 0
    assert tree_digest(tmp_path / "g1") == tree_digest(tmp_path / "g2")
