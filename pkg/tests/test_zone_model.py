import json
import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crosszone.zone_model import (
    DropoutSpec,
    ToFFrame,
    ZoneLayout,
    build_zone_layout,
    fit_zone_gaussian,
    reference_layout,
    rescale_mask,
    sample_frame,
    sample_zone_values,
    simulate_tof,
    zone_index_map,
)


def all_valid(layout):
    g = (layout.grid_h, layout.grid_w)
    return ToFFrame(np.full(g, 2.0), np.zeros(g), np.ones(g, bool))


def brute_mask(layout, valid, feat_h, feat_w):
    """Enumerate feature-pixel centers one by one against every valid rect."""
    out = np.zeros((feat_h, feat_w), dtype=bool)
    sy, sx = layout.image_h / feat_h, layout.image_w / feat_w
    rects = layout.zone_rects
    for r in range(feat_h):
        for c in range(feat_w):
            y, x = (r + 0.5) * sy, (c + 0.5) * sx
            for i in range(layout.grid_h):
                for j in range(layout.grid_w):
                    t, l, b, rr = rects[i, j]
                    t, l = max(t, 0.0), max(l, 0.0)
                    b, rr = min(b, layout.image_h), min(rr, layout.image_w)
                    if valid[i, j] and t <= y < b and l <= x < rr:
                        out[r, c] = True
    return out


# ---------------------------------------------------------------- fit


def test_fit_constant():
    assert fit_zone_gaussian([2.0] * 40, 4.0) == (2.0, 0.0, True)


def test_fit_two_level_histogram():
    d = [1.0] * 50 + [3.0] * 50
    # moments of the histogram {1: 50, 3: 50}
    m = (50 * 1.0 + 50 * 3.0) / 100
    v = (50 * (1.0 - m) ** 2 + 50 * (3.0 - m) ** 2) / 100
    assert (m, v) == (2.0, 1.0)
    assert fit_zone_gaussian(d, 4.0) == (m, v, True)


def test_fit_range_cap_excludes_everything():
    assert fit_zone_gaussian([5.0] * 40, 4.0)[2] is False


def test_fit_drops_far_and_bad_pixels():
    d = [2.0] * 20 + [9.0] * 50 + [0.0, -1.0, float("nan")]
    assert fit_zone_gaussian(d, 4.0) == (2.0, 0.0, True)


def test_fit_min_pixels():
    assert fit_zone_gaussian([2.0] * 15, 4.0)[2] is False
    assert fit_zone_gaussian([2.0] * 16, 4.0)[2] is True


def test_fit_empty_raises():
    with pytest.raises(ValueError, match="no pixels in zone footprint"):
        fit_zone_gaussian([], 4.0)


@given(st.lists(st.floats(0.05, 3.99), min_size=16, max_size=200))
def test_fit_mean_bounded_and_variance_zero_iff_constant(depths):
    m, v, ok = fit_zone_gaussian(depths, 4.0)
    assert ok
    assert min(depths) - 1e-12 <= m <= max(depths) + 1e-12
    assert (v == 0.0) == (len(set(depths)) == 1) or v < 1e-24


# ---------------------------------------------------------------- sampling


def test_sample_zero_spread():
    np.testing.assert_array_equal(sample_zone_values(2.0, 0.0, 16), np.full(16, 2.0))


def test_sample_mean_preserved():
    assert abs(sample_zone_values(2.0, 0.01, 16).mean() - 2.0) < 1e-12


def test_sample_against_reference_quantiles():
    ref = NormalDist()
    expected = [2.0 + 0.2 * ref.inv_cdf(p) for p in (0.125, 0.375, 0.625, 0.875)]
    np.testing.assert_allclose(sample_zone_values(2.0, 0.04, 4), expected, rtol=0, atol=1e-12)


def test_sample_negative_variance_raises():
    with pytest.raises(ValueError):
        sample_zone_values(1.0, -0.1)


@given(st.floats(0.2, 4.0), st.floats(0.0, 0.5), st.integers(1, 64))
def test_sample_properties(mean, var, count):
    v = sample_zone_values(mean, var, count)
    assert np.all(np.diff(v) >= 0)
    sd = math.sqrt(var)
    assert np.all(v <= mean + 4 * sd + 1e-12)
    assert np.all(v >= min(mean - 4 * sd, 1e-6) - 1e-12)
    if mean - 4 * sd > 1e-6:
        assert abs(v.mean() - mean) < 1e-12


def test_sample_frame_matches_scalar_path():
    frame = ToFFrame([[1.5, 2.0]], [[0.04, 0.0]], [[True, False]])
    s = sample_frame(frame)
    np.testing.assert_allclose(s.values[0, 0], sample_zone_values(1.5, 0.04), atol=1e-15)
    assert s.values.shape == (1, 2, 16)
    assert list(s.valid[0]) == [True, False]


# ---------------------------------------------------------------- layout


def test_reference_layout_8x8_quarter_resolution():
    lay = build_zone_layout(480, 640, 55, 43, 45, 45, 8, 8)
    t, l, b, r = lay.zone_area_rect
    assert abs((r - l) - 512) < 4
    assert round((r - l) / 4 / 8) == 16
    assert abs((b - t) - 512) < 8
    # horizontal margin at quarter resolution, counted in whole pixels
    mask = rescale_mask(lay, all_valid(lay), 120, 160)
    cols = np.nonzero(mask.any(axis=0))[0]
    assert cols[0] == 16 and 160 - 1 - cols[-1] == 16
    assert len(cols) == 128


def test_reference_layout_2x2_quarter_resolution():
    lay = reference_layout(480, 640, grid=(2, 2))
    t, l, b, r = lay.zone_area_rect
    assert round((r - l) / 4 / 2) == 16 and round((b - t) / 4 / 2) == 16
    mask = rescale_mask(lay, all_valid(lay), 120, 160)
    cols = np.nonzero(mask.any(axis=0))[0]
    assert cols[0] == 64 and 160 - 1 - cols[-1] == 64
    assert mask.sum() == 32 * 32


def test_equal_fov_single_zone_covers_image():
    lay = build_zone_layout(480, 640, 60, 45, 60, 45, 1, 1)
    np.testing.assert_allclose(lay.zone_area_rect, (0, 0, 480, 640), atol=1e-9)
    assert rescale_mask(lay, all_valid(lay), 60, 80).all()


def test_wide_tof_is_allowed():
    lay = build_zone_layout(100, 100, 40, 40, 60, 60, 4, 4)
    assert lay.zone_area_rect[0] < 0
    assert rescale_mask(lay, all_valid(lay), 25, 25).all()


@pytest.mark.parametrize("kw", [dict(image_h=0), dict(grid_w=0), dict(cam_fov_h=180.0),
                                dict(tof_fov_v=0.0)])
def test_layout_rejects_bad_args(kw):
    args = dict(image_h=48, image_w=64, cam_fov_h=55.0, cam_fov_v=43.0, tof_fov_h=45.0,
                tof_fov_v=45.0, grid_h=8, grid_w=8)
    args.update(kw)
    with pytest.raises(ValueError):
        build_zone_layout(**args)


def test_layout_tiles_area_row_major():
    lay = reference_layout()
    rects = lay.zone_rects
    np.testing.assert_allclose(rects[:, 1:, 1], rects[:, :-1, 3])
    np.testing.assert_allclose(rects[1:, :, 0], rects[:-1, :, 2])
    assert rects[0, 0, 0] == lay.zone_area_rect[0] and rects[-1, -1, 3] == lay.zone_area_rect[3]


def test_layout_params_roundtrip():
    lay = reference_layout(128, 160, grid=(2, 2))
    again = ZoneLayout.from_params(json.loads(json.dumps(lay.params())))
    np.testing.assert_array_equal(again.row_edges, lay.row_edges)
    np.testing.assert_array_equal(again.col_edges, lay.col_edges)


# ---------------------------------------------------------------- masks


def test_mask_sum_reference_geometry():
    lay = reference_layout()
    frame = all_valid(lay)
    expected = brute_mask(lay, frame.valid, 120, 160)
    assert expected.sum() == 120 * 128 == 15360
    np.testing.assert_array_equal(rescale_mask(lay, frame, 120, 160), expected)


def test_mask_single_zone():
    lay = reference_layout()
    valid = np.zeros((8, 8), bool)
    valid[3, 3] = True
    frame = ToFFrame(np.full((8, 8), 2.0), np.zeros((8, 8)), valid)
    expected = brute_mask(lay, valid, 120, 160)
    assert expected.sum() == 256
    np.testing.assert_array_equal(rescale_mask(lay, frame, 120, 160), expected)


def test_mask_all_invalid():
    lay = reference_layout()
    frame = ToFFrame(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8), bool))
    assert not rescale_mask(lay, frame, 30, 40).any()
    assert (zone_index_map(lay, frame, 30, 40) == -1).all()


def test_index_map_matches_containing_rect():
    lay = reference_layout()
    frame = all_valid(lay)
    idx = zone_index_map(lay, frame, 60, 80)
    rects = lay.zone_rects
    for r, c in [(0, 10), (30, 40), (59, 71), (17, 8), (17, 9)]:
        y, x = (r + 0.5) * 8, (c + 0.5) * 8
        hits = [i * 8 + j for i in range(8) for j in range(8)
                if rects[i, j, 0] <= y < rects[i, j, 2] and rects[i, j, 1] <= x < rects[i, j, 3]]
        assert idx[r, c] == (hits[0] if hits else -1)


layouts = st.builds(
    lambda h, w, cf, tf, gh, gw: build_zone_layout(h, w, cf, cf * 0.8, tf, tf, gh, gw),
    st.integers(8, 64), st.integers(8, 64), st.floats(30, 90), st.floats(10, 100),
    st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=60, deadline=None)
@given(layouts, st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_index_map_consistent_with_mask(lay, fh, fw, seed):
    rng = np.random.default_rng(seed)
    valid = rng.random((lay.grid_h, lay.grid_w)) < 0.6
    frame = ToFFrame(np.ones(valid.shape), np.zeros(valid.shape), valid)
    mask = rescale_mask(lay, frame, fh, fw)
    idx = zone_index_map(lay, frame, fh, fw)
    np.testing.assert_array_equal(idx >= 0, mask)
    assert np.all(valid.ravel()[idx[idx >= 0]])


@settings(max_examples=40, deadline=None)
@given(layouts, st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_mask_monotone_in_validity(lay, fh, fw, seed):
    rng = np.random.default_rng(seed)
    valid = rng.random((lay.grid_h, lay.grid_w)) < 0.7
    fewer = valid & (rng.random(valid.shape) < 0.5)
    f1 = ToFFrame(np.ones(valid.shape), np.zeros(valid.shape), valid)
    f2 = ToFFrame(np.ones(valid.shape), np.zeros(valid.shape), fewer)
    m1, m2 = rescale_mask(lay, f1, fh, fw), rescale_mask(lay, f2, fh, fw)
    assert not (m2 & ~m1).any()


@pytest.mark.parametrize("feat", [(1, 1), (2, 3), (4, 5), (8, 10), (30, 40), (120, 160)])
@pytest.mark.parametrize("grid", [(8, 8), (2, 2)])
def test_outside_zone_nonempty_when_fov_narrower(feat, grid):
    lay = reference_layout(128, 160, grid=grid)
    mask = rescale_mask(lay, all_valid(lay), *feat)
    # pixel-center sampling: the margin is visible once a center lands in it
    first_center = 0.5 * lay.image_w / feat[1]
    if first_center < lay.zone_area_rect[1]:
        assert not mask.all()
    else:
        assert feat[1] < 8


@pytest.mark.parametrize("grid", [(8, 8), (2, 2)])
def test_outside_zone_nonempty_at_fusion_resolutions(grid):
    lay = reference_layout(128, 160, grid=grid)
    for feat in [(8, 10), (16, 20), (32, 40), (128, 160)]:
        assert not rescale_mask(lay, all_valid(lay), *feat).all()


# ---------------------------------------------------------------- simulation


def test_simulate_constant_scene():
    lay = reference_layout(128, 160)
    f = simulate_tof(np.full((128, 160), 2.0), lay, dropout=DropoutSpec.none())
    assert f.valid.all()
    np.testing.assert_allclose(f.mean, 2.0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(f.variance, 0.0, atol=1e-24)


def test_simulate_full_dropout():
    lay = reference_layout(128, 160)
    f = simulate_tof(np.full((128, 160), 2.0), lay, dropout=DropoutSpec(1.0, 0.0))
    assert not f.valid.any()


def test_simulate_two_plane_straddle():
    lay = build_zone_layout(32, 64, 50, 50, 50, 50, 1, 1)
    depth = np.ones((32, 64))
    depth[:, 32:] = 3.0
    # moment oracle over the footprint (whole image here)
    footprint = depth[lay.zone_rects[0, 0, 0].astype(int):, :].ravel()
    m = footprint.sum() / footprint.size
    v = ((footprint - m) ** 2).sum() / footprint.size
    f = simulate_tof(depth, lay, dropout=DropoutSpec.none())
    assert (m, v) == (2.0, 1.0)
    assert f.mean[0, 0] == m and f.variance[0, 0] == v


def test_simulate_deterministic():
    lay = reference_layout(128, 160)
    rng = np.random.default_rng(0)
    depth = rng.uniform(0.5, 5.0, (128, 160))
    a = simulate_tof(depth, lay, seed=7)
    b = simulate_tof(depth, lay, seed=7)
    assert a.to_json() == b.to_json()
    for x, y in [(a.mean, b.mean), (a.variance, b.variance), (a.valid, b.valid)]:
        assert x.tobytes() == y.tobytes()


def test_simulate_dropout_statistics():
    lay = reference_layout(128, 160)
    depth = np.full((128, 160), 2.0)
    rates = [1 - simulate_tof(depth, lay, dropout=DropoutSpec(0.15, 0.0), seed=s).valid.mean()
             for s in range(200)]
    assert abs(np.mean(rates) - 0.15) < 0.02


def test_simulate_errors():
    lay = reference_layout(128, 160)
    with pytest.raises(ValueError):
        simulate_tof(np.zeros((128, 160)), lay)
    with pytest.raises(ValueError):
        simulate_tof(np.ones((64, 64)), lay)


def test_tof_json_roundtrip_9_significant_digits():
    rng = np.random.default_rng(3)
    valid = rng.random((8, 8)) < 0.8
    f = ToFFrame(rng.uniform(0.1, 4, (8, 8)) * valid, rng.uniform(0, 0.3, (8, 8)) * valid, valid)
    doc = json.loads(f.to_json(reference_layout()))
    assert doc["layout"]["grid_h"] == 8
    back = ToFFrame.from_json(json.dumps(doc))
    sig = np.vectorize(lambda v: float(f"{v:.9g}"))
    np.testing.assert_array_equal(back.mean, sig(f.mean))
    np.testing.assert_array_equal(back.variance, sig(f.variance))
    np.testing.assert_array_equal(back.valid, f.valid)
    assert back.to_json() == ToFFrame.from_json(back.to_json()).to_json()


def test_tof_json_malformed():
    with pytest.raises(ValueError, match="malformed"):
        ToFFrame.from_json('{"grid_h": 2}')
