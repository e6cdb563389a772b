import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ffcrecon import RoiMask, UnknownMaps
from ffcrecon.datamodel import read_pgm
from ffcrecon.metrics import (
    boundary_band, dispersion_profile, edge_sharpness, export_grid_pgm, joint_histogram_2d,
    rel_abs_diff, roi_stats, underestimation_fraction, write_histogram, write_profile_csv,
)
from ffcrecon.phantom import build_phantom, dispersion_t1, truth_maps
from ffcrecon.presets import preset_protocol

positive = st.floats(1e-3, 1e3, allow_nan=False)


def _maps(t1):
    t1 = np.asarray(t1, float)
    shape = t1.shape[1:]
    return UnknownMaps(np.ones(shape), np.ones(t1.shape), t1)


def test_rel_abs_diff_examples():
    ref = np.array([[100.0, 200.0]])
    mask = np.ones((1, 2), bool)
    assert rel_abs_diff(ref, ref, mask)[1] == 0
    assert rel_abs_diff(2 * ref, ref, mask)[1] == pytest.approx(100.0)
    grid, mean = rel_abs_diff(np.array([[110.0, 180.0]]), ref, mask)
    assert mean == pytest.approx(10.0)
    np.testing.assert_allclose(grid[0], [[10.0, 10.0]])


def test_rel_abs_diff_masks_and_stacks():
    ref = np.full((2, 3, 3), 100.0)
    est = ref.copy()
    est[1, 0, 0] = 150.0
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = mask[1, 1] = True
    grid, mean = rel_abs_diff(est, ref, mask)
    assert mean == pytest.approx(50.0 / 4)
    assert np.isnan(grid[:, ~mask]).all()
    with pytest.raises(ValueError):
        rel_abs_diff(est, -ref, mask)
    with pytest.raises(ValueError):
        rel_abs_diff(est[0], ref, mask)


@settings(max_examples=50, deadline=None)
@given(est=arrays(float, (2, 4, 4), elements=positive), ref=arrays(float, (2, 4, 4), elements=positive),
       c=st.floats(1e-3, 1e3))
def test_rel_abs_diff_scale_invariant(est, ref, c):
    mask = np.ones((4, 4), bool)
    a = rel_abs_diff(est, ref, mask)
    b = rel_abs_diff(c * est, c * ref, mask)
    np.testing.assert_allclose(b[0], a[0], rtol=1e-9)
    assert b[1] == pytest.approx(a[1], rel=1e-9)


def test_histogram_identity_on_diagonal(rng):
    ref = rng.uniform(0, 400, (3, 8, 8))
    h = joint_histogram_2d(ref, ref)
    assert h.counts.sum() == ref.size
    assert np.trace(h.counts) == ref.size


def test_histogram_empty_mask_and_shift():
    ref = np.full((1, 4, 4), 101.0)
    assert joint_histogram_2d(ref, ref, np.zeros((4, 4), bool)).counts.sum() == 0
    width = 4.0
    h = joint_histogram_2d(ref + width, ref)
    r, e = np.unravel_index(np.argmax(h.counts), h.counts.shape)
    assert e == r + 1


@settings(max_examples=30, deadline=None)
@given(est=arrays(float, (3, 5, 5), elements=st.floats(-100, 600)),
       ref=arrays(float, (3, 5, 5), elements=st.floats(1, 500)),
       mask=arrays(bool, (5, 5)))
def test_histogram_total(est, ref, mask):
    h = joint_histogram_2d(est, ref, mask)
    assert h.counts.sum() == 3 * mask.sum()


def test_underestimation_fraction():
    ref = np.array([[[300.0, 300.0, 300.0, 100.0]]])
    est = np.array([[[250.0, 300.0, 350.0, 10.0]]])
    h = joint_histogram_2d(est, ref)
    # below-threshold rows are ignored; the equal-bin pixel counts as not over
    assert underestimation_fraction(h) == pytest.approx(2 / 3)
    h0 = joint_histogram_2d(ref[..., 3:], ref[..., 3:])
    assert np.isnan(underestimation_fraction(h0))


def test_roi_stats_examples():
    t1 = np.array([[[0.1, 0.2], [0.5, 0.5]]])
    roi = RoiMask("two", np.array([[1, 1], [0, 0]]))
    mean, std = roi_stats(_maps(t1), roi)
    assert mean[0] == pytest.approx(0.15)
    assert std[0] == pytest.approx(0.05)
    mean, std = roi_stats(_maps(np.full((2, 3, 3), 0.2)), RoiMask("all", np.ones((3, 3))))
    assert np.all(std == 0)


@settings(max_examples=40, deadline=None)
@given(t1=arrays(float, (2, 4, 4), elements=st.floats(1e-3, 5.0)), mask=arrays(bool, (4, 4)))
def test_roi_mean_within_range(t1, mask):
    if not mask.any():
        return
    mean, _ = roi_stats(_maps(t1), RoiMask("r", mask))
    vals = t1[:, mask]
    assert np.all(mean >= vals.min(axis=1) - 1e-12) and np.all(mean <= vals.max(axis=1) + 1e-12)


def test_truth_profile():
    p = preset_protocol("sim3field", matrix=(64, 64))
    regions = build_phantom((64, 64))
    truth = truth_maps(regions, p)
    lesion = regions[3].roi()
    mean, _ = roi_stats(truth, lesion)
    assert 1e3 * mean[2] == pytest.approx(161.3, abs=0.05)
    rows = dispersion_profile(truth, [r.roi() for r in regions], p.evolution_fields)
    assert len(rows) == 12
    for row in rows:
        reg = next(r for r in regions if r.label == row["roi"])
        assert row["mean_ms"] == pytest.approx(1e3 * dispersion_t1(reg.a, reg.b, row["field_T"]))
        assert row["two_std_ms"] == pytest.approx(0, abs=1e-9)
    grey = sorted((r["field_T"], r["mean_ms"]) for r in rows if r["roi"] == "grey_matter")
    assert grey[0][1] < grey[1][1] < grey[2][1]
    assert dispersion_profile(truth, [], p.evolution_fields) == []


def test_profile_csv(tmp_path):
    rows = [{"field_T": 0.2, "roi": "lesion", "mean_ms": 231.4, "two_std_ms": 1.5}]
    write_profile_csv(rows, tmp_path / "p.csv")
    raw = (tmp_path / "p.csv").read_bytes()
    assert raw == b"field_T,roi,mean_ms,two_std_ms\r\n0.2,lesion,231.4,1.5\r\n"


def test_edge_sharpness_and_band():
    step = np.zeros((10, 10))
    step[:, 5:] = 1.0
    mask = step > 0
    band = boundary_band(mask)
    assert band[:, 4:6].all() and not band[:, :3].any()
    smooth = np.tile(np.linspace(0, 1, 10), (10, 1))
    assert edge_sharpness(step, band) > edge_sharpness(smooth, band)
    assert edge_sharpness(np.ones((10, 10)), band) == 0


def test_pgm_and_histogram_outputs(tmp_path, rng):
    grid = rng.uniform(0, 3, (5, 7))
    meta = export_grid_pgm(grid, tmp_path / "g.pgm")
    back = read_pgm(tmp_path / "g.pgm")
    assert back.shape == (5, 7) and back.max() == 65535 and back.min() == 0
    assert meta["window"] == [grid.min(), grid.max()]
    h = joint_histogram_2d(rng.uniform(0, 400, (2, 6, 6)), rng.uniform(0, 400, (2, 6, 6)), bins=20)
    write_histogram(h, tmp_path / "hist")
    doc = json.loads((tmp_path / "hist.json").read_text())
    assert doc["total"] == 72 and len(doc["edges"]) == 21
    assert read_pgm(tmp_path / "hist.pgm").shape == (20, 20)
    assert (tmp_path / "hist.csv").read_bytes().count(b"\r\n") == 20
