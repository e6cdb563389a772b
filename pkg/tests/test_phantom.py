import json

import numpy as np
import pytest

from ffcrecon.datamodel import ImageSeries, load_dataset, load_maps
from ffcrecon.linops import fourier_adjoint, fourier_sample
from ffcrecon.phantom import (
    NoiseSpec, alpha_for_field, build_phantom, dispersion_t1, measure_snr, object_mask,
    read_rois, rle_decode, rle_encode, simulate_dataset, truth_maps, write_phantom_dataset,
)
from ffcrecon.presets import preset_protocol
from ffcrecon.signal_model import forward_image

# T1 in ms per ROI at 200, 21 and 2.2 mT, as tabulated for the simulation
TABLE_T1 = {
    0.2: (152.0, 178.5, 237.3, 231.4),
    0.021: (121.3, 127.3, 120.7, 193.2),
    0.0022: (96.8, 90.8, 61.3, 161.3),
}
TABLE_AB = ((5.6, -0.10), (4.4, -0.15), (2.6, -0.30), (3.8, -0.08))


@pytest.fixture(scope="module")
def phantom128():
    return build_phantom((128, 128))


@pytest.mark.parametrize("field", sorted(TABLE_T1))
def test_table_t1_values(field):
    for (a, b), ms in zip(TABLE_AB, TABLE_T1[field]):
        assert abs(1e3 * dispersion_t1(a, b, field) - ms) <= 0.05


def test_dispersion_examples():
    assert 1e3 * dispersion_t1(2.6, -0.3, 0.2) == pytest.approx(237.3, abs=0.05)
    assert 1e3 * dispersion_t1(5.6, -0.1, 0.2) == pytest.approx(152.0, abs=0.05)
    assert 1e3 * dispersion_t1(2.6, -0.3, 0.0022) == pytest.approx(61.3, abs=0.05)
    with pytest.raises(ValueError):
        dispersion_t1(0.0, -0.1, 0.2)
    with pytest.raises(ValueError):
        dispersion_t1(1.0, -0.1, 0.0)


def test_truth_maps_match_table(phantom128):
    p = preset_protocol("sim3field", matrix=(128, 128))
    truth = truth_maps(phantom128, p)
    for reg, (a, b) in zip(phantom128, TABLE_AB):
        for i, f in enumerate(p.evolution_fields):
            np.testing.assert_allclose(truth.T1[i][reg.mask], dispersion_t1(a, b, f))
        assert np.all(truth.C[reg.mask] == reg.C)
    assert [r.C for r in phantom128] == pytest.approx([1, 1 / 3, 2 / 3, 2.03 / 3])
    assert not truth.C[~object_mask(phantom128)].any()
    for f, mag, ph in ((0.2, 1.0, 0.5236), (0.0211, 0.75, 0.6981), (0.0022, 0.6, 0.8727)):
        assert alpha_for_field(f) == pytest.approx(mag * np.exp(1j * ph))


def test_masks_disjoint_and_nonempty(phantom128):
    masks = np.array([r.mask for r in phantom128])
    assert np.all(masks.sum(axis=(1, 2)) > 0)
    assert masks.sum(axis=0).max() == 1
    assert [r.roi_index for r in phantom128] == [1, 2, 3, 4]


def test_lesion_strictly_inside_grey_matter(phantom128):
    from scipy.ndimage import binary_dilation
    grey, lesion = phantom128[2].mask, phantom128[3].mask
    # every neighbour of a lesion pixel is lesion or grey matter
    ring = binary_dilation(lesion) & ~lesion
    assert ring.any() and np.all(grey[ring])


def test_area_scales_with_resolution(phantom128):
    small = build_phantom((64, 64))
    for a, b in zip(small, phantom128):
        ratio = b.mask.sum() / a.mask.sum()
        assert ratio == pytest.approx(4.0, rel=0.05)


def test_small_matrix_rejected():
    with pytest.raises(ValueError):
        build_phantom((16, 16))


def test_noiseless_identity():
    p = preset_protocol("sim3field", matrix=(32, 32))
    regions = build_phantom((32, 32))
    ks, truth = simulate_dataset(regions, p, NoiseSpec(0.0, 0))
    np.testing.assert_array_equal(ks.data, fourier_sample(forward_image(truth, p).data, p.mask))


def test_seed_determinism():
    p = preset_protocol("sim3field", matrix=(32, 32))
    regions = build_phantom((32, 32))
    a, ta = simulate_dataset(regions, p, NoiseSpec(0.02, 7))
    b, tb = simulate_dataset(regions, p, NoiseSpec(0.02, 7))
    c, tc = simulate_dataset(regions, p, NoiseSpec(0.02, 8))
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.allclose(a.data, c.data)
    assert ta.to_stack().tobytes() == tc.to_stack().tobytes()


def test_noise_statistics():
    p = preset_protocol("sim3field", matrix=(128, 128))
    regions = build_phantom((128, 128))
    sigma = 0.03
    ks, truth = simulate_dataset(regions, p, NoiseSpec(sigma, 3))
    noise = fourier_adjoint(ks).data - forward_image(truth, p).data
    bg = ~object_mask(regions)
    parts = np.concatenate([noise[:, bg].real.ravel(), noise[:, bg].imag.ravel()])
    assert abs(parts.mean()) < 3 * sigma / np.sqrt(parts.size)
    assert parts.std() == pytest.approx(sigma, rel=0.02)


@pytest.mark.parametrize("fraction", [0.0, 0.01, 0.04, 0.1])
def test_amplitude_bound(fraction):
    p = preset_protocol("sim3field", matrix=(64, 64))
    ks, _ = simulate_dataset(build_phantom((64, 64)), p, NoiseSpec(fraction, 11))
    img = fourier_adjoint(ks).data
    assert np.abs(img).max() <= 1 + 5 * fraction


@pytest.mark.parametrize("fraction, wm, gm", [(0.01, 33.3, 66.7), (0.04, 8.33, 16.7)])
def test_snr_after_inversion(fraction, wm, gm):
    p = preset_protocol("sim3field", matrix=(128, 128))
    regions = build_phantom((128, 128))
    ks, _ = simulate_dataset(regions, p, NoiseSpec(fraction, 1))
    imgs = fourier_adjoint(ks)
    assert measure_snr(imgs, regions[1].roi(), fraction) == pytest.approx(wm, rel=0.025)
    assert measure_snr(imgs, regions[2].roi(), fraction) == pytest.approx(gm, rel=0.025)


def test_snr_noiseless_is_unbounded(phantom128):
    p = preset_protocol("sim3field", matrix=(128, 128))
    imgs = ImageSeries(p, np.zeros((15, 128, 128), complex))
    assert measure_snr(imgs, phantom128[1].roi(), 0.0) == float("inf")
    with pytest.raises(ValueError):
        measure_snr(imgs, phantom128[1].roi(), 0.01, method="peak")


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(-0.01)
    with pytest.raises(ValueError):
        NoiseSpec(0.2)
    with pytest.raises(ValueError):
        NoiseSpec(0.01, -1)


def test_rle_round_trip(rng):
    for _ in range(20):
        mask = rng.random((9, 13)) < rng.uniform(0, 1)
        np.testing.assert_array_equal(rle_decode(rle_encode(mask), mask.shape), mask)
    assert rle_encode(np.zeros((2, 2), bool)) == []
    assert rle_encode(np.ones((2, 2), bool)) == [0, 4]


def test_written_dataset(tmp_path):
    p = preset_protocol("sim3field", matrix=(32, 32))
    snr = write_phantom_dataset(tmp_path, p, NoiseSpec(0.01, 5))
    ks = load_dataset(tmp_path)
    truth = load_maps(tmp_path, stem="truth_maps")
    assert ks.data.shape == (15, 32, 32) and truth.shape == (32, 32)
    rois = read_rois(tmp_path / "rois.json")
    regions = build_phantom((32, 32))
    for roi, reg in zip(rois, regions):
        np.testing.assert_array_equal(roi.pixels, reg.mask)
    sim = json.loads((tmp_path / "simulation.json").read_text())
    assert sim["seed"] == 5 and "Philox" in sim["rng"]
    assert set(snr) == {r.label for r in regions}
