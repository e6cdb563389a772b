"""Numerical four-region head phantom with power-law T1 dispersion."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .datamodel import (AcquisitionProtocol, ImageSeries, KSpaceSeries, RoiMask, UnknownMaps,
                        save_dataset, save_maps)
from .linops import fourier_adjoint, fourier_sample
from .signal_model import forward_image

PHANTOM_VERSION = 1
RNG_ALGORITHM = "numpy.random.Philox-4x64-10"

# (label, roi_index, a [1/s/T^b], b, C)
REGION_TABLE = (
    ("subcutaneous_fat", 1, 5.6, -0.10, 1.0),
    ("white_matter", 2, 4.4, -0.15, 1.0 / 3.0),
    ("grey_matter", 3, 2.6, -0.30, 2.0 / 3.0),
    ("lesion", 4, 3.8, -0.08, 2.03 / 3.0),
)

# alpha per evolution field: (field T, magnitude, phase rad)
ALPHA_TABLE = ((0.2, 1.0, 0.5236), (0.0211, 0.75, 0.6981), (0.0022, 0.6, 0.8727))

# Ellipse semi-axes (x, y) as fractions of the half field of view.
GEOMETRY = {
    "outer": (0.80, 0.92),
    "fat_inner": (0.72, 0.84),
    "brain": (0.60, 0.72),
    "lesion_center": (0.25, -0.15),
    "lesion_radius": 0.15,
}

MIN_MATRIX = 32


@dataclass(frozen=True, eq=False)
class PhantomRegion:
    label: str
    mask: np.ndarray
    a: float
    b: float
    C: complex
    roi_index: int

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"region {self.label}: a must be positive")
        if not np.isfinite(self.C):
            raise ValueError(f"region {self.label}: C must be finite")

    def roi(self) -> RoiMask:
        return RoiMask(self.label, self.mask)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise std per real/imaginary part, as a fraction of the maximum signal 1."""

    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.fraction) and 0 <= self.fraction <= 0.1):
            raise ValueError(f"noise fraction must lie in [0, 0.1], got {self.fraction}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def dispersion_t1(a, b, field):
    """T1 in seconds from ``1/T1 = a * field**b`` (field in tesla)."""
    a = np.asarray(a, float)
    field = np.asarray(field, float)
    if np.any(a <= 0) or np.any(field <= 0):
        raise ValueError("a and field must be positive")
    return 1.0 / (a * field ** np.asarray(b, float))


def alpha_for_field(field: float) -> complex:
    """Inversion factor at ``field``; interpolated in log-field between table rows."""
    f, mag, ph = (np.array(c, float) for c in zip(*sorted(ALPHA_TABLE)))
    x = np.log(field)
    m = np.interp(x, np.log(f), mag)
    p = np.interp(x, np.log(f), ph)
    return complex(m * np.exp(1j * p))


def _coords(matrix):
    nx, ny = matrix
    x = (np.arange(nx) + 0.5 - nx / 2) / (nx / 2)
    y = (np.arange(ny) + 0.5 - ny / 2) / (ny / 2)
    return np.meshgrid(x, y)


def _ellipse(X, Y, axes, center=(0.0, 0.0)):
    return ((X - center[0]) / axes[0]) ** 2 + ((Y - center[1]) / axes[1]) ** 2 <= 1.0


def build_phantom(matrix=(128, 128)) -> list:
    """Rasterise the four regions at pixel centres for an ``(N_x, N_y)`` grid."""
    nx, ny = (int(n) for n in matrix)
    if nx < MIN_MATRIX or ny < MIN_MATRIX:
        raise ValueError(f"matrix must be at least {MIN_MATRIX}x{MIN_MATRIX}, got {(nx, ny)}")
    X, Y = _coords((nx, ny))
    outer = _ellipse(X, Y, GEOMETRY["outer"])
    fat_inner = _ellipse(X, Y, GEOMETRY["fat_inner"])
    brain = _ellipse(X, Y, GEOMETRY["brain"])
    r = GEOMETRY["lesion_radius"]
    lesion = _ellipse(X, Y, (r, r), GEOMETRY["lesion_center"]) & brain
    masks = (outer & ~fat_inner, fat_inner & ~brain, brain & ~lesion, lesion)
    return [PhantomRegion(label, m, a, b, complex(C), idx)
            for (label, idx, a, b, C), m in zip(REGION_TABLE, masks)]


def object_mask(regions) -> np.ndarray:
    return np.logical_or.reduce([r.mask for r in regions])


def truth_maps(regions, protocol: AcquisitionProtocol) -> UnknownMaps:
    """Ground-truth maps; background has C = 0 and the table T1 of ROI 3."""
    shape = regions[0].mask.shape
    n_e = protocol.n_fields
    C = np.zeros(shape, complex)
    alpha = np.empty((n_e,) + shape, complex)
    T1 = np.empty((n_e,) + shape)
    for i, f in enumerate(protocol.evolution_fields):
        alpha[i] = alpha_for_field(f)
    bg = regions[2]
    for i, f in enumerate(protocol.evolution_fields):
        T1[i] = dispersion_t1(bg.a, bg.b, f)
    for reg in regions:
        C[reg.mask] = reg.C
        for i, f in enumerate(protocol.evolution_fields):
            T1[i][reg.mask] = dispersion_t1(reg.a, reg.b, f)
    return UnknownMaps(C, alpha, T1)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def simulate_dataset(regions, protocol: AcquisitionProtocol, noise: NoiseSpec = NoiseSpec()):
    """Forward-simulate k-space for the phantom.

    Complex Gaussian noise with std ``noise.fraction`` per real and
    imaginary part is added in the image domain before Fourier sampling.
    Returns ``(KSpaceSeries, UnknownMaps)``.
    """
    if regions[0].mask.shape != protocol.shape:
        raise ValueError("phantom grid does not match protocol matrix")
    truth = truth_maps(regions, protocol)
    img = forward_image(truth, protocol).data
    if noise.fraction > 0:
        rng = make_rng(noise.seed)
        img = img + noise.fraction * (rng.standard_normal(img.shape)
                                      + 1j * rng.standard_normal(img.shape))
    ks = KSpaceSeries(protocol, fourier_sample(img, protocol.mask))
    return ks, truth


def _extrapolated_amplitude(t, s):
    """Fit ``s(t) = p exp(-t/T1) + q`` (complex p, q) and return ``|p + q|``."""
    def solve(T1):
        A = np.stack([np.exp(-t / T1), np.ones_like(t)], axis=1).astype(complex)
        coef, *_ = np.linalg.lstsq(A, s, rcond=None)
        return coef, float(np.sum(np.abs(A @ coef - s) ** 2))

    grid = np.geomspace(1e-3, 10.0, 200)
    cost = [solve(T1)[1] for T1 in grid]
    j = int(np.argmin(cost))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
    res = minimize_scalar(lambda lt: solve(np.exp(lt))[1], bounds=(np.log(lo), np.log(hi)),
                          method="bounded", options={"xatol": 1e-10})
    coef, _ = solve(np.exp(res.x))
    return abs(coef[0] + coef[1])


def measure_snr(images: ImageSeries, roi: RoiMask, noise_fraction: float,
                method: str = "post_inversion") -> float:
    """ROI signal-to-noise ratio at the highest evolution field.

    ``post_inversion`` fits a mono-exponential recovery to the ROI-mean
    series of the highest field and divides its amplitude at ``t = 0`` by
    the noise std.  ``shortest_time`` uses the ROI mean magnitude of the
    shortest measured time instead.  Noiseless input returns ``inf``.
    """
    if noise_fraction < 0:
        raise ValueError("noise_fraction must be nonnegative")
    if noise_fraction == 0:
        return float("inf")
    protocol = images.protocol
    i_hi = int(np.argmax(protocol.evolution_fields))
    sel = np.flatnonzero(protocol.field_index == i_hi)
    data = images.data[:, roi.pixels]
    if method == "shortest_time":
        n0 = sel[np.argmin(protocol.times[sel])]
        return float(np.mean(np.abs(data[n0])) / noise_fraction)
    if method != "post_inversion":
        raise ValueError(f"unknown SNR method {method!r}")
    if len(sel) < 3:
        raise ValueError("post-inversion SNR needs at least three times at the highest field")
    return _extrapolated_amplitude(protocol.times[sel], data[sel].mean(axis=1)) / noise_fraction


# ---------------------------------------------------------------- on-disk output

def rle_encode(mask: np.ndarray) -> list:
    """Row-major ``[start, length, ...]`` runs of set pixels."""
    flat = np.concatenate([[0], np.asarray(mask, bool).ravel().astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[::2], edges[1::2]
    return np.column_stack([starts, ends - starts]).ravel().tolist()


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), bool)
    runs = np.asarray(runs, int).reshape(-1, 2)
    for s, n in runs:
        flat[s:s + n] = True
    return flat.reshape(shape)


def write_rois(regions, path) -> None:
    shape = regions[0].mask.shape
    doc = {"shape": list(shape), "encoding": "row-major run-length [start, length]",
           "rois": [{"label": r.label, "roi_index": r.roi_index, "runs": rle_encode(r.mask)}
                    for r in regions]}
    Path(path).write_text(json.dumps(doc))


def read_rois(path) -> list:
    """Read ``rois.json`` into a list of :class:`RoiMask` ordered by ROI index."""
    doc = json.loads(Path(path).read_text())
    shape = tuple(doc["shape"])
    rois = sorted(doc["rois"], key=lambda r: r.get("roi_index", 0))
    return [RoiMask(r["label"], rle_decode(r["runs"], shape)) for r in rois]


def phantom_description() -> dict:
    return {
        "version": PHANTOM_VERSION,
        "coordinates": "pixel centres, x and y scaled to [-1, 1] over the field of view",
        "geometry": {k: list(v) if isinstance(v, tuple) else v for k, v in GEOMETRY.items()},
        "regions": [{"label": lab, "roi_index": i, "a": a, "b": b, "C": C}
                    for lab, i, a, b, C in REGION_TABLE],
        "alpha": [{"field_T": f, "magnitude": m, "phase_rad": p} for f, m, p in ALPHA_TABLE],
        "background_C": 0.0,
    }


def write_phantom_dataset(path, protocol: AcquisitionProtocol, noise: NoiseSpec) -> dict:
    """Simulate and write dataset, truth maps, ROIs and sidecars; return SNR summary."""
    path = Path(path)
    regions = build_phantom(protocol.matrix)
    ks, truth = simulate_dataset(regions, protocol, noise)
    save_dataset(ks, path)
    save_maps(truth, path, stem="truth_maps")
    write_rois(regions, path / "rois.json")
    (path / "phantom.json").write_text(json.dumps(phantom_description(), indent=2))
    (path / "simulation.json").write_text(json.dumps(
        {"rng": RNG_ALGORITHM, "seed": int(noise.seed), "noise_fraction": noise.fraction,
         "noise_domain": "image"}, indent=2))
    images = fourier_adjoint(ks)
    return {r.label: measure_snr(images, r.roi(), noise.fraction) for r in regions}
