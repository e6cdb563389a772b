"""Error maps, joint histograms, ROI statistics and dispersion profiles."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import RoiMask, UnknownMaps, export_csv, write_pgm


def _stacked(a):
    a = np.asarray(a, float)
    return a[None] if a.ndim == 2 else a


def rel_abs_diff(est, ref, object_mask):
    """Pixel-wise ``100 |est - ref| / ref`` on the mask and its mean.

    ``est`` and ``ref`` are grids or field stacks ``(N_E, N_y, N_x)``; the
    mean runs over all masked pixels of all fields.  Pixels outside the
    mask are NaN in the returned grid.
    """
    est, ref = _stacked(est), _stacked(ref)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {ref.shape}")
    mask = np.broadcast_to(np.asarray(object_mask, bool), ref.shape)
    if np.any(ref[mask] <= 0):
        raise ValueError("reference must be positive on the mask")
    out = np.full(ref.shape, np.nan)
    out[mask] = 100.0 * np.abs(est[mask] - ref[mask]) / ref[mask]
    mean = float(out[mask].mean()) if mask.any() else float("nan")
    return out, mean


@dataclass
class JointHistogram:
    """Counts with reference bins on rows (ordinate) and estimate bins on columns."""

    counts: np.ndarray
    edges: np.ndarray

    def to_json_dict(self) -> dict:
        return {"rows": "reference", "columns": "estimate", "units": "ms",
                "edges": self.edges.tolist(), "total": int(self.counts.sum())}


def joint_histogram_2d(est, ref, mask=None, bins: int = 100, value_range=(0.0, 400.0)
                       ) -> JointHistogram:
    """2D histogram of T1 values (ms) pooled over all fields.

    Values outside ``value_range`` are clipped into the edge bins, so the
    total count equals the number of masked pixels times fields.
    """
    est, ref = _stacked(est), _stacked(ref)
    if mask is None:
        mask = np.ones(ref.shape[1:], bool)
    m = np.broadcast_to(np.asarray(mask, bool), ref.shape)
    lo, hi = value_range
    edges = np.linspace(lo, hi, bins + 1)
    r = np.clip(ref[m], lo, hi)
    e = np.clip(est[m], lo, hi)
    counts, _, _ = np.histogram2d(r, e, bins=[edges, edges])
    return JointHistogram(counts.astype(np.int64), edges)


def underestimation_fraction(hist: JointHistogram, threshold: float = 200.0) -> float:
    """Share of counts with reference above ``threshold`` whose estimate bin is at or
    below the reference bin (estimate not larger than reference)."""
    centers = 0.5 * (hist.edges[1:] + hist.edges[:-1])
    rows = centers > threshold
    sub = hist.counts[rows]
    total = sub.sum()
    if total == 0:
        return float("nan")
    i = np.flatnonzero(rows)[:, None]
    j = np.arange(hist.counts.shape[1])[None, :]
    return float(sub[j <= i].sum() / total)


def roi_stats(maps: UnknownMaps, roi: RoiMask):
    """Per-field mean and population std of T1 (seconds) over the ROI."""
    vals = maps.T1[:, roi.pixels]
    # shifting by one sample keeps a constant ROI at exactly zero spread
    return vals.mean(axis=1), (vals - vals[:, :1]).std(axis=1)


def dispersion_profile(maps: UnknownMaps, rois, fields) -> list:
    """Long-format rows ``(field_T, roi, mean_ms, two_std_ms)``."""
    rows = []
    for roi in rois:
        mean, std = roi_stats(maps, roi)
        for f, m, s in zip(fields, mean, std):
            rows.append({"field_T": float(f), "roi": roi.label,
                         "mean_ms": 1e3 * float(m), "two_std_ms": 2e3 * float(s)})
    return rows


def write_profile_csv(rows, path) -> None:
    lines = ["field_T,roi,mean_ms,two_std_ms"]
    for r in rows:
        lines.append(f"{r['field_T']!r},{r['roi']},{r['mean_ms']!r},{r['two_std_ms']!r}")
    Path(path).write_bytes(("\r\n".join(lines) + "\r\n").encode())


def edge_sharpness(t1, boundary_mask) -> float:
    """Mean gradient magnitude of a T1 map over ``boundary_mask`` pixels."""
    t1 = np.asarray(t1, float)
    gy, gx = np.gradient(t1)
    return float(np.hypot(gx, gy)[np.asarray(boundary_mask, bool)].mean())


def boundary_band(mask, width: int = 1) -> np.ndarray:
    """Pixels within ``width`` of the edge of ``mask`` on either side."""
    from scipy.ndimage import binary_dilation, binary_erosion

    mask = np.asarray(mask, bool)
    return binary_dilation(mask, iterations=width) & ~binary_erosion(mask, iterations=width)


def export_grid_pgm(grid, path, window=None) -> dict:
    """Write a real grid as 16-bit PGM with linear windowing; return the window used."""
    g = np.asarray(grid, float)
    finite = np.isfinite(g)
    if window is None:
        window = (float(g[finite].min()), float(g[finite].max())) if finite.any() else (0.0, 1.0)
    lo, hi = window
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.where(finite, np.round((g - lo) * scale), 0)
    write_pgm(path, np.clip(q, 0, 65535).astype(np.uint16), maxval=65535)
    return {"window": [lo, hi], "maxval": 65535}


def write_histogram(hist: JointHistogram, stem) -> None:
    """``<stem>.csv``, ``<stem>.pgm`` and ``<stem>.json`` with bin edges."""
    stem = Path(stem)
    export_csv(hist.counts, stem.with_suffix(".csv"))
    peak = max(int(hist.counts.max()), 1)
    write_pgm(stem.with_suffix(".pgm"), hist.counts[::-1] * (65535 // peak), maxval=65535)
    meta = hist.to_json_dict()
    meta["pgm"] = "rows flipped so the reference axis points up"
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
