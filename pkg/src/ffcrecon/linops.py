"""Finite-difference operators, Fourier sampling and k-space filtering.

Channel stacks have shape ``(N_u, N_y, N_x)``.  A gradient field has shape
``(N_u, 2, N_y, N_x)`` with component 0 the x (column) derivative and
component 1 the y (row) derivative.  A symmetrised-gradient field has shape
``(N_u, 3, N_y, N_x)``; its inner product weights the off-diagonal
component by 2, which is the metric used by :func:`frob_norm_12_sym`,
:func:`div2` and the z1 projection.

Boundaries replicate the edge pixel, so forward differences vanish at the
last index and backward differences vanish at the first index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

SYM_WEIGHTS = np.array([1.0, 1.0, 2.0])

_workers = 1


def set_fft_workers(n: int) -> None:
    global _workers
    _workers = max(1, int(n))


# ---------------------------------------------------------------- differences

def _dx_fwd(u):
    out = np.zeros_like(u)
    out[..., :-1] = u[..., 1:] - u[..., :-1]
    return out


def _dy_fwd(u):
    out = np.zeros_like(u)
    out[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    return out


def _dx_fwd_adj(p):
    # adjoint of _dx_fwd; p[..., -1] is never produced by the forward op
    out = np.zeros_like(p)
    out[..., :-1] -= p[..., :-1]
    out[..., 1:] += p[..., :-1]
    return out


def _dy_fwd_adj(p):
    out = np.zeros_like(p)
    out[..., :-1, :] -= p[..., :-1, :]
    out[..., 1:, :] += p[..., :-1, :]
    return out


def _dx_bwd(w):
    out = np.zeros_like(w)
    out[..., 1:] = w[..., 1:] - w[..., :-1]
    return out


def _dy_bwd(w):
    out = np.zeros_like(w)
    out[..., 1:, :] = w[..., 1:, :] - w[..., :-1, :]
    return out


def _dx_bwd_adj(q):
    out = np.zeros_like(q)
    out[..., 1:] += q[..., 1:]
    out[..., :-1] -= q[..., 1:]
    return out


def _dy_bwd_adj(q):
    out = np.zeros_like(q)
    out[..., 1:, :] += q[..., 1:, :]
    out[..., :-1, :] -= q[..., 1:, :]
    return out


def grad(u: np.ndarray) -> np.ndarray:
    """Forward-difference gradient of every channel."""
    return np.stack([_dx_fwd(u), _dy_fwd(u)], axis=-3)


def div1(v: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad`."""
    return -(_dx_fwd_adj(v[..., 0, :, :]) + _dy_fwd_adj(v[..., 1, :, :]))


def symgrad(v: np.ndarray) -> np.ndarray:
    """Symmetrised backward-difference gradient of a gradient field."""
    v1, v2 = v[..., 0, :, :], v[..., 1, :, :]
    return np.stack(
        [_dx_bwd(v1), _dy_bwd(v2), 0.5 * (_dy_bwd(v1) + _dx_bwd(v2))], axis=-3
    )


def div2(chi: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`symgrad` in the (1, 1, 2)-weighted metric."""
    c1, c2, c3 = chi[..., 0, :, :], chi[..., 1, :, :], chi[..., 2, :, :]
    return -np.stack(
        [_dx_bwd_adj(c1) + _dy_bwd_adj(c3), _dy_bwd_adj(c2) + _dx_bwd_adj(c3)], axis=-3
    )


def _channel_weights(weights, n_u):
    if weights is None:
        return np.ones(n_u)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n_u,) or np.any(w <= 0):
        raise ValueError(f"weights must be {n_u} positive values, got {weights}")
    return w


def pointwise_norm(v: np.ndarray, weights=None) -> np.ndarray:
    """Per-pixel Frobenius magnitude of a gradient field."""
    w = _channel_weights(weights, v.shape[0])
    return np.sqrt(np.einsum("l,lkyx->yx", w ** 2, np.abs(v) ** 2))


def pointwise_norm_sym(chi: np.ndarray, weights=None) -> np.ndarray:
    """Per-pixel Frobenius magnitude of a symmetrised field (off-diagonal x2)."""
    w = _channel_weights(weights, chi.shape[0])
    return np.sqrt(np.einsum("l,k,lkyx->yx", w ** 2, SYM_WEIGHTS, np.abs(chi) ** 2))


def frob_norm_12(v: np.ndarray, weights=None) -> float:
    return float(pointwise_norm(v, weights).sum())


def frob_norm_12_sym(chi: np.ndarray, weights=None) -> float:
    return float(pointwise_norm_sym(chi, weights).sum())


def sym_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Real inner product on symmetrised fields, off-diagonal weighted by 2."""
    return float(np.einsum("k,lkyx->", SYM_WEIGHTS, (a * np.conj(b)).real))


def inner(a, b) -> float:
    """Real inner product ``Re <a, b>``."""
    return float(np.vdot(b, a).real)


# ---------------------------------------------------------------- Fourier

def fft2c(x: np.ndarray) -> np.ndarray:
    """Centred unitary 2D DFT over the last two axes."""
    x = scipy.fft.ifftshift(x, axes=(-2, -1))
    x = scipy.fft.fft2(x, norm="ortho", workers=_workers)
    return scipy.fft.fftshift(x, axes=(-2, -1))


def ifft2c(k: np.ndarray) -> np.ndarray:
    k = scipy.fft.ifftshift(k, axes=(-2, -1))
    k = scipy.fft.ifft2(k, norm="ortho", workers=_workers)
    return scipy.fft.fftshift(k, axes=(-2, -1))


def fourier_sample(img, mask=None):
    """Unitary centred DFT of every image, zeroing unacquired samples.

    Accepts an :class:`~ffcrecon.datamodel.ImageSeries` (returns a
    :class:`~ffcrecon.datamodel.KSpaceSeries`, using the protocol mask when
    ``mask`` is None) or a bare array (returns an array).
    """
    from .datamodel import ImageSeries, KSpaceSeries

    if isinstance(img, ImageSeries):
        m = img.protocol.mask if mask is None else mask
        return KSpaceSeries(img.protocol, fourier_sample(img.data, m))
    k = fft2c(np.asarray(img))
    if mask is not None:
        k = k * np.asarray(mask, dtype=bool)
    return k


def fourier_adjoint(ks, mask=None):
    """Adjoint of :func:`fourier_sample`."""
    from .datamodel import ImageSeries, KSpaceSeries

    if isinstance(ks, KSpaceSeries):
        m = ks.protocol.mask if mask is None else mask
        return ImageSeries(ks.protocol, fourier_adjoint(ks.data, m))
    k = np.asarray(ks)
    if mask is not None:
        k = k * np.asarray(mask, dtype=bool)
    return ifft2c(k)


# ---------------------------------------------------------------- filter

@dataclass(frozen=True)
class FilterConfig:
    """Arctan k-space window: cutoff radius in pixels and slope."""

    cutoff_radius: float = 30.0
    beta_filter: float = 100.0

    def __post_init__(self):
        if not (self.cutoff_radius > 0 and self.beta_filter > 0):
            raise ValueError("cutoff_radius and beta_filter must be positive")


def kspace_radius(shape) -> np.ndarray:
    """Distance in pixels from the centred DC bin."""
    ny, nx = shape
    ky = np.arange(ny) - ny // 2
    kx = np.arange(nx) - nx // 2
    return np.hypot(ky[:, None], kx[None, :])


def filter_gain(k, cfg: FilterConfig = FilterConfig()):
    kc = cfg.cutoff_radius
    return 0.5 + np.arctan(cfg.beta_filter * (kc - np.asarray(k)) / kc) / np.pi


def kspace_filter(ks, cfg: FilterConfig = FilterConfig()):
    """Multiply k-space by the arctan window."""
    from .datamodel import KSpaceSeries

    if isinstance(ks, KSpaceSeries):
        return KSpaceSeries(ks.protocol, kspace_filter(ks.data, cfg))
    ks = np.asarray(ks)
    return ks * filter_gain(kspace_radius(ks.shape[-2:]), cfg)


# ---------------------------------------------------------------- utilities

def power_iteration(op, adj, x0: np.ndarray, n_iter: int = 20) -> float:
    """Estimate ``||A||^2`` from ``n_iter`` iterations on ``A^H A``."""
    x = x0 / np.linalg.norm(x0)
    lam = 0.0
    for _ in range(n_iter):
        y = adj(op(x))
        lam = np.linalg.norm(y)
        if lam == 0:
            return 0.0
        x = y / lam
    return float(lam)
