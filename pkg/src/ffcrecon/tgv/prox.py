"""Proximal maps of the linearised TGV subproblem (all pointwise)."""

from __future__ import annotations

import numpy as np

from ..linops import SYM_WEIGHTS


def _radial(xi, mag, bound):
    if bound <= 0:
        raise ValueError(f"projection bound must be positive, got {bound}")
    return xi / np.maximum(1.0, mag / bound)


def prox_dual_z0(z0: np.ndarray, bound: float) -> np.ndarray:
    """Project a gradient field onto the pointwise Frobenius ball of radius ``bound``.

    The magnitude couples all channels and both components of a pixel.
    """
    mag = np.sqrt(np.sum(z0.real ** 2 + z0.imag ** 2, axis=(0, 1)))
    return _radial(z0, mag, bound)


def prox_dual_z1(z1: np.ndarray, bound: float) -> np.ndarray:
    """As :func:`prox_dual_z0` for symmetrised fields (off-diagonal weighted by 2)."""
    sq = z1.real ** 2 + z1.imag ** 2
    mag = np.sqrt(np.einsum("k,lkyx->yx", SYM_WEIGHTS, sq))
    return _radial(z1, mag, bound)


def prox_dual_r(xi: np.ndarray, sigma: float, d_tilde: np.ndarray) -> np.ndarray:
    """Resolvent of the conjugate data term ``<d, r> + |r|^2 / 2``."""
    return (xi - sigma * d_tilde) / (1.0 + sigma)


def prox_primal_u(xi, tau, delta, M, u_k):
    """Resolvent of ``delta/2 |u - u_k|_M^2`` with diagonal ``M``."""
    w = tau * delta * M
    return (xi + w * u_k) / (1.0 + w)
