"""Primal-dual solver with line search for the linearised TGV subproblem.

Solves::

    min_{u,v}  1/2 |A u - d|^2 + gamma (beta0 |W grad u - v|_F + beta1 |E v|_F)
               + delta/2 |u - u_k|_M^2

with the saddle-point operator ``K = [[A, 0], [W grad, -id], [0, E]]``.
Per-channel weights ``W`` are folded into the gradient block so the dual
projections stay radial.  Inner products are real (``Re <a, b>``), which
lets T1 channels stay on the real axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..linops import SYM_WEIGHTS, div1, div2, grad, pointwise_norm, pointwise_norm_sym, symgrad
from .. import _kernels as _k

log = logging.getLogger(__name__)

TAU_UNDERFLOW = 1e-30


class SolverError(RuntimeError):
    """Numerical failure inside a solver (non-finite iterate, step underflow)."""


@dataclass(frozen=True)
class LinearOp:
    apply: callable
    adjoint: callable


def _sq(a) -> float:
    return float(np.vdot(a, a).real)


def _sq_sym(a) -> float:
    return float(np.einsum("k,lkyx->", SYM_WEIGHTS, a.real ** 2 + a.imag ** 2))


def _re_inner(a, b) -> float:
    return float(np.vdot(b, a).real)


@dataclass(eq=False)
class TGVProblem:
    """One convex subproblem; ``M`` is a real array broadcastable to ``u_k``."""

    data_op: LinearOp
    d_tilde: np.ndarray
    u_k: np.ndarray
    gamma: float
    delta: float
    beta0: float = 1.0
    beta1: float = 2.0
    M: np.ndarray | float = 1.0
    weights: np.ndarray | None = None
    real_channels: np.ndarray | None = None

    def __post_init__(self):
        n_u = self.u_k.shape[0]
        self.weights = np.ones(n_u) if self.weights is None else np.asarray(self.weights, float)
        self.real_channels = (np.zeros(n_u, bool) if self.real_channels is None
                              else np.asarray(self.real_channels, bool))
        self._w = self.weights[:, None, None, None]
        self.M = np.broadcast_to(np.asarray(self.M, float), self.u_k.shape)

    # K and K^H, split into blocks
    def K(self, u, v):
        return (self.data_op.apply(u), self._w * grad(u) - v, symgrad(v))

    def KH(self, z0, z1, r):
        ku = self.data_op.adjoint(r) - self.weights[:, None, None] * div1(z0)
        kv = -z0 - div2(z1)
        return self.project_real(ku), self.project_real(kv)

    def project_real(self, u):
        """Zero the imaginary part of real channels in place (any trailing shape)."""
        if self.real_channels.any():
            u[self.real_channels] = u[self.real_channels].real
        return u

    def primal_value(self, u, v, Kx=None) -> float:
        Au, g, e = self.K(u, v) if Kx is None else Kx
        val = 0.5 * _sq(Au - self.d_tilde)
        val += self.gamma * (self.beta0 * pointwise_norm(g).sum()
                             + self.beta1 * pointwise_norm_sym(e).sum())
        if self.delta > 0:
            du = u - self.u_k
            val += 0.5 * self.delta * float(np.sum(self.M * (du.real ** 2 + du.imag ** 2)))
        return val

    def gap(self, u, v, z0, z1, r, Kx=None, KHy=None) -> float:
        """Nonnegative gap ``P(x) - min_u L((u, v), y)``; zero at the saddle point.

        With ``delta == 0`` the u-minimisation is unbounded and the
        Fenchel-Young residual ``P(x) - L(x, y)`` is returned instead.
        """
        Kx = self.K(u, v) if Kx is None else Kx
        ku, kv = self.KH(z0, z1, r) if KHy is None else KHy
        primal = self.primal_value(u, v, Kx)
        f_conj = _re_inner(self.d_tilde, r) + 0.5 * _sq(r)
        if self.delta > 0:
            s = -ku
            s = np.where(self.real_channels[:, None, None], s.real, s)
            g_conj = _re_inner(s, self.u_k) + 0.5 / self.delta * float(
                np.sum((s.real ** 2 + s.imag ** 2) / self.M))
            dual = -f_conj - g_conj + _re_inner(v, kv)
        else:
            lag = (_re_inner(Kx[0], r) + _re_inner(Kx[1], z0)
                   + float(np.einsum("k,lkyx->", SYM_WEIGHTS, (Kx[2] * np.conj(z1)).real)))
            dual = lag - f_conj
        return primal - dual


@dataclass
class PDState:
    u: np.ndarray
    v: np.ndarray
    z0: np.ndarray
    z1: np.ndarray
    r: np.ndarray
    tau: float
    kappa: float = 1.0
    theta: float = 1.0


@dataclass
class PDResult:
    u: np.ndarray
    v: np.ndarray
    iterations: int
    reason: str
    primal: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    normalized_gap: float = float("nan")
    state: PDState | None = None


def pd_linesearch_solve(problem: TGVProblem, tau0: float, max_iter: int, tol: float = 1e-6,
                        u0=None, v0=None, mu: float = 0.5, check_every: int = 10,
                        ls_delta: float = 1.0, primal_stop: bool = True) -> PDResult:
    """Run the primal-dual iteration with backtracking line search.

    Stops after ``max_iter`` iterations or, at every ``check_every``-th
    iteration, when the relative change of the primal value or the gap
    normalised by its first checked value drops below ``tol``.  With
    ``primal_stop=False`` only the gap rule and ``max_iter`` end the run.  A step is
    accepted when ``sqrt(kappa) tau |K^H dy| <= ls_delta |dy|``; the default
    ``ls_delta = 1`` is the plain inequality without a safety factor.
    """
    p = problem
    if tau0 <= 0:
        raise ValueError("tau0 must be positive")
    u = np.array(p.u_k if u0 is None else u0, dtype=complex)
    p.project_real(u)
    n_u = u.shape[0]
    shape = u.shape[1:]
    v = (np.zeros((n_u, 2) + shape, complex) if v0 is None
         else np.array(v0, dtype=complex))
    if v0 is not None and p.real_channels.any():
        v[p.real_channels] = v[p.real_channels].real
    z0 = np.zeros_like(v)
    z1 = np.zeros((n_u, 3) + shape, complex)
    d = np.ascontiguousarray(p.d_tilde, dtype=complex)
    r = np.zeros_like(d)
    M = np.ascontiguousarray(p.M, dtype=float)
    u_k = np.ascontiguousarray(p.u_k, dtype=complex)
    w = np.ascontiguousarray(p.weights, dtype=float)
    real = np.ascontiguousarray(p.real_channels)
    ones2 = np.ones(2)
    b0 = p.beta0 * p.gamma
    b1 = p.beta1 * p.gamma
    A = p.data_op

    # K x for the current primal point
    # operator outputs are copied: an identity operator would hand back its input
    Au = np.array(A.apply(u), dtype=complex)
    g = np.empty_like(v)
    e = np.empty_like(z1)
    _k.grad_minus(u, w, v, g)
    _k.symgrad(v, e)
    ku = np.array(A.adjoint(r), dtype=complex)
    kv = np.empty_like(v)
    _k.kh_blocks(ku.copy(), z0, z1, w, real, ku, kv, ku.copy(), np.zeros_like(v))

    u_new, v_new = np.empty_like(u), np.empty_like(v)
    g_new, e_new = np.empty_like(g), np.empty_like(e)
    z0_new, z1_new, r_new = np.empty_like(z0), np.empty_like(z1), np.empty_like(r)
    ku_new, kv_new = np.empty_like(ku), np.empty_like(kv)

    tau, kappa, theta = float(tau0), 1.0, 1.0
    primal_hist, gap_hist = [], []
    gap_ref = None
    reason = "max_iter"
    it = 0
    norm_gap = float("nan")
    for it in range(1, max_iter + 1):
        _k.primal_step(u, ku, tau, p.delta, M, u_k, real, u_new)
        _k.axpy_into(v, -tau, kv, v_new)
        kappa_new = kappa * (1.0 + p.delta * tau)
        tau_new = tau * np.sqrt(kappa / kappa_new * (1.0 + theta))
        Au_new = np.array(A.apply(u_new), dtype=complex)
        _k.grad_minus(u_new, w, v_new, g_new)
        _k.symgrad(v_new, e_new)
        while True:
            theta_new = tau_new / tau
            sigma = kappa_new * tau_new
            dy = _k.dual_radial(z0, g_new, g, sigma, theta_new, b0, ones2, z0_new)
            dy += _k.dual_radial(z1, e_new, e, sigma, theta_new, b1, SYM_WEIGHTS, z1_new)
            dy += _k.dual_data(r, Au_new, Au, sigma, theta_new, d, r_new)
            aHr = np.ascontiguousarray(A.adjoint(r_new), dtype=complex)
            dk = _k.kh_blocks(aHr, z0_new, z1_new, w, real, ku_new, kv_new, ku, kv)
            if np.sqrt(kappa_new) * tau_new * np.sqrt(dk) <= ls_delta * np.sqrt(dy):
                break
            tau_new *= mu
            if tau_new < TAU_UNDERFLOW:
                raise SolverError(f"line search failed: tau underflow at iteration {it}")
        u, u_new = u_new, u
        v, v_new = v_new, v
        g, g_new = g_new, g
        e, e_new = e_new, e
        Au = Au_new
        z0, z0_new = z0_new, z0
        z1, z1_new = z1_new, z1
        r, r_new = r_new, r
        ku, ku_new = ku_new, ku
        kv, kv_new = kv_new, kv
        tau, kappa, theta = tau_new, kappa_new, theta_new

        if it % check_every == 0 or it == max_iter:
            Kx = (Au, g, e)
            prim = p.primal_value(u, v, Kx)
            gp = p.gap(u, v, z0, z1, r, Kx, (ku, kv))
            if not (np.isfinite(prim) and np.isfinite(gp)):
                raise SolverError(f"non-finite iterate at iteration {it}")
            if gap_ref is None:
                gap_ref = abs(gp) if gp != 0 else 1.0
            norm_gap = abs(gp) / gap_ref
            if (primal_stop and primal_hist
                    and abs(primal_hist[-1] - prim) <= tol * abs(prim)):
                reason = "primal"
            elif primal_hist and norm_gap <= tol:
                reason = "gap"
            primal_hist.append(prim)
            gap_hist.append(gp)
            if reason != "max_iter":
                break
    if not np.all(np.isfinite(u)):
        raise SolverError("non-finite primal iterate")
    state = PDState(u, v, z0, z1, r, tau, kappa, theta)
    return PDResult(u, v, it, reason, primal_hist, gap_hist, norm_gap, state)
