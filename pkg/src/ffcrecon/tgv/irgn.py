"""Iteratively regularised Gauss-Newton outer loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass

import numpy as np

from ..datamodel import KSpaceSeries, UnknownMaps, T1_CEILING
from ..linops import (div1, div2, fourier_adjoint, fourier_sample, grad, power_iteration,
                      symgrad)
from ..signal_model import T1_FLOOR, forward_stack, jacobian, signal
from .pdhg import LinearOp, SolverError, TGVProblem, pd_linesearch_solve

log = logging.getLogger("ffcrecon.progress")


@dataclass(frozen=True)
class SolverConfig:
    """IRGN schedule and inner-solver settings.

    ``per_channel_weights`` defaults to ``alpha_weight`` on the alpha
    channels and 1 elsewhere.  ``data_rms`` is the RMS the k-space data are
    scaled to before solving (undone on C afterwards).  ``reg_scale``
    multiplies every ``gamma_k`` handed to the inner solver; scaling the data
    by ``s`` is equivalent to ``reg_scale = 1 / s**2`` up to the step-size
    balance of the primal-dual iteration.  ``primal_stop`` lets a small
    relative primal change end an inner solve; it is off by default so that
    every inner solve ends on the normalised gap or at its iteration budget.
    """

    gamma0: float = 1e-3
    gamma_decay: float = 0.5
    gamma_min: float = 4e-6
    delta0: float = 1.0
    delta_decay: float = 0.1
    delta_min: float = 1e-3
    beta0: float = 1.0
    beta1: float = 2.0
    n_gn: int = 12
    iter_cap: int = 2000
    iter_base: int = 10
    tol: float = 1e-6
    primal_stop: bool = False
    alpha_weight: float = 10.0
    per_channel_weights: tuple | None = None
    mk_mode: str = "levenberg_marquardt"
    m_floor: float = 1e-3
    tau0: float | None = None
    mu: float = 0.5
    data_rms: float = 1.0
    reg_scale: float = 1e5
    t1_init: float = 0.15
    t1_floor: float = T1_FLOOR
    t1_ceiling: float = T1_CEILING
    check_every: int = 10
    image_domain: bool = True

    def __post_init__(self):
        for name in ("gamma_decay", "delta_decay"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.gamma_min > self.gamma0 or self.delta_min > self.delta0:
            raise ValueError("minimum weights must not exceed the starting weights")
        if self.data_rms <= 0 or self.reg_scale <= 0:
            raise ValueError("data_rms and reg_scale must be positive")
        if self.tol <= 0 or self.beta0 <= 0 or self.beta1 <= 0:
            raise ValueError("tol, beta0 and beta1 must be positive")
        if self.mk_mode not in ("identity", "levenberg_marquardt"):
            raise ValueError(f"unknown mk_mode {self.mk_mode!r}")
        if self.n_gn < 1 or self.iter_base < 1 or self.iter_cap < 1:
            raise ValueError("n_gn, iter_base and iter_cap must be positive")

    def weights(self, n_e: int) -> np.ndarray:
        if self.per_channel_weights is not None:
            w = np.asarray(self.per_channel_weights, float)
            if w.shape != (1 + 2 * n_e,):
                raise ValueError(f"per_channel_weights needs {1 + 2 * n_e} entries")
            return w
        w = np.ones(1 + 2 * n_e)
        w[1:1 + n_e] = self.alpha_weight
        return w

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("per_channel_weights") is not None:
            d["per_channel_weights"] = tuple(d["per_channel_weights"])
        return cls(**d)


def irgn_schedule(k: int, cfg: SolverConfig = SolverConfig()) -> tuple:
    """``(gamma_k, delta_k, iter_k)`` for Gauss-Newton step ``k``."""
    if not 0 <= k < cfg.n_gn:
        raise ValueError(f"GN index {k} outside [0, {cfg.n_gn})")
    gamma = max(cfg.gamma0 * cfg.gamma_decay ** k, cfg.gamma_min)
    delta = max(cfg.delta0 * cfg.delta_decay ** k, cfg.delta_min)
    iters = min(cfg.iter_base * 2 ** k, cfg.iter_cap)
    return gamma, delta, iters


def initial_guess(image0: np.ndarray, protocol, cfg: SolverConfig) -> np.ndarray:
    """Channel stack with C matched to the shortest time of the highest field."""
    n_e = protocol.n_fields
    i_hi = int(np.argmax(protocol.evolution_fields))
    sel = np.flatnonzero(protocol.field_index == i_hi)
    n0 = sel[np.argmin(protocol.times[sel])]
    ref = signal(1.0, 1.0, cfg.t1_init, protocol.times[n0], protocol.field_ratio[n0])
    u = np.empty((1 + 2 * n_e,) + image0.shape[1:], complex)
    u[0] = image0[n0] / ref
    u[1:1 + n_e] = 1.0
    u[1 + n_e:] = cfg.t1_init
    return u


@dataclass
class GnIterate:
    """Linearisation of the model at ``u_k`` in scaled coordinates."""

    u_k: np.ndarray
    d_tilde: np.ndarray
    M: np.ndarray
    data_op: LinearOp
    scale: np.ndarray


def _data_ops(protocol, image_domain):
    mask = protocol.mask
    if image_domain and mask is None:
        return (lambda x: x), (lambda y: y)
    return (lambda x: fourier_sample(x, mask)), (lambda y: fourier_adjoint(y, mask))


def linearize(u_k, data, protocol, cfg: SolverConfig, image_domain=True) -> GnIterate:
    """Build the scaled linear subproblem data at ``u_k`` (physical units)."""
    scale = np.max(np.abs(u_k), axis=(1, 2))
    scale[scale == 0] = 1.0
    J = jacobian(u_k, protocol).scaled(scale)
    fwd, adj = _data_ops(protocol, image_domain)
    op = LinearOp(lambda x: fwd(J.apply(x)), lambda y: J.adjoint(adj(y)))
    u_hat = u_k / scale[:, None, None]
    d_tilde = data - fwd(forward_stack(u_k, protocol)) + op.apply(u_hat)
    if cfg.mk_mode == "levenberg_marquardt":
        M = J.diag_normal()
        if protocol.mask is not None:
            M = M * (protocol.mask.sum() / protocol.mask.size)
        floor = cfg.m_floor * M.reshape(M.shape[0], -1).max(axis=1)
        M = np.maximum(M, np.maximum(floor, 1e-12)[:, None, None])
    else:
        M = np.ones(u_k.shape)
    return GnIterate(u_hat, d_tilde, M, op, scale)


def _tgv_inner(gn: GnIterate, cfg, gamma, delta, iters, weights, real, tau0, v0):
    prob = TGVProblem(gn.data_op, gn.d_tilde, gn.u_k, gamma, delta, cfg.beta0, cfg.beta1,
                      gn.M, weights, real)
    res = pd_linesearch_solve(prob, tau0, iters, cfg.tol, v0=v0, mu=cfg.mu,
                              check_every=cfg.check_every, primal_stop=cfg.primal_stop)
    info = {"iterations": res.iterations, "stop": res.reason,
            "gap": res.gap[-1] if res.gap else None,
            "normalized_gap": res.normalized_gap}
    return res.u, res.v, info


def run_irgn(data: KSpaceSeries, cfg: SolverConfig = SolverConfig(), inner=None, init=None,
             callback=None):
    """Gauss-Newton loop shared by the TGV and H1 reconstructions.

    ``inner(gn, cfg, gamma, delta, iters, weights, real, tau0, v0)`` solves
    one linearised subproblem and returns ``(u_hat, v, info)``.  Returns the
    final maps and the list of per-step progress records.
    """
    inner = _tgv_inner if inner is None else inner
    protocol = data.protocol
    n_e = protocol.n_fields
    image_domain = cfg.image_domain and protocol.mask is None
    kdata = data.data
    if protocol.mask is not None:
        kdata = kdata * protocol.mask
        rms = np.sqrt(np.sum(np.abs(kdata) ** 2) / protocol.mask.sum() / protocol.n_meas)
    else:
        rms = np.sqrt(np.mean(np.abs(kdata) ** 2))
    dscale = cfg.data_rms / rms if rms > 0 else 1.0
    kdata = kdata * dscale
    image0 = fourier_adjoint(kdata, protocol.mask)
    work = image0 if image_domain else kdata

    if init is None:
        u = initial_guess(image0, protocol, cfg)
    else:
        u = (init.to_stack() if isinstance(init, UnknownMaps) else np.array(init, complex)).copy()
        u[0] *= dscale
    weights = cfg.weights(n_e)
    real = np.zeros(1 + 2 * n_e, bool)
    real[1 + n_e:] = True

    records = []
    tau0 = cfg.tau0
    v, scale_prev = None, None
    for k in range(cfg.n_gn):
        t_start = time.perf_counter()
        gamma, delta, iters = irgn_schedule(k, cfg)
        gn = linearize(u, work, protocol, cfg, image_domain)
        if tau0 is None:
            tau0 = _estimate_tau0(gn, weights)
        if v is not None:
            v = v * (scale_prev / gn.scale)[:, None, None, None]
        try:
            u_hat, v, info = inner(gn, cfg, gamma * cfg.reg_scale, delta, iters, weights, real, tau0, v)
        except SolverError as exc:
            raise SolverError(f"GN step {k}: {exc}") from exc
        scale_prev = gn.scale
        u = u_hat * gn.scale[:, None, None]
        u[1 + n_e:] = np.clip(u[1 + n_e:].real, cfg.t1_floor, cfg.t1_ceiling)
        if not np.all(np.isfinite(u)):
            raise SolverError(f"GN step {k}: non-finite parameter maps")
        fwd, _ = _data_ops(protocol, image_domain)
        resid = fwd(forward_stack(u, protocol)) - work
        rec = {"k": k, "gamma": gamma, "delta": delta, "iter_k": iters,
               "data_fidelity": 0.5 * float(np.vdot(resid, resid).real) / dscale ** 2,
               "seconds": round(time.perf_counter() - t_start, 3), **info}
        records.append(rec)
        log.info(json.dumps(rec))
        if callback is not None:
            callback(k, u / np.r_[dscale, np.ones(2 * n_e)][:, None, None], rec)
    u[0] /= dscale
    maps = UnknownMaps.from_stack(u, cfg.t1_ceiling)
    return maps, records


def _estimate_tau0(gn: GnIterate, weights) -> float:
    """``1 / ||K||`` from 20 power iterations on ``K^H K``."""
    w = weights[:, None, None, None]
    shape = gn.u_k.shape
    n_u = shape[0]

    def op(x):
        u, v = x[:n_u], x[n_u:].reshape((n_u, 2) + shape[1:])
        return gn.data_op.apply(u), w * grad(u) - v, symgrad(v)

    def adj(y):
        r, z0, z1 = y
        ku = gn.data_op.adjoint(r) - weights[:, None, None] * div1(z0)
        kv = -z0 - div2(z1)
        return np.concatenate([ku, kv.reshape((2 * n_u,) + shape[1:])])

    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3 * n_u,) + shape[1:]) + 0j
    lam = power_iteration(op, adj, x0, 20)
    return 1.0 / np.sqrt(lam)


def irgn_reconstruct(data: KSpaceSeries, cfg: SolverConfig = SolverConfig(),
                     init=None) -> UnknownMaps:
    """Joint TGV reconstruction of C, alpha and T1 maps from k-space."""
    maps, _ = run_irgn(data, cfg, init=init)
    return maps
