"""Comparison methods: pixel-wise Tikhonov fits and an H1-regularised IRGN fit."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .datamodel import ImageSeries, KSpaceSeries, UnknownMaps, T1_CEILING
from .linops import FilterConfig, div1, fourier_adjoint, grad, kspace_filter, power_iteration
from .signal_model import T1_FLOOR, signal
from .tgv.irgn import GnIterate, SolverConfig, run_irgn

log = logging.getLogger("ffcrecon.progress")


@dataclass(frozen=True)
class PixelFitConfig:
    """Settings for the pixel-wise Levenberg-Marquardt fits.

    ``init="grid"`` starts each pixel from a T1 grid search with the linear
    coefficients solved exactly; ``"constant"`` uses C from the longest
    time, alpha = 1 and T1 = ``t1_init`` everywhere.
    """

    tikhonov_weight: float = 2e-11
    max_nlls_iters: int = 200
    presmooth: bool = True
    filter: FilterConfig = field(default_factory=FilterConfig)
    step_tol: float = 1e-10
    cost_tol: float = 1e-10
    damping0: float = 1e-3
    t1_init: float = 0.15
    init: str = "grid"
    grid_size: int = 100

    def __post_init__(self):
        if self.init not in ("grid", "constant"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.tikhonov_weight < 0:
            raise ValueError("tikhonov_weight must be nonnegative")
        if self.max_nlls_iters < 1:
            raise ValueError("max_nlls_iters must be positive")

    def t1_grid(self) -> np.ndarray:
        return np.geomspace(1e-3, 3.0, self.grid_size)


@dataclass
class PixelFitResult:
    maps: UnknownMaps
    failed: np.ndarray
    iterations: np.ndarray

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())


# ---------------------------------------------------------------- batched LM

def _unpack(theta, n_e):
    C = theta[:, 0] + 1j * theta[:, 1]
    alpha = theta[:, 2:2 + 2 * n_e:2] + 1j * theta[:, 3:3 + 2 * n_e:2]
    T1 = theta[:, 2 + 2 * n_e:]
    return C, alpha, T1


def _model_and_jac(theta, t, ratio, fidx, n_e):
    """Stacked real/imag residual model ``(P, 2N)`` and Jacobian ``(P, 2N, n_p)``."""
    C, alpha, T1 = _unpack(theta, n_e)
    a = alpha[:, fidx]
    T = np.maximum(T1[:, fidx], T1_FLOOR)
    E = np.exp(-t / T)
    g = -a * E + ratio * (1 - E)
    s = C[:, None] * g
    P, N = s.shape
    n_p = theta.shape[1]
    Jc = np.zeros((P, N, n_p), complex)
    Jc[:, :, 0] = g
    Jc[:, :, 1] = 1j * g
    dA = -C[:, None] * E
    dT = -C[:, None] * (a + ratio) * E * t / T ** 2
    rows = np.arange(N)
    Jc[:, rows, 2 + 2 * fidx] = dA
    Jc[:, rows, 3 + 2 * fidx] = 1j * dA
    Jc[:, rows, 2 + 2 * n_e + fidx] = dT
    return (np.concatenate([s.real, s.imag], axis=1),
            np.concatenate([Jc.real, Jc.imag], axis=1))


def lm_fit(data, t, ratio, fidx, theta0, lam, max_iter=200, step_tol=1e-10, damping0=1e-3,
           cost_tol=1e-10):
    """Levenberg-Marquardt on every row of ``data`` (complex ``(P, N)``) at once.

    Minimises ``1/2 |s(theta) - d|^2 + lam |theta|^2`` with Marquardt
    scaling.  A pixel has converged when a step changes ``theta`` by less
    than ``step_tol`` relative, or an accepted step lowers the cost by
    less than ``cost_tol`` relative.  Returns ``(theta, converged,
    iterations)``.
    """
    n_e = int(fidx.max()) + 1
    y = np.concatenate([data.real, data.imag], axis=1)
    theta = theta0.astype(float).copy()
    P, n_p = theta.shape
    t1_sl = slice(2 + 2 * n_e, None)
    mu = np.full(P, damping0)
    active = np.ones(P, bool)
    converged = np.zeros(P, bool)
    iters = np.zeros(P, int)

    def cost(th, m):
        return 0.5 * np.sum((m - y_a) ** 2, axis=1) + lam * np.sum(th ** 2, axis=1)

    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        th = theta[idx]
        y_a = y[idx]
        m, J = _model_and_jac(th, t, ratio, fidx, n_e)
        f0 = cost(th, m)
        g = np.einsum("pni,pn->pi", J, m - y_a) + 2 * lam * th
        H = np.einsum("pni,pnj->pij", J, J) + 2 * lam * np.eye(n_p)
        d = np.einsum("pii->pi", H)
        d = np.maximum(d, 1e-12 * np.maximum(d.max(axis=1, keepdims=True), 1e-300))
        A = H + (mu[idx, None] * d)[:, :, None] * np.eye(n_p)
        try:
            step = -np.linalg.solve(A, g[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(A.reshape(-1, n_p), g.reshape(-1), rcond=None)[0].reshape(-1, n_p)
        trial = th + step
        trial[:, t1_sl] = np.clip(trial[:, t1_sl], T1_FLOOR, T1_CEILING)
        m_t, _ = _model_and_jac(trial, t, ratio, fidx, n_e)
        f1 = cost(trial, m_t)
        ok = np.isfinite(f1) & (f1 <= f0)
        theta[idx[ok]] = trial[ok]
        mu[idx] = np.where(ok, mu[idx] * 0.1, mu[idx] * 10.0)
        iters[idx] += 1
        small = (np.linalg.norm(trial - th, axis=1)
                 <= step_tol * (np.linalg.norm(th, axis=1) + step_tol))
        flat = ok & (f0 - f1 <= cost_tol * f0)
        stuck = mu[idx] > 1e12
        done = small | flat | stuck | (np.linalg.norm(g, axis=1) == 0)
        converged[idx[done]] = True
        active[idx[done]] = False
    bad = ~np.all(np.isfinite(theta), axis=1)
    converged &= ~bad
    return theta, converged, iters


def _initial_theta(data, t, ratio, fidx, n_e, t1_init):
    """C from the longest-time sample, alpha = 1, T1 = ``t1_init``."""
    j = int(np.argmax(t))
    ref = signal(1.0, 1.0, t1_init, t[j], ratio[j])
    C = data[:, j] / ref
    P = data.shape[0]
    theta = np.zeros((P, 2 + 3 * n_e))
    theta[:, 0], theta[:, 1] = C.real, C.imag
    theta[:, 2:2 + 2 * n_e:2] = 1.0
    theta[:, 2 + 2 * n_e:] = t1_init
    return theta


def _grid_theta(data, t, ratio, fidx, n_e, t1_grid, c0=None):
    """Start values from a T1 grid search with the linear coefficients eliminated.

    For fixed T1 the signal ``-C alpha E + C r (1 - E)`` is linear in
    ``(C alpha, C)``, so each grid value costs one small least-squares
    solve shared by all pixels.  C comes from the field with the largest
    ratio (or ``c0``); alpha is the fitted ``C alpha`` divided by it.
    """
    P = data.shape[0]
    prod = np.zeros((n_e, P), complex)
    scale = np.zeros((n_e, P), complex)
    T1 = np.zeros((n_e, P))
    for i in range(n_e):
        sel = fidx == i
        d = data[:, sel]
        best = np.full(P, np.inf)
        for T in t1_grid:
            E = np.exp(-t[sel] / T)
            A = np.stack([-E, ratio[sel] * (1 - E)], axis=1)
            coef = d @ np.linalg.pinv(A).T
            res = np.linalg.norm(d - coef @ A.T, axis=1)
            better = res < best
            best[better] = res[better]
            prod[i, better], scale[i, better] = coef[better, 0], coef[better, 1]
            T1[i, better] = T
    top = max(range(n_e), key=lambda i: ratio[fidx == i].max())
    C = scale[top] if c0 is None else c0
    safe = np.abs(C) > 0
    alpha = np.where(safe, prod / np.where(safe, C, 1), 1.0)
    theta = np.zeros((P, 2 + 3 * n_e))
    theta[:, 0], theta[:, 1] = C.real, C.imag
    theta[:, 2:2 + 2 * n_e:2] = alpha.real.T
    theta[:, 3:3 + 2 * n_e:2] = alpha.imag.T
    theta[:, 2 + 2 * n_e:] = T1.T
    return theta


def _fit_block(data, t, ratio, fidx, cfg: PixelFitConfig, c0=None):
    n_e = int(fidx.max()) + 1
    theta0 = _initial_theta(data, t, ratio, fidx, n_e, cfg.t1_init)
    if cfg.init == "grid":
        live = np.any(data != 0, axis=1)
        theta0[live] = _grid_theta(data[live], t, ratio, fidx, n_e, cfg.t1_grid(),
                                   None if c0 is None else c0[live])
    elif c0 is not None:
        theta0[:, 0], theta0[:, 1] = c0.real, c0.imag
    theta, conv, iters = lm_fit(data, t, ratio, fidx, theta0, cfg.tikhonov_weight,
                                cfg.max_nlls_iters, cfg.step_tol, cfg.damping0, cfg.cost_tol)
    theta[~conv] = theta0[~conv]
    return theta, conv, iters


def fit_pixelwise_multifield_detailed(images: ImageSeries, cfg: PixelFitConfig) -> PixelFitResult:
    """Joint fit of all unknowns per pixel; see :func:`fit_pixelwise_multifield`."""
    p = images.protocol
    n_e = p.n_fields
    shape = p.shape
    data = images.data.reshape(p.n_meas, -1).T
    theta, conv, iters = _fit_block(data, p.times, p.field_ratio, p.field_index, cfg)
    C, alpha, T1 = _unpack(theta, n_e)
    maps = UnknownMaps(C.reshape(shape), alpha.T.reshape((n_e,) + shape),
                       T1.T.reshape((n_e,) + shape))
    res = PixelFitResult(maps, ~conv.reshape(shape), iters.reshape(shape))
    _report("multifield", res)
    return res


def fit_pixelwise_single_field_detailed(images: ImageSeries, cfg: PixelFitConfig) -> PixelFitResult:
    """Field-by-field fit; see :func:`fit_pixelwise_single_field`."""
    p = images.protocol
    n_e = p.n_fields
    shape = p.shape
    data_all = images.data
    if cfg.presmooth:
        from .linops import fft2c, ifft2c
        data_all = ifft2c(kspace_filter(fft2c(data_all), cfg.filter))
    data_all = data_all.reshape(p.n_meas, -1).T
    P = data_all.shape[0]
    C_f = np.zeros((n_e, P), complex)
    alpha = np.zeros((n_e, P), complex)
    T1 = np.zeros((n_e, P))
    failed = np.zeros(P, bool)
    iters = np.zeros(P, int)
    # at low fields only C*alpha is well determined, so those fits start
    # from the C found at the highest field
    order = np.argsort(p.evolution_fields)[::-1]
    for i in order:
        sel = p.field_index == i
        fidx = np.zeros(sel.sum(), int)
        c0 = None if i == order[0] else C_f[order[0]]
        theta, conv, it = _fit_block(data_all[:, sel], p.times[sel], p.field_ratio[sel], fidx,
                                     cfg, c0)
        c, a, t1 = _unpack(theta, 1)
        C_f[i], alpha[i], T1[i] = c, a[:, 0], t1[:, 0]
        failed |= ~conv
        iters = np.maximum(iters, it)
    C = C_f[order[0]]
    maps = UnknownMaps(C.reshape(shape), alpha.reshape((n_e,) + shape),
                       T1.reshape((n_e,) + shape))
    res = PixelFitResult(maps, failed.reshape(shape), iters.reshape(shape))
    _report("standard", res)
    return res


def _report(method, res: PixelFitResult):
    log.info(json.dumps({"method": method, "failed_pixels": res.n_failed,
                         "max_iterations": int(res.iterations.max())}))


def fit_pixelwise_single_field(images: ImageSeries, cfg: PixelFitConfig = PixelFitConfig()
                               ) -> UnknownMaps:
    """Standard pixel-wise fit, one evolution field at a time.

    Images are optionally smoothed with the arctan k-space window first.
    Each field yields its own C; the one from the highest field is
    returned.  Pixels that do not converge keep their initial values and
    are counted in the progress log.
    """
    return fit_pixelwise_single_field_detailed(images, cfg).maps


def fit_pixelwise_multifield(images: ImageSeries,
                             cfg: PixelFitConfig = PixelFitConfig(presmooth=False)) -> UnknownMaps:
    """Pixel-wise fit of all fields jointly with a shared C, without smoothing."""
    return fit_pixelwise_multifield_detailed(images, cfg).maps


# ---------------------------------------------------------------- H1

def h1_objective(u, gn: GnIterate, gamma, delta, weights) -> float:
    r = gn.data_op.apply(u) - gn.d_tilde
    g = grad(u)
    du = u - gn.u_k
    return (0.5 * float(np.vdot(r, r).real)
            + gamma * float(np.sum(weights[:, None, None, None] ** 2 * np.abs(g) ** 2))
            + 0.5 * delta * float(np.sum(gn.M * np.abs(du) ** 2)))


def agd_h1(gn: GnIterate, gamma, delta, iters, weights, real, tol=1e-6, u0=None):
    """Nesterov accelerated gradient descent with function-value restart.

    Minimises ``1/2 |A u - d|^2 + gamma sum_l w_l^2 |grad u_l|^2 +
    delta/2 |u - u_k|_M^2`` with step ``1/L``.  Stops after ``iters``
    iterations or when the gradient norm falls below ``tol`` times its
    initial value.  Returns ``(u, info)``.
    """
    w2 = (weights ** 2)[:, None, None]
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(gn.u_k.shape) + 0j
    LA = power_iteration(gn.data_op.apply, gn.data_op.adjoint, x0, 20)
    L = 1.05 * LA + 2 * gamma * float(w2.max()) * 8.0 + delta * float(gn.M.max())

    def gradient(u):
        g = gn.data_op.adjoint(gn.data_op.apply(u) - gn.d_tilde)
        g = g - 2 * gamma * w2 * div1(grad(u)) + delta * gn.M * (u - gn.u_k)
        g[real] = g[real].real
        return g

    x = np.array(gn.u_k if u0 is None else u0, complex)
    x[real] = x[real].real
    y = x.copy()
    t = 1.0
    f_x = h1_objective(x, gn, gamma, delta, weights)
    g0 = None
    restarts = 0
    it = 0
    for it in range(1, iters + 1):
        gy = gradient(y)
        gnorm = float(np.linalg.norm(gy))
        if g0 is None:
            g0 = gnorm if gnorm > 0 else 1.0
        if gnorm <= tol * g0:
            x = y
            break
        x_new = y - gy / L
        f_new = h1_objective(x_new, gn, gamma, delta, weights)
        if f_new > f_x:
            # restart momentum from the last accepted point
            restarts += 1
            t = 1.0
            y = x.copy()
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = x_new + ((t - 1) / t_new) * (x_new - x)
        x, f_x, t = x_new, f_new, t_new
    return x, {"iterations": it, "restarts": restarts, "objective": f_x}


def _h1_inner(gn, cfg, gamma, delta, iters, weights, real, tau0, v0):
    u, info = agd_h1(gn, gamma, delta, iters, weights, real, cfg.tol)
    return u, None, info


def fit_h1(data: KSpaceSeries, cfg: SolverConfig = SolverConfig(), init=None) -> UnknownMaps:
    """IRGN with a squared-gradient penalty and accelerated gradient inner solver.

    Uses the same schedule, channel weights and data scaling as the TGV
    reconstruction.
    """
    maps, _ = run_irgn(data, cfg, inner=_h1_inner, init=init)
    return maps


def images_from_kspace(data: KSpaceSeries) -> ImageSeries:
    return fourier_adjoint(data)
