"""Fused loops for the primal-dual hot path.

Each kernel does in one pass what the reference operators in
:mod:`ffcrecon.linops`, :mod:`ffcrecon.signal_model` and
:mod:`ffcrecon.tgv.prox` do with several array temporaries.  Shapes
follow those modules: stacks ``(L, ny, nx)``, gradient fields
``(L, 2, ny, nx)``, symmetrised fields ``(L, 3, ny, nx)``.  Loops are
serial so results do not depend on the thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_opts = dict(cache=True, nogil=True, fastmath=False)


@njit(**_opts)
def _abs2(z):
    return z.real * z.real + z.imag * z.imag


@njit(**_opts)
def grad_minus(u, w, v, out):
    """``out = w * grad(u) - v``."""
    L, ny, nx = u.shape
    for l in range(L):
        wl = w[l]
        for y in range(ny):
            for x in range(nx - 1):
                out[l, 0, y, x] = wl * (u[l, y, x + 1] - u[l, y, x]) - v[l, 0, y, x]
            out[l, 0, y, nx - 1] = -v[l, 0, y, nx - 1]
            if y < ny - 1:
                for x in range(nx):
                    out[l, 1, y, x] = wl * (u[l, y + 1, x] - u[l, y, x]) - v[l, 1, y, x]
            else:
                for x in range(nx):
                    out[l, 1, y, x] = -v[l, 1, y, x]


@njit(**_opts)
def symgrad(v, out):
    L, _, ny, nx = v.shape
    for l in range(L):
        for y in range(ny):
            out[l, 0, y, 0] = 0j
            for x in range(1, nx):
                out[l, 0, y, x] = v[l, 0, y, x] - v[l, 0, y, x - 1]
            if y > 0:
                for x in range(nx):
                    out[l, 1, y, x] = v[l, 1, y, x] - v[l, 1, y - 1, x]
                    out[l, 2, y, x] = 0.5 * (v[l, 0, y, x] - v[l, 0, y - 1, x])
            else:
                for x in range(nx):
                    out[l, 1, y, x] = 0j
                    out[l, 2, y, x] = 0j
            for x in range(1, nx):
                out[l, 2, y, x] += 0.5 * (v[l, 1, y, x] - v[l, 1, y, x - 1])


@njit(**_opts)
def _gradT_row(p, l, y, ny, nx, row):
    """Add ``grad^H p`` for row ``y`` of channel ``l`` to ``row``."""
    for x in range(nx - 1):
        row[x] -= p[l, 0, y, x]
        row[x + 1] += p[l, 0, y, x]
    if y < ny - 1:
        for x in range(nx):
            row[x] -= p[l, 1, y, x]
    if y > 0:
        for x in range(nx):
            row[x] += p[l, 1, y - 1, x]


@njit(**_opts)
def _bwdT_row(q, l, c, y, ny, nx, axis, row):
    """Add the adjoint of the backward difference of ``q[l, c]`` along ``axis``."""
    if axis == 0:
        for x in range(1, nx):
            row[x] += q[l, c, y, x]
            row[x - 1] -= q[l, c, y, x]
    else:
        if y > 0:
            for x in range(nx):
                row[x] += q[l, c, y, x]
        if y < ny - 1:
            for x in range(nx):
                row[x] -= q[l, c, y + 1, x]


@njit(**_opts)
def kh_blocks(aHr, z0, z1, w, real, ku, kv, ku_old, kv_old):
    """``ku = aHr + w grad^H z0``, ``kv = -z0 + symgrad^H z1``.

    ``real`` marks channels whose ``ku`` and ``kv`` are projected to the
    real axis.  Returns ``|ku - ku_old|^2 + |kv - kv_old|^2``.
    """
    L, _, ny, nx = z0.shape
    acc = 0.0
    row = np.empty(nx, np.complex128)
    for l in range(L):
        wl = w[l]
        rl = real[l]
        for y in range(ny):
            row[:] = 0j
            _gradT_row(z0, l, y, ny, nx, row)
            for x in range(nx):
                val = aHr[l, y, x] + wl * row[x]
                if rl:
                    val = val.real + 0j
                acc += _abs2(val - ku_old[l, y, x])
                ku[l, y, x] = val
            for c in range(2):
                for x in range(nx):
                    row[x] = -z0[l, c, y, x]
                if c == 0:
                    _bwdT_row(z1, l, 0, y, ny, nx, 0, row)
                    _bwdT_row(z1, l, 2, y, ny, nx, 1, row)
                else:
                    _bwdT_row(z1, l, 1, y, ny, nx, 1, row)
                    _bwdT_row(z1, l, 2, y, ny, nx, 0, row)
                for x in range(nx):
                    val = row[x]
                    if rl:
                        val = val.real + 0j
                    acc += _abs2(val - kv_old[l, c, y, x])
                    kv[l, c, y, x] = val
    return acc


@njit(**_opts)
def dual_radial(z, kn, ko, sigma, theta, bound, cw, out):
    """Extrapolated dual ascent step followed by the pointwise radial projection.

    ``out = P(z + sigma ((1 + theta) kn - theta ko))`` where the pixel
    magnitude sums ``cw[c] |.|^2`` over channels and components.  Returns
    ``sum cw |out - z|^2``.
    """
    L, K, ny, nx = z.shape
    a = sigma * (1.0 + theta)
    b = sigma * theta
    mag = np.empty(nx)
    acc = 0.0
    for y in range(ny):
        mag[:] = 0.0
        for l in range(L):
            for c in range(K):
                wc = cw[c]
                for x in range(nx):
                    val = z[l, c, y, x] + a * kn[l, c, y, x] - b * ko[l, c, y, x]
                    out[l, c, y, x] = val
                    mag[x] += wc * _abs2(val)
        for x in range(nx):
            m = np.sqrt(mag[x]) / bound
            mag[x] = 1.0 / m if m > 1.0 else 1.0
        for l in range(L):
            for c in range(K):
                wc = cw[c]
                for x in range(nx):
                    val = out[l, c, y, x] * mag[x]
                    out[l, c, y, x] = val
                    acc += wc * _abs2(val - z[l, c, y, x])
    return acc


@njit(**_opts)
def dual_data(r, kn, ko, sigma, theta, d, out):
    """``out = (r + sigma ((1+theta) kn - theta ko) - sigma d) / (1 + sigma)``; returns ``|out - r|^2``."""
    a = sigma * (1.0 + theta)
    b = sigma * theta
    inv = 1.0 / (1.0 + sigma)
    rf, knf, kof, df, of = r.ravel(), kn.ravel(), ko.ravel(), d.ravel(), out.ravel()
    acc = 0.0
    for i in range(rf.size):
        val = (rf[i] + a * knf[i] - b * kof[i] - sigma * df[i]) * inv
        of[i] = val
        acc += _abs2(val - rf[i])
    return acc


@njit(**_opts)
def primal_step(u, ku, tau, delta, M, u_k, real, out):
    """``out = (u - tau ku + tau delta M u_k) / (1 + tau delta M)``, real channels projected."""
    L, ny, nx = u.shape
    td = tau * delta
    for l in range(L):
        rl = real[l]
        for y in range(ny):
            for x in range(nx):
                wm = td * M[l, y, x]
                val = (u[l, y, x] - tau * ku[l, y, x] + wm * u_k[l, y, x]) / (1.0 + wm)
                if rl:
                    val = val.real + 0j
                out[l, y, x] = val


@njit(**_opts)
def axpy_into(x, a, y, out):
    """``out = x + a * y`` elementwise."""
    xf, yf, of = x.ravel(), y.ravel(), out.ravel()
    for i in range(xf.size):
        of[i] = xf[i] + a * yf[i]


@njit(**_opts)
def jac_apply(dC, dA, dT, fidx, n_e, x, out):
    """Image-space Jacobian applied to a channel stack (T1 part uses Re)."""
    N, ny, nx = dC.shape
    for n in range(N):
        ia = 1 + fidx[n]
        it = 1 + n_e + fidx[n]
        for y in range(ny):
            for xx in range(nx):
                out[n, y, xx] = (dC[n, y, xx] * x[0, y, xx] + dA[n, y, xx] * x[ia, y, xx]
                                 + dT[n, y, xx] * x[it, y, xx].real)


@njit(**_opts)
def jac_adjoint(dC, dA, dT, fidx, n_e, res, out):
    """Adjoint of :func:`jac_apply`; T1 channels keep only the real part."""
    N, ny, nx = dC.shape
    out[:] = 0j
    for n in range(N):
        ia = 1 + fidx[n]
        it = 1 + n_e + fidx[n]
        for y in range(ny):
            for xx in range(nx):
                rv = res[n, y, xx]
                out[0, y, xx] += dC[n, y, xx].conjugate() * rv
                out[ia, y, xx] += dA[n, y, xx].conjugate() * rv
                out[it, y, xx] += (dT[n, y, xx].conjugate() * rv).real
