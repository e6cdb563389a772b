"""Fused kernels against the plain numpy operators they replace."""

import numpy as np
import pytest

from ffcrecon import _kernels as _k
from ffcrecon.linops import SYM_WEIGHTS, div1, div2, grad, symgrad
from ffcrecon.signal_model import jacobian
from ffcrecon.tgv.prox import prox_dual_r, prox_dual_z0, prox_dual_z1, prox_primal_u

from conftest import crandn, random_maps

SHAPES = [(1, 1), (1, 5), (4, 1), (7, 9), (16, 16)]


@pytest.mark.parametrize("shape", SHAPES)
def test_grad_minus_and_symgrad(rng, shape):
    u, v = crandn(rng, (3,) + shape), crandn(rng, (3, 2) + shape)
    w = np.array([1.0, 10.0, 0.5])
    out = np.empty_like(v)
    _k.grad_minus(u, w, v, out)
    np.testing.assert_allclose(out, w[:, None, None, None] * grad(u) - v, atol=1e-14)
    e = np.empty((3, 3) + shape, complex)
    _k.symgrad(v, e)
    np.testing.assert_allclose(e, symgrad(v), atol=1e-14)


@pytest.mark.parametrize("shape", SHAPES)
def test_kh_blocks(rng, shape):
    n_u = 3
    aHr = crandn(rng, (n_u,) + shape)
    z0, z1 = crandn(rng, (n_u, 2) + shape), crandn(rng, (n_u, 3) + shape)
    w = np.array([1.0, 10.0, 2.0])
    real = np.array([False, False, True])
    ku_old, kv_old = crandn(rng, aHr.shape), crandn(rng, z0.shape)
    ku, kv = np.empty_like(aHr), np.empty_like(z0)
    acc = _k.kh_blocks(aHr, z0, z1, w, real, ku, kv, ku_old, kv_old)
    ku_ref = aHr - w[:, None, None] * div1(z0)
    kv_ref = -z0 - div2(z1)
    ku_ref[2], kv_ref[2] = ku_ref[2].real, kv_ref[2].real
    np.testing.assert_allclose(ku, ku_ref, atol=1e-13)
    np.testing.assert_allclose(kv, kv_ref, atol=1e-13)
    ref = np.sum(np.abs(ku_ref - ku_old) ** 2) + np.sum(np.abs(kv_ref - kv_old) ** 2)
    assert acc == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("bound", [0.1, 1.0, 100.0])
def test_dual_radial(rng, bound):
    shape = (6, 5)
    sigma, theta = 0.3, 0.8
    for comps, prox, cw in ((2, prox_dual_z0, np.ones(2)), (3, prox_dual_z1, SYM_WEIGHTS)):
        z, kn, ko = (crandn(rng, (3, comps) + shape) for _ in range(3))
        out = np.empty_like(z)
        acc = _k.dual_radial(z, kn, ko, sigma, theta, bound, cw, out)
        ref = prox(z + sigma * ((1 + theta) * kn - theta * ko), bound)
        np.testing.assert_allclose(out, ref, atol=1e-13)
        diff = np.abs(ref - z) ** 2
        assert acc == pytest.approx(np.einsum("k,lkyx->", cw, diff), rel=1e-12)


def test_dual_data(rng):
    r, kn, ko, d = (crandn(rng, (4, 5, 6)) for _ in range(4))
    out = np.empty_like(r)
    acc = _k.dual_data(r, kn, ko, 0.7, 1.3, d, out)
    ref = prox_dual_r(r + 0.7 * (2.3 * kn - 1.3 * ko), 0.7, d)
    np.testing.assert_allclose(out, ref, atol=1e-13)
    assert acc == pytest.approx(np.sum(np.abs(ref - r) ** 2), rel=1e-12)


def test_primal_step_and_axpy(rng):
    u, ku, u_k = (crandn(rng, (3, 4, 5)) for _ in range(3))
    M = rng.uniform(0.1, 2.0, (3, 4, 5))
    real = np.array([False, True, False])
    out = np.empty_like(u)
    _k.primal_step(u, ku, 0.2, 0.5, M, u_k, real, out)
    ref = prox_primal_u(u - 0.2 * ku, 0.2, 0.5, M, u_k)
    ref[1] = ref[1].real
    np.testing.assert_allclose(out, ref, atol=1e-14)
    _k.axpy_into(u, -0.3, ku, out)
    np.testing.assert_allclose(out, u - 0.3 * ku, atol=1e-15)


def test_jacobian_kernels_match_numpy(rng, small_protocol):
    u = random_maps(rng, 3, (16, 16)).to_stack()
    J = jacobian(u, small_protocol)
    x, res = crandn(rng, (7, 16, 16)), crandn(rng, (15, 16, 16))
    f = small_protocol.field_index
    ref = J.d_C * x[0] + J.d_alpha * x[1 + f] + J.d_T1 * x[4 + f].real
    np.testing.assert_allclose(J.apply(x), ref, atol=1e-13)
    adj = np.zeros((7, 16, 16), complex)
    adj[0] = np.sum(np.conj(J.d_C) * res, axis=0)
    for i in range(3):
        sel = f == i
        adj[1 + i] = np.sum(np.conj(J.d_alpha[sel]) * res[sel], axis=0)
        adj[4 + i] = np.sum(np.conj(J.d_T1[sel]) * res[sel], axis=0).real
    np.testing.assert_allclose(J.adjoint(res), adj, atol=1e-12)
