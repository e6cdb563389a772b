"""Field-cycling inversion-recovery signal, its Jacobian and adjoint.

All signals are divided by the detection field, so with ``C = 1``,
``alpha = 1`` and ``t = 0`` the magnitude is one.  Per measurement ``n``
(field ``i``, time ``t``)::

    s = C * (-alpha_i * E + r_i * (1 - E)),   E = exp(-t / T1_i),  r_i = B_E_i / B_0

Everything here works in image space; Fourier sampling is in
:mod:`ffcrecon.linops`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .datamodel import AcquisitionProtocol, ImageSeries, UnknownMaps

T1_FLOOR = 1e-4


@dataclass(frozen=True)
class ModelPoint:
    """One measurement of the protocol."""

    field_index: int
    evolution_time: float
    detection_field: float
    evolution_field: float


def model_points(protocol: AcquisitionProtocol) -> list:
    return [
        ModelPoint(int(i), float(t), protocol.detection_field, protocol.evolution_fields[i])
        for i, t in zip(protocol.field_index, protocol.times)
    ]


def signal(C, alpha, T1, t, ratio):
    """Scalar/broadcast evaluation of the normalised signal."""
    E = np.exp(-t / T1)
    return C * (-alpha * E + ratio * (1.0 - E))


def _bcast(protocol):
    t = protocol.times[:, None, None]
    r = protocol.field_ratio[:, None, None]
    return protocol.field_index, t, r


def forward_stack(stack: np.ndarray, protocol: AcquisitionProtocol) -> np.ndarray:
    """Signal series ``(N_d, N_y, N_x)`` from a channel stack ``(N_u, N_y, N_x)``."""
    n_e = protocol.n_fields
    fi, t, r = _bcast(protocol)
    C = stack[0]
    alpha = stack[1:1 + n_e][fi]
    T1 = stack[1 + n_e:].real[fi]
    return signal(C, alpha, T1, t, r)


def forward_image(maps: UnknownMaps, protocol: AcquisitionProtocol) -> ImageSeries:
    return ImageSeries(protocol, forward_stack(maps.to_stack(), protocol))


@dataclass(frozen=True, eq=False)
class Jacobian:
    """Nonzero partial derivatives at a linearisation point.

    Each array has shape ``(N_d, N_y, N_x)``; measurement ``n`` depends on
    channel 0 (C), ``1 + f[n]`` (alpha) and ``1 + N_E + f[n]`` (T1), where
    ``f`` is the field index.
    """

    d_C: np.ndarray
    d_alpha: np.ndarray
    d_T1: np.ndarray
    field_index: np.ndarray
    n_fields: int

    def scaled(self, scale) -> "Jacobian":
        """Jacobian with respect to ``u / scale`` (per-channel scale)."""
        scale = np.asarray(scale)
        n_e, f = self.n_fields, self.field_index
        sa = scale[1:1 + n_e][f][:, None, None]
        st = scale[1 + n_e:][f][:, None, None]
        return Jacobian(self.d_C * scale[0], self.d_alpha * sa, self.d_T1 * st, f, n_e)

    def __post_init__(self):
        for name in ("d_C", "d_alpha", "d_T1"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), complex))
        object.__setattr__(self, "field_index", np.ascontiguousarray(self.field_index, np.int64))

    def apply(self, delta: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(delta, dtype=complex)
        out = np.empty(self.d_C.shape, complex)
        _k.jac_apply(self.d_C, self.d_alpha, self.d_T1, self.field_index, self.n_fields, x, out)
        return out

    def adjoint(self, res: np.ndarray) -> np.ndarray:
        res = np.ascontiguousarray(res, dtype=complex)
        out = np.empty((1 + 2 * self.n_fields,) + res.shape[1:], complex)
        _k.jac_adjoint(self.d_C, self.d_alpha, self.d_T1, self.field_index, self.n_fields,
                       res, out)
        return out

    def diag_normal(self) -> np.ndarray:
        """``diag(J^H J)`` per channel and pixel (real)."""
        n_e, f = self.n_fields, self.field_index
        out = np.empty((1 + 2 * n_e,) + self.d_C.shape[1:])
        out[0] = np.sum(np.abs(self.d_C) ** 2, axis=0)
        a2, t2 = np.abs(self.d_alpha) ** 2, np.abs(self.d_T1) ** 2
        for i in range(n_e):
            sel = f == i
            out[1 + i] = a2[sel].sum(axis=0)
            out[1 + n_e + i] = t2[sel].sum(axis=0)
        return out


def jacobian(stack: np.ndarray, protocol: AcquisitionProtocol) -> Jacobian:
    """Analytic partials of the normalised signal at ``stack``."""
    n_e = protocol.n_fields
    fi, t, r = _bcast(protocol)
    C = stack[0]
    alpha = stack[1:1 + n_e][fi]
    T1 = np.maximum(stack[1 + n_e:].real[fi], T1_FLOOR)
    E = np.exp(-t / T1)
    d_C = -alpha * E + r * (1.0 - E)
    d_alpha = -C * E
    # dE/dT1 = E t / T1^2 ; ds/dT1 = -C (alpha + r) dE/dT1
    d_T1 = -C * (alpha + r) * E * t / T1 ** 2
    return Jacobian(d_C, d_alpha, d_T1, fi, n_e)


def jacobian_apply(lin_point: UnknownMaps, delta: UnknownMaps, protocol) -> ImageSeries:
    J = jacobian(lin_point.to_stack(), protocol)
    return ImageSeries(protocol, J.apply(_stack_of(delta)))


def jacobian_adjoint_apply(lin_point: UnknownMaps, residual: ImageSeries, protocol) -> np.ndarray:
    """``DS^H`` applied to an image-space residual.

    Returns the raw channel stack rather than :class:`UnknownMaps` because
    adjoint outputs are not constrained to positive T1.
    """
    J = jacobian(lin_point.to_stack(), protocol)
    return J.adjoint(np.asarray(getattr(residual, "data", residual)))


def _stack_of(x) -> np.ndarray:
    return x.to_stack() if isinstance(x, UnknownMaps) else np.asarray(x)
