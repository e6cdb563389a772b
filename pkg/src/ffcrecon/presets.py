"""Built-in acquisition protocols (evolution fields and times of the study)."""

from __future__ import annotations

from .datamodel import AcquisitionProtocol

DETECTION_FIELD_T = 0.2

_PRESETS = {
    "sim3field": (
        (0.2, 0.0211, 0.0022),
        ((455, 242, 129, 68, 36), (282, 150, 80, 42, 23), (136, 73, 39, 21, 11)),
    ),
    "patient1-3field": (
        (0.2, 0.0211, 0.0022),
        ((455, 242, 129, 68, 36), (282, 150, 80, 42, 23), (136, 73, 39, 21, 11)),
    ),
    "patient2-4field": (
        (0.2, 0.037, 0.0069, 0.0013),
        ((455, 196, 84, 36), (338, 145, 63, 27), (196, 84, 36, 16), (114, 49, 21, 9)),
    ),
}

PRESET_NAMES = tuple(_PRESETS)


def preset_protocol(name: str, matrix=(128, 128), mask=None) -> AcquisitionProtocol:
    """Return a named protocol at the requested ``(N_x, N_y)`` matrix."""
    try:
        fields, times_ms = _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown protocol preset {name!r}; choose from {PRESET_NAMES}") from None
    times = [[t * 1e-3 for t in ts] for ts in times_ms]
    return AcquisitionProtocol(DETECTION_FIELD_T, fields, times, matrix, mask)
