"""Core data types and on-disk containers.

A dataset directory holds ``protocol.json`` (acquisition header),
``kspace.cplx`` (raw little-endian float32, interleaved re/im) and an
optional ``mask.pgm``.  Parameter maps are stored as ``<stem>.json`` plus
``<stem>.cplx`` with channel order ``C, alpha_1..alpha_NE, T1_1..T1_NE``.

Times are kept in seconds everywhere in memory; the JSON header uses
milliseconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

T1_CEILING = 10.0
PAYLOAD_DTYPE = np.dtype("<c8")


class DataFormatError(ValueError):
    """Raised when a container or value violates its declared contract."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class AcquisitionProtocol:
    """Evolution fields, per-field evolution times and matrix geometry.

    Parameters
    ----------
    detection_field : float
        Detection (= polarisation) field in tesla.
    evolution_fields : sequence of float
        Evolution fields in tesla, one per field block.
    evolution_times : sequence of sequence of float
        Evolution times in seconds, one list per field.  Lists must be
        strictly monotone; they are stored sorted descending.
    matrix : (int, int)
        ``(N_x, N_y)``.
    mask : ndarray, optional
        Binary ``(N_ky, N_kx)`` grid of acquired k-space samples.
    """

    detection_field: float
    evolution_fields: tuple
    evolution_times: tuple
    matrix: tuple
    mask: np.ndarray | None = None

    def __post_init__(self):
        b0 = float(self.detection_field)
        fields = tuple(float(b) for b in self.evolution_fields)
        times = tuple(tuple(float(t) for t in ts) for ts in self.evolution_times)
        nx, ny = (int(n) for n in self.matrix)
        if not (math.isfinite(b0) and b0 > 0):
            raise DataFormatError(f"detection_field must be positive, got {b0}")
        if not fields:
            raise DataFormatError("evolution_fields is empty")
        if any(not (math.isfinite(b) and b > 0) for b in fields):
            raise DataFormatError(f"evolution_fields must be positive, got {fields}")
        if len(times) != len(fields):
            raise DataFormatError(
                f"evolution_times has {len(times)} lists for {len(fields)} fields"
            )
        for i, ts in enumerate(times):
            if not ts:
                raise DataFormatError(f"evolution_times[{i}] is empty")
            if any(not (math.isfinite(t) and t > 0) for t in ts):
                raise DataFormatError(f"evolution_times[{i}] must be positive")
            d = np.diff(ts)
            if len(ts) > 1 and not (np.all(d < 0) or np.all(d > 0)):
                raise DataFormatError(
                    f"evolution_times[{i}] must be strictly monotone, got {ts}"
                )
        if nx < 1 or ny < 1:
            raise DataFormatError(f"matrix must be positive, got {(nx, ny)}")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask) != 0
            if mask.shape != (ny, nx):
                raise DataFormatError(
                    f"mask shape {mask.shape} does not match matrix (N_ky, N_kx)={(ny, nx)}"
                )
            if not mask.any():
                raise DataFormatError("mask has no acquired samples")
            mask = _readonly(mask)
        object.__setattr__(self, "detection_field", b0)
        object.__setattr__(self, "evolution_fields", fields)
        object.__setattr__(
            self, "evolution_times", tuple(tuple(sorted(ts, reverse=True)) for ts in times)
        )
        object.__setattr__(self, "matrix", (nx, ny))
        object.__setattr__(self, "mask", mask)

    @property
    def n_fields(self) -> int:
        return len(self.evolution_fields)

    @property
    def n_meas(self) -> int:
        return sum(len(ts) for ts in self.evolution_times)

    @property
    def n_unknowns(self) -> int:
        return 1 + 2 * self.n_fields

    @property
    def shape(self) -> tuple:
        """Image grid shape ``(N_y, N_x)``."""
        return (self.matrix[1], self.matrix[0])

    @property
    def field_index(self) -> np.ndarray:
        """Field index of every measurement, field-major order."""
        return np.concatenate(
            [np.full(len(ts), i) for i, ts in enumerate(self.evolution_times)]
        )

    @property
    def times(self) -> np.ndarray:
        """Evolution time of every measurement in seconds."""
        return np.concatenate([np.asarray(ts) for ts in self.evolution_times])

    @property
    def field_ratio(self) -> np.ndarray:
        """``B_E / B_0`` of every measurement."""
        return np.asarray(self.evolution_fields)[self.field_index] / self.detection_field

    def with_mask(self, mask) -> "AcquisitionProtocol":
        return AcquisitionProtocol(
            self.detection_field, self.evolution_fields, self.evolution_times,
            self.matrix, mask,
        )

    def with_matrix(self, matrix) -> "AcquisitionProtocol":
        return AcquisitionProtocol(
            self.detection_field, self.evolution_fields, self.evolution_times, matrix
        )

    def to_json_dict(self) -> dict:
        d = {
            "detection_field_T": self.detection_field,
            "evolution_fields_T": list(self.evolution_fields),
            "evolution_times_ms": [[t * 1e3 for t in ts] for ts in self.evolution_times],
            "matrix": list(self.matrix),
        }
        if self.mask is not None:
            d["mask_file"] = "mask.pgm"
        return d


def _sort_order(times_ms) -> np.ndarray:
    """Permutation taking declared (field-major) measurement order to stored order."""
    order, offset = [], 0
    for ts in times_ms:
        ts = np.asarray(ts, dtype=float)
        order.append(offset + np.argsort(-ts, kind="stable"))
        offset += len(ts)
    return np.concatenate(order) if order else np.zeros(0, int)


@dataclass(frozen=True, eq=False)
class _Series:
    protocol: AcquisitionProtocol
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[0] != self.protocol.n_meas:
            raise DataFormatError(
                f"data shape {data.shape} does not match N_d={self.protocol.n_meas}"
            )
        if data.shape[1:] != self.protocol.shape:
            raise DataFormatError(
                f"data grid {data.shape[1:]} does not match matrix {self.protocol.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise DataFormatError("data contains non-finite values")
        object.__setattr__(self, "data", _readonly(data.astype(np.complex128)))


class KSpaceSeries(_Series):
    """Complex k-space series, shape ``(N_d, N_ky, N_kx)``, field-major."""


class ImageSeries(_Series):
    """Complex image series, shape ``(N_d, N_y, N_x)``, field-major."""


@dataclass(frozen=True, eq=False)
class UnknownMaps:
    """Parameter maps ``C`` (complex), ``alpha`` and ``T1`` (one per field).

    ``T1`` is real, in seconds, and must lie in ``(0, t1_ceiling]``.
    """

    C: np.ndarray
    alpha: np.ndarray
    T1: np.ndarray
    t1_ceiling: float = T1_CEILING

    def __post_init__(self):
        C = np.asarray(self.C)
        alpha = np.asarray(self.alpha)
        T1 = np.asarray(self.T1)
        if C.ndim != 2:
            raise DataFormatError(f"C must be a 2D grid, got shape {C.shape}")
        if alpha.ndim != 3 or alpha.shape[1:] != C.shape:
            raise DataFormatError(f"alpha shape {alpha.shape} inconsistent with C {C.shape}")
        if T1.shape != alpha.shape:
            raise DataFormatError(f"T1 shape {T1.shape} inconsistent with alpha {alpha.shape}")
        if np.iscomplexobj(T1):
            if np.any(T1.imag != 0):
                raise DataFormatError("T1 must be real")
            T1 = T1.real
        for name, a in (("C", C), ("alpha", alpha), ("T1", T1)):
            if not np.all(np.isfinite(a)):
                raise DataFormatError(f"{name} contains non-finite values")
        if np.any(T1 <= 0):
            raise DataFormatError("T1 must be strictly positive")
        if np.any(T1 > self.t1_ceiling):
            raise DataFormatError(f"T1 exceeds ceiling {self.t1_ceiling} s")
        object.__setattr__(self, "C", _readonly(C.astype(np.complex128)))
        object.__setattr__(self, "alpha", _readonly(alpha.astype(np.complex128)))
        object.__setattr__(self, "T1", _readonly(T1.astype(np.float64)))

    @property
    def n_fields(self) -> int:
        return self.alpha.shape[0]

    @property
    def shape(self) -> tuple:
        return self.C.shape

    def channel_names(self) -> list:
        n = self.n_fields
        return ["C"] + [f"alpha_{i + 1}" for i in range(n)] + [f"T1_{i + 1}" for i in range(n)]

    def to_stack(self) -> np.ndarray:
        """Channel stack ``(N_u, N_y, N_x)`` complex."""
        return np.concatenate([self.C[None], self.alpha, self.T1.astype(complex)])

    @classmethod
    def from_stack(cls, stack, t1_ceiling: float = T1_CEILING) -> "UnknownMaps":
        stack = np.asarray(stack)
        n_e = (stack.shape[0] - 1) // 2
        if stack.shape[0] != 1 + 2 * n_e:
            raise DataFormatError(f"channel count {stack.shape[0]} is not 1 + 2*N_E")
        return cls(stack[0], stack[1:1 + n_e], stack[1 + n_e:].real, t1_ceiling)

    @classmethod
    def zeros_like_shape(cls, n_e, shape, t1=0.15):
        return cls(np.zeros(shape, complex), np.zeros((n_e,) + shape, complex),
                   np.full((n_e,) + shape, t1))


@dataclass(frozen=True, eq=False)
class RoiMask:
    label: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels) != 0
        if px.ndim != 2:
            raise DataFormatError("ROI pixels must be a 2D grid")
        if not px.any():
            raise DataFormatError(f"ROI {self.label!r} is empty")
        object.__setattr__(self, "pixels", _readonly(px))


# ---------------------------------------------------------------- PGM masks

def write_pgm(path, grid, maxval: int = 255) -> None:
    """Binary (P5) PGM; 8-bit for ``maxval < 256``, otherwise 16-bit big-endian."""
    grid = np.asarray(grid)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    ny, nx = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n{maxval}\n".encode("ascii"))
        fh.write(np.clip(grid, 0, maxval).astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise DataFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    nx, ny, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    n = nx * ny * dtype.itemsize
    body = raw[pos:pos + n]
    if len(body) != n:
        raise DataFormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=dtype).reshape(ny, nx).astype(np.int64)


# ---------------------------------------------------------------- datasets

def _read_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise DataFormatError(f"{path}: missing {what}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc


def _read_payload(path: Path, count: int) -> np.ndarray:
    if not path.is_file():
        raise DataFormatError(f"{path}: missing payload")
    nbytes = path.stat().st_size
    if nbytes != count * PAYLOAD_DTYPE.itemsize:
        raise DataFormatError(
            f"{path}: size mismatch, header implies {count * 2} float32 values, "
            f"payload has {nbytes / 4:g}"
        )
    return np.fromfile(path, dtype=PAYLOAD_DTYPE).astype(np.complex128)


def protocol_from_json(d: dict, directory=None) -> tuple:
    """Build a protocol from header keys; returns ``(protocol, declared_order)``."""
    try:
        b0 = d["detection_field_T"]
        fields = d["evolution_fields_T"]
        times_ms = d["evolution_times_ms"]
        matrix = d["matrix"]
    except KeyError as exc:
        raise DataFormatError(f"protocol.json: missing key {exc.args[0]!r}") from None
    if not isinstance(matrix, list) or len(matrix) != 2:
        raise DataFormatError(f"protocol.json: 'matrix' must be [N_x, N_y], got {matrix!r}")
    if not isinstance(times_ms, list) or not all(isinstance(t, list) for t in times_ms):
        raise DataFormatError("protocol.json: 'evolution_times_ms' must be a list of lists")
    mask = None
    if d.get("mask_file"):
        if directory is None:
            raise DataFormatError("protocol.json: mask_file given without a directory")
        mpath = Path(directory) / d["mask_file"]
        if not mpath.is_file():
            raise DataFormatError(f"{mpath}: missing mask file")
        mask = read_pgm(mpath) != 0
    try:
        protocol = AcquisitionProtocol(
            b0, fields, [[t * 1e-3 for t in ts] for ts in times_ms], matrix, mask
        )
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"protocol.json: {exc}") from exc
    return protocol, _sort_order(times_ms)


def load_dataset(path) -> KSpaceSeries:
    """Read ``protocol.json`` + ``kspace.cplx`` from a dataset directory."""
    path = Path(path)
    if not path.is_dir():
        raise DataFormatError(f"{path}: dataset directory does not exist")
    header = _read_json(path / "protocol.json", "protocol header")
    protocol, order = protocol_from_json(header, path)
    ny, nx = protocol.shape
    flat = _read_payload(path / "kspace.cplx", protocol.n_meas * ny * nx)
    data = flat.reshape(protocol.n_meas, ny, nx)[order]
    try:
        return KSpaceSeries(protocol, data)
    except DataFormatError as exc:
        raise DataFormatError(f"{path / 'kspace.cplx'}: {exc}") from exc


def save_dataset(series: KSpaceSeries, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    protocol = series.protocol
    (path / "protocol.json").write_text(json.dumps(protocol.to_json_dict(), indent=2))
    if protocol.mask is not None:
        write_pgm(path / "mask.pgm", protocol.mask.astype(np.uint8) * 255)
    series.data.astype(PAYLOAD_DTYPE).tofile(path / "kspace.cplx")


# ---------------------------------------------------------------- maps

def save_maps(maps: UnknownMaps, path, stem: str = "maps") -> None:
    """Write ``<stem>.json`` and ``<stem>.cplx`` into directory ``path``.

    The payload is float32, so the round trip is bit-exact for maps whose
    values are float32-representable (which includes anything loaded
    from disk).
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        header = {
            "n_e": maps.n_fields,
            "matrix": [maps.shape[1], maps.shape[0]],
            "channel_names": maps.channel_names(),
        }
        (path / f"{stem}.json").write_text(json.dumps(header, indent=2))
        maps.to_stack().astype(PAYLOAD_DTYPE).tofile(path / f"{stem}.cplx")
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot write maps ({exc})") from exc


def load_maps(path, stem: str | None = None, t1_ceiling: float = T1_CEILING) -> UnknownMaps:
    """Read maps written by :func:`save_maps`.

    With ``stem=None`` the directory is searched for ``maps.json`` and then
    ``truth_maps.json``.
    """
    path = Path(path)
    if stem is None:
        for cand in ("maps", "truth_maps"):
            if (path / f"{cand}.json").is_file():
                stem = cand
                break
        else:
            raise DataFormatError(f"{path}: no maps.json or truth_maps.json")
    header = _read_json(path / f"{stem}.json", "maps header")
    try:
        n_e = int(header["n_e"])
        nx, ny = (int(n) for n in header["matrix"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path / f'{stem}.json'}: bad header ({exc})") from None
    names = header.get("channel_names")
    if names is not None and len(names) != 1 + 2 * n_e:
        raise DataFormatError(
            f"{path / f'{stem}.json'}: {len(names)} channel names for n_e={n_e}"
        )
    n_u = 1 + 2 * n_e
    flat = _read_payload(path / f"{stem}.cplx", n_u * ny * nx)
    stack = flat.reshape(n_u, ny, nx)
    if np.any(stack[1 + n_e:].imag != 0):
        raise DataFormatError(f"{path / f'{stem}.cplx'}: T1 channel has an imaginary part")
    try:
        return UnknownMaps.from_stack(stack, t1_ceiling)
    except DataFormatError as exc:
        raise DataFormatError(f"{path / f'{stem}.cplx'}: {exc}") from exc


def export_csv(grid, path) -> None:
    """Write a real grid as RFC-4180 CSV with 17 significant digits."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[None]
    if not np.all(np.isfinite(grid)):
        raise DataFormatError("cannot export a grid with non-finite values")
    lines = [",".join(_fmt(x) for x in row) for row in grid]
    try:
        with open(path, "w", newline="") as fh:
            fh.write("\r\n".join(lines) + "\r\n")
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot write CSV ({exc})") from exc


def _fmt(x: float) -> str:
    s = f"{x:.17g}"
    return "0" if s == "-0" else s
