"""Complex tensor container, centered FFTs, metrics, and bundle I/O.

Every array that crosses a module boundary travels as a :class:`CTensor`:
a complex128 ndarray plus named axes. The centered FFT convention puts DC
at index ``floor(N/2)`` on every transformed axis (shift applied on both
sides). Center crops/pads put the extra sample on the low-index side when
parities mismatch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from .errors import (
    ByteOrderError,
    GeometryError,
    PayloadLengthError,
    UnknownDtypeError,
)

AXIS_LABELS = ("coil", "echo", "kx", "ky", "kz", "t", "maps")

_BUNDLE_DTYPE = "complex128"


@dataclass(frozen=True)
class CTensor:
    """N-dimensional complex tensor with named axes.

    Parameters
    ----------
    data : ndarray
        Complex values; coerced to complex128, row-major.
    axes : tuple of str
        One label per dimension, unique, drawn from ``AXIS_LABELS``.
    """

    data: np.ndarray
    axes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.complex128))
        object.__setattr__(self, "data", arr)
        axes = tuple(self.axes)
        object.__setattr__(self, "axes", axes)
        if len(axes) != arr.ndim:
            raise GeometryError(
                f"axes {axes} do not match data with {arr.ndim} dimensions"
            )
        if len(set(axes)) != len(axes):
            raise GeometryError(f"duplicate axis labels in {axes}")
        for label in axes:
            if label not in AXIS_LABELS:
                raise GeometryError(f"unknown axis label '{label}'")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def axis(self, label: str) -> int:
        """Index of the named axis; raises GeometryError if absent."""
        try:
            return self.axes.index(label)
        except ValueError:
            raise GeometryError(
                f"axis '{label}' not present in tensor with axes {self.axes}"
            ) from None

    def extent(self, label: str) -> int:
        return self.data.shape[self.axis(label)]

    def has_axis(self, label: str) -> bool:
        return label in self.axes

    def transpose(self, order: tuple[str, ...]) -> "CTensor":
        idx = tuple(self.axis(a) for a in order)
        return CTensor(np.transpose(self.data, idx), order)

    def with_data(self, data: np.ndarray) -> "CTensor":
        return CTensor(data, self.axes)


def _resolve_axes(x: CTensor, axes) -> tuple[int, ...]:
    if isinstance(axes, str):
        axes = (axes,)
    return tuple(x.axis(a) for a in axes)


def fftc(x: CTensor, axes) -> CTensor:
    """Centered orthonormal forward DFT along the named axes."""
    idx = _resolve_axes(x, axes)
    y = scipy.fft.fftshift(
        scipy.fft.fftn(scipy.fft.ifftshift(x.data, axes=idx), axes=idx, norm="ortho"),
        axes=idx,
    )
    return x.with_data(y)


def ifftc(x: CTensor, axes) -> CTensor:
    """Centered orthonormal inverse DFT along the named axes."""
    idx = _resolve_axes(x, axes)
    y = scipy.fft.fftshift(
        scipy.fft.ifftn(scipy.fft.ifftshift(x.data, axes=idx), axes=idx, norm="ortho"),
        axes=idx,
    )
    return x.with_data(y)


def fftc_nd(data: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Centered orthonormal DFT on a raw ndarray (internal helper)."""
    return scipy.fft.fftshift(
        scipy.fft.fftn(scipy.fft.ifftshift(data, axes=axes), axes=axes, norm="ortho"),
        axes=axes,
    )


def ifftc_nd(data: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    return scipy.fft.fftshift(
        scipy.fft.ifftn(scipy.fft.ifftshift(data, axes=axes), axes=axes, norm="ortho"),
        axes=axes,
    )


def center_slices(full: int, target: int) -> slice:
    """Slice selecting the centered ``target`` samples out of ``full``.

    For mismatched parity the extra retained sample sits on the low-index
    side; the DC index ``full//2`` always maps to ``target//2``.
    """
    start = full // 2 - target // 2
    return slice(start, start + target)


def crop_center(x: CTensor, extents: dict[str, int]) -> CTensor:
    """Crop the named axes to the given extents around the center."""
    sl = [slice(None)] * x.data.ndim
    for label, n in extents.items():
        cur = x.extent(label)
        if n > cur:
            raise GeometryError(
                f"cannot crop axis '{label}' from {cur} to larger extent {n}"
            )
        if n < 1:
            raise GeometryError(f"crop extent for '{label}' must be positive, got {n}")
        sl[x.axis(label)] = center_slices(cur, n)
    return x.with_data(x.data[tuple(sl)].copy())


def pad_center(x: CTensor, extents: dict[str, int]) -> CTensor:
    """Zero-pad the named axes to the given extents, center-embedded."""
    shape = list(x.data.shape)
    sl = [slice(None)] * x.data.ndim
    for label, n in extents.items():
        cur = x.extent(label)
        if n < cur:
            raise GeometryError(
                f"cannot pad axis '{label}' from {cur} to smaller extent {n}"
            )
        shape[x.axis(label)] = n
        sl[x.axis(label)] = center_slices(n, cur)
    out = np.zeros(shape, dtype=np.complex128)
    out[tuple(sl)] = x.data
    return x.with_data(out)


def nrmse(x: CTensor | np.ndarray, ref: CTensor | np.ndarray) -> float:
    """Normalized RMS error of magnitudes, ||x - ref|| / ||ref||."""
    xd = x.data if isinstance(x, CTensor) else np.asarray(x)
    rd = ref.data if isinstance(ref, CTensor) else np.asarray(ref)
    if xd.shape != rd.shape:
        raise GeometryError(f"shape mismatch {xd.shape} vs {rd.shape}")
    xm, rm = np.abs(xd), np.abs(rd)
    denom = np.linalg.norm(rm)
    if denom == 0:
        raise GeometryError("reference has zero norm")
    return float(np.linalg.norm(xm - rm) / denom)


def psnr(x: CTensor | np.ndarray, ref: CTensor | np.ndarray) -> float:
    """Peak SNR in dB, peak taken as max |ref|."""
    xd = x.data if isinstance(x, CTensor) else np.asarray(x)
    rd = ref.data if isinstance(ref, CTensor) else np.asarray(ref)
    if xd.shape != rd.shape:
        raise GeometryError(f"shape mismatch {xd.shape} vs {rd.shape}")
    xm, rm = np.abs(xd), np.abs(rd)
    peak = rm.max()
    if peak == 0:
        raise GeometryError("reference has zero norm")
    mse = np.mean((xm - rm) ** 2)
    if mse == 0:
        return float("inf")
    return float(20.0 * np.log10(peak) - 10.0 * np.log10(mse))


def save_bundle(x: CTensor, path: str | Path, meta: dict | None = None) -> None:
    """Write ``<path>.json`` + ``<path>.bin`` (interleaved re/im f64 LE)."""
    path = Path(path)
    header = {
        "dtype": _BUNDLE_DTYPE,
        "shape": list(x.shape),
        "axes": list(x.axes),
        "byte_order": "little",
        "meta": meta or {},
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    path.with_suffix(".bin").write_bytes(x.data.astype("<c16").tobytes())


def load_bundle(path: str | Path) -> CTensor:
    """Read a tensor bundle; validates dtype, byte order, payload length."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("dtype") != _BUNDLE_DTYPE:
        raise UnknownDtypeError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("byte_order") != "little":
        raise ByteOrderError(f"unsupported byte order {header.get('byte_order')!r}")
    shape = tuple(int(n) for n in header["shape"])
    payload = path.with_suffix(".bin").read_bytes()
    expected = 16 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise PayloadLengthError(
            f"payload is {len(payload)} bytes, header shape {shape} needs {expected}"
        )
    data = np.frombuffer(payload, dtype="<c16").reshape(shape).astype(np.complex128)
    return CTensor(data, tuple(header["axes"]))


def bundle_meta(path: str | Path) -> dict:
    """The free-form meta map from a bundle header."""
    return json.loads(Path(path).with_suffix(".json").read_text()).get("meta", {})
