"""Eigenvalue-based coil sensitivity estimation and coil combination.

Readout-decoupled (hybrid) strategy: a 1D inverse FFT along the fully
sampled kx axis, then an independent 2D eigen-analysis per readout
position over (ky, kz): block-Hankel calibration matrix, SVD, kernel
projection to image space, pointwise Hermitian eigendecomposition. The
leading eigenvector gives the maps, the leading eigenvalue the support
measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError
from .tensors import CTensor, fftc, ifftc, ifftc_nd, center_slices


@dataclass(frozen=True)
class SensitivityMaps:
    """Per-coil complex maps plus the leading-eigenvalue support map.

    ``maps`` is [coil, kx, ky, kz] in hybrid/image space; maps are zero
    where ``eigval`` falls below the crop threshold. The phase gauge makes
    the first coil real and non-negative at every retained voxel.
    """

    maps: CTensor
    eigval: np.ndarray  # real [kx, ky, kz]
    kernel_size: int
    sigma_threshold: float
    crop_threshold: float

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]


def _calibration_svd(hyb_x: np.ndarray, k1: int, k2: int, tau: float,
                     scale: float = 0.0):
    """Row-space kernels of the block-Hankel matrix at one readout position.

    ``scale`` is the magnitude of the strongest readout position; slices
    whose leading singular value is negligible against it carry no signal
    and return no kernels (otherwise round-off noise masquerades as a
    fully determined row space).
    """
    nc, n1, n2 = hyb_x.shape
    w1 = n1 - k1 + 1
    w2 = n2 - k2 + 1
    windows = np.lib.stride_tricks.sliding_window_view(hyb_x, (k1, k2), axis=(1, 2))
    A = windows.transpose(1, 2, 0, 3, 4).reshape(w1 * w2, nc * k1 * k2)
    _, s, vh = np.linalg.svd(A, full_matrices=False)
    if s[0] <= max(scale, s[0]) * 1e-12:
        return np.zeros((0, nc, k1, k2), dtype=np.complex128)
    keep = s >= tau * s[0]
    v = vh[keep]
    # deterministic sign: largest-magnitude component made real-positive
    idx = np.argmax(np.abs(v), axis=1)
    phase = v[np.arange(len(v)), idx]
    v = v * (np.abs(phase) / np.where(phase == 0, 1.0, phase))[:, None]
    return v.reshape(-1, nc, k1, k2)


def _kernels_to_image(kern: np.ndarray, out1: int, out2: int) -> np.ndarray:
    """Zero-pad kernels to the output grid and inverse-transform.

    Scaled so the projection operator has unit leading eigenvalue on
    voxels fully inside the row space.
    """
    nk, nc, k1, k2 = kern.shape
    pad = np.zeros((nk, nc, out1, out2), dtype=np.complex128)
    pad[:, :, center_slices(out1, k1), center_slices(out2, k2)] = kern
    img = ifftc_nd(pad, axes=(2, 3))
    return img * (np.sqrt(out1 * out2) / np.sqrt(k1 * k2))


def espirit_maps(acs: CTensor, kernel_size: int = 6, sigma_threshold: float = 0.01,
                 crop_threshold: float = 0.9,
                 out_extents: tuple[int, int] | None = None) -> SensitivityMaps:
    """Estimate sensitivities from fully sampled ACS [coil, kx, ky, kz].

    ``out_extents`` sets the (ky, kz) grid of the returned maps; default
    is the ACS grid itself (low-resolution maps). The readout axis is
    decoupled by a 1D inverse FFT and processed independently.
    """
    if not (0 < sigma_threshold < 1):
        raise ConfigError(f"sigma threshold must be in (0,1), got {sigma_threshold}")
    if not (0 < crop_threshold <= 1):
        raise ConfigError(f"crop threshold must be in (0,1], got {crop_threshold}")
    x = acs.transpose(("coil", "kx", "ky", "kz"))
    nc, nx, n1, n2 = x.shape
    k1 = min(kernel_size, n1)
    k2 = min(kernel_size, n2)
    if n1 < k1 or n2 < k2 or (n1 - k1 + 1) * (n2 - k2 + 1) < nc:
        raise GeometryError(
            f"ACS ({n1}x{n2}) too small for calibration window {k1}x{k2}"
        )
    out1, out2 = out_extents if out_extents is not None else (n1, n2)

    hyb = ifftc(x, "kx").data  # [coil, x, ky, kz]
    scale = float(np.max(np.sqrt(np.sum(np.abs(hyb) ** 2, axis=(0, 2, 3)))))
    maps = np.zeros((nc, nx, out1, out2), dtype=np.complex128)
    eigval = np.zeros((nx, out1, out2))
    for ix in range(nx):
        kern = _calibration_svd(hyb[:, ix], k1, k2, sigma_threshold, scale)
        if len(kern) == 0:
            continue
        kimg = _kernels_to_image(kern, out1, out2)  # [nk, nc, out1, out2]
        V = kimg.transpose(2, 3, 1, 0)  # [out1, out2, nc, nk]
        G = V @ V.conj().transpose(0, 1, 3, 2)
        evals, evecs = np.linalg.eigh(G)
        lead = evals[..., -1]
        vec = evecs[..., -1]
        # phase gauge on the first coil
        ph = vec[..., 0]
        gauge = np.where(np.abs(ph) > 0, ph / np.where(np.abs(ph) > 0, np.abs(ph), 1.0), 1.0)
        vec = vec * np.conj(gauge)[..., None]
        keep = lead >= crop_threshold
        maps[:, ix] = np.where(keep[None], vec.transpose(2, 0, 1), 0.0)
        eigval[ix] = lead
    return SensitivityMaps(
        CTensor(maps, ("coil", "kx", "ky", "kz")), eigval, kernel_size,
        sigma_threshold, crop_threshold,
    )


def coil_combine(images: CTensor, maps: SensitivityMaps) -> CTensor:
    """Matched-filter combine: m(r) = sum_c conj(C_c(r)) x_c(r).

    Maps always live on (coil, kx, ky, kz). Dynamic images carrying a
    ``t`` axis instead of ``kz`` are combined frame by frame with the
    same maps (which must then have a singleton kz extent).
    """
    m = maps.maps.transpose(("coil", "kx", "ky", "kz"))
    spatial = tuple(a for a in images.axes if a != "coil")
    if images.has_axis("t") and not images.has_axis("kz"):
        x = images.transpose(("coil", "kx", "ky", "t"))
        if m.shape[:3] != x.shape[:3] or m.shape[3] != 1:
            raise GeometryError(
                f"dynamic combine needs maps [*, kz=1] matching {x.shape[:3]}, "
                f"got {m.shape}"
            )
        combined = np.sum(
            np.conj(m.data)[..., None] * x.data[..., None, :], axis=0
        )[..., 0, :]
        return CTensor(combined, ("kx", "ky", "t")).transpose(spatial)
    x = images.transpose(("coil", "kx", "ky", "kz"))
    if x.shape != m.shape:
        raise GeometryError(
            f"image extents {x.shape} do not match map extents {m.shape}"
        )
    combined = np.sum(np.conj(m.data) * x.data, axis=0)
    return CTensor(combined, ("kx", "ky", "kz")).transpose(spatial)


def make_combo_target(acs: CTensor, maps: SensitivityMaps) -> CTensor:
    """Coil-combined ACS k-space: fftc(combine(ifftc(acs), maps)).

    The maps must live on the ACS grid (low-resolution mode) or on the
    zero-padded full grid; extents are checked by coil_combine.
    """
    spatial = tuple(a for a in acs.axes if a not in ("coil", "t"))
    img = ifftc(acs, spatial)
    combined = coil_combine(img, maps)
    return fftc(combined, spatial)


def kspace_combine_convolution(coil_kspace: CTensor, maps: SensitivityMaps) -> CTensor:
    """Coil combination done entirely in k-space as a sum of convolutions.

    Circularly convolves each coil's k-space with the k-space of its
    conjugate map and sums over coils; equals fftc(coil_combine(ifftc)).
    Used to verify that the combine step is expressible as a k-space
    convolution (what makes it learnable by a convolutional layer).
    """
    x = coil_kspace.transpose(("coil", "kx", "ky", "kz"))
    m = maps.maps.transpose(("coil", "kx", "ky", "kz"))
    if x.shape != m.shape:
        raise GeometryError("extent mismatch between k-space and maps")
    nc, nx, n1, n2 = x.shape
    kmaps = fftc(m.with_data(np.conj(m.data)), ("kx", "ky", "kz")).data
    out = np.zeros((nx, n1, n2), dtype=np.complex128)
    n = nx * n1 * n2
    for c in range(nc):
        out += _circ_conv_centered(x.data[c], kmaps[c]) / np.sqrt(n)
    res = CTensor(out, ("kx", "ky", "kz"))
    spatial = tuple(a for a in coil_kspace.axes if a != "coil")
    return res.transpose(spatial)


def _circ_conv_centered(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Centered circular convolution via padded FFTs (orthonormal pair)."""
    import scipy.fft

    sh = a.shape
    fa = scipy.fft.fftn(scipy.fft.ifftshift(a))
    fb = scipy.fft.fftn(scipy.fft.ifftshift(b))
    return scipy.fft.fftshift(scipy.fft.ifftn(fa * fb))
