"""Undersampling patterns: uniform R1xR2, CAIPI shifts, elliptical, ky-t.

A mask lives on the two phase-encode axes only and is broadcast over
coil/echo/readout when applied; the readout axis is always fully sampled.
Elliptical corners are tracked separately as "never acquired" so they can
be excluded from training losses and zeroed in outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError
from .tensors import CTensor, center_slices, save_bundle, load_bundle, bundle_meta


@dataclass(frozen=True)
class SamplingMask:
    grid: np.ndarray  # bool [n1, n2] over the pattern axes
    axes: tuple[str, str]  # e.g. ("ky", "kz") or ("ky", "t")
    r1: int
    r2: int
    shift: int  # CAIPI shift Delta (per R1 block for lattices, per t for ky-t)
    elliptical: bool
    acs_box: tuple[tuple[int, int], tuple[int, int]] | None  # (start, length) per axis
    never_acquired: np.ndarray = field(default=None)
    kind: str = "lattice"  # "lattice" | "kyt"
    desheared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=bool))
        if self.never_acquired is None:
            object.__setattr__(
                self, "never_acquired", np.zeros_like(self.grid, dtype=bool)
            )

    @property
    def extents(self) -> tuple[int, int]:
        return self.grid.shape

    def acceleration(self) -> float:
        """Measured net acceleration: grid positions / pattern samples.

        ACS-only extras are ignored; never-acquired elliptical corners
        count as skipped (they need no acquisition time).
        """
        lattice = _lattice_grid(
            self.extents, self.r1, self.r2, 0 if self.desheared else self.shift,
            kind=self.kind,
        )
        sampled = (self.grid & lattice) if self.acs_box else self.grid
        return self.grid.size / int(sampled.sum())


def _check_box(extents, acs_box):
    if acs_box is None:
        return None
    box = tuple((int(s), int(ln)) for s, ln in acs_box)
    for (s, ln), n in zip(box, extents):
        if s < 0 or ln < 1 or s + ln > n:
            raise ConfigError(f"acs_box {box} does not fit extents {extents}")
    return box


def centered_acs_box(extents, acs_extents):
    """ACS box of the given size centered on the grid (low-index-extra rule)."""
    return tuple(
        (center_slices(n, a).start, a) for n, a in zip(extents, acs_extents)
    )


def _lattice_grid(extents, r1, r2, shift, kind="lattice") -> np.ndarray:
    n1, n2 = extents
    i = np.arange(n1)[:, None]
    j = np.arange(n2)[None, :]
    if kind == "kyt":
        # axis 0 = ky, axis 1 = t; the sampled lines advance by shift per t
        return (i - shift * j) % r1 == 0
    return (i % r1 == 0) & ((j - shift * (i // r1)) % r2 == 0)


def _ellipse_interior(extents) -> np.ndarray:
    n1, n2 = extents
    a = (n1 - 1) / 2.0
    b = (n2 - 1) / 2.0
    i = np.arange(n1)[:, None]
    j = np.arange(n2)[None, :]
    return ((i - a) / a) ** 2 + ((j - b) / b) ** 2 <= 1.0


def _force_acs(grid, acs_box):
    if acs_box is not None:
        (s1, l1), (s2, l2) = acs_box
        grid[s1 : s1 + l1, s2 : s2 + l2] = True


def make_uniform_mask(extents, r1, r2, shift=0, acs_box=None) -> SamplingMask:
    """Uniform R1xR2 lattice with CAIPI shift ``shift`` per R1 block."""
    if r1 < 1 or r2 < 1:
        raise ConfigError(f"acceleration factors must be >= 1, got {r1}x{r2}")
    if not (0 <= shift < r2):
        raise ConfigError(f"CAIPI shift must satisfy 0 <= shift < R2, got {shift}")
    box = _check_box(extents, acs_box)
    grid = _lattice_grid(extents, r1, r2, shift)
    _force_acs(grid, box)
    return SamplingMask(grid, ("ky", "kz"), r1, r2, shift, False, box)


def make_elliptical_mask(extents, r1, r2, shift=0, acs_box=None) -> SamplingMask:
    """Uniform CAIPI lattice intersected with the inscribed ellipse."""
    base = make_uniform_mask(extents, r1, r2, shift, acs_box=None)
    box = _check_box(extents, acs_box)
    interior = _ellipse_interior(extents)
    grid = base.grid & interior
    _force_acs(grid, box)
    return SamplingMask(
        grid, ("ky", "kz"), r1, r2, shift, True, box, never_acquired=~interior
    )


def make_kyt_mask(ny, nt, r, shift=0, acs_box=None) -> SamplingMask:
    """Spatiotemporal pattern: at time t, ky lines with (ky - shift*t) % r == 0."""
    if r < 1:
        raise ConfigError(f"acceleration must be >= 1, got {r}")
    box = _check_box((ny, nt), acs_box)
    grid = _lattice_grid((ny, nt), r, 1, shift, kind="kyt")
    _force_acs(grid, box)
    return SamplingMask(grid, ("ky", "t"), r, 1, shift, False, box, kind="kyt")


def _pattern_axis_indices(x: CTensor, mask: SamplingMask) -> tuple[int, int]:
    a1, a2 = x.axis(mask.axes[0]), x.axis(mask.axes[1])
    if x.shape[a1] != mask.extents[0] or x.shape[a2] != mask.extents[1]:
        raise GeometryError(
            f"mask extents {mask.extents} do not match tensor axes "
            f"{mask.axes} of shape {(x.shape[a1], x.shape[a2])}"
        )
    return a1, a2


def _broadcast_grid(x: CTensor, mask: SamplingMask, grid: np.ndarray) -> np.ndarray:
    a1, a2 = _pattern_axis_indices(x, mask)
    shape = [1] * x.data.ndim
    shape[a1] = mask.extents[0]
    shape[a2] = mask.extents[1]
    return (grid if a1 < a2 else grid.T).reshape(shape)


def apply_mask(x: CTensor, mask: SamplingMask) -> CTensor:
    """Zero unsampled entries, broadcasting over all non-pattern axes."""
    g = _broadcast_grid(x, mask, mask.grid)
    return x.with_data(np.where(g, x.data, 0.0))


def extract_acs(x: CTensor, mask: SamplingMask) -> CTensor:
    """Crop to the ACS box along the pattern axes; other axes kept whole."""
    if mask.acs_box is None:
        raise GeometryError("mask has no ACS box")
    a1, a2 = _pattern_axis_indices(x, mask)
    (s1, l1), (s2, l2) = mask.acs_box
    sl = [slice(None)] * x.data.ndim
    sl[a1] = slice(s1, s1 + l1)
    sl[a2] = slice(s2, s2 + l2)
    return x.with_data(x.data[tuple(sl)].copy())


def _shear_data(data: np.ndarray, a1: int, a2: int, r1: int, shift: int,
                sign: int) -> np.ndarray:
    """Circularly shift axis a2 by sign*shift*(i // r1) for each a1 row i."""
    if shift == 0:
        return data.copy()
    out = np.empty_like(data)
    sl = [slice(None)] * data.ndim
    ax = a2 - 1 if a2 > a1 else a2
    for i in range(data.shape[a1]):
        sl_i = list(sl)
        sl_i[a1] = i
        out[tuple(sl_i)] = np.roll(data[tuple(sl_i)], sign * shift * (i // r1), axis=ax)
    return out


def deshear(x: CTensor | SamplingMask, mask: SamplingMask | None = None):
    """Remap a CAIPI-shifted lattice onto the rectangular Delta=0 lattice.

    Pass a SamplingMask alone, or a CTensor plus the mask describing its
    pattern. Inverse of :func:`reshear` (bit-exact round trip).
    """
    return _shear(x, mask, -1)


def reshear(x: CTensor | SamplingMask, mask: SamplingMask | None = None):
    return _shear(x, mask, +1)


def _shear(x, mask, sign):
    if isinstance(x, SamplingMask):
        mask = x
    if mask.kind == "kyt":
        raise GeometryError("deshear applies to lattice masks only")
    if isinstance(x, SamplingMask):
        grid = _shear_data(x.grid[None], 1, 2, x.r1, x.shift, sign)[0]
        never = _shear_data(x.never_acquired[None], 1, 2, x.r1, x.shift, sign)[0]
        return replace(x, grid=grid, never_acquired=never, desheared=(sign < 0))
    a1, a2 = _pattern_axis_indices(x, mask)
    return x.with_data(_shear_data(x.data, a1, a2, mask.r1, mask.shift, sign))


def save_mask(mask: SamplingMask, path: str | Path) -> None:
    """Mask as a 0/1 tensor bundle plus a JSON descriptor in meta."""
    desc = {
        "axes": list(mask.axes),
        "r1": mask.r1,
        "r2": mask.r2,
        "shift": mask.shift,
        "elliptical": mask.elliptical,
        "acs_box": [list(b) for b in mask.acs_box] if mask.acs_box else None,
        "kind": mask.kind,
        "desheared": mask.desheared,
    }
    stack = np.stack([mask.grid, mask.never_acquired]).astype(np.complex128)
    save_bundle(CTensor(stack, ("maps", *mask.axes)), path, meta={"mask": desc})


def load_mask(path: str | Path) -> SamplingMask:
    x = load_bundle(path)
    desc = bundle_meta(path)["mask"]
    grid = np.real(x.data[0]) > 0.5
    never = np.real(x.data[1]) > 0.5
    box = tuple(tuple(b) for b in desc["acs_box"]) if desc["acs_box"] else None
    return SamplingMask(
        grid, tuple(desc["axes"]), desc["r1"], desc["r2"], desc["shift"],
        desc["elliptical"], box, never_acquired=never, kind=desc["kind"],
        desheared=desc.get("desheared", False),
    )
