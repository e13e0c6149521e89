"""Shared scene builders for the test suite.

Expensive fixtures are session-scoped; everything is seeded and
deterministic, so caching them across test modules is safe.
"""

import numpy as np
import pytest

from rakikit import (
    CTensor,
    apply_mask,
    centered_acs_box,
    default_spec,
    extract_acs,
    espirit_maps,
    fftc_nd,
    make_compact_coils,
    make_phantom,
    make_uniform_mask,
)


def band_limited_object(extents, band, seed=0):
    """Coil-free phantom image whose k-space is zero outside ``band``.

    Band-limiting keeps every k-space sample expressible from its
    neighbors through the compact-coil convolution without edge
    truncation, which is what makes the linear-interpolation oracles
    exact.
    """
    obj = make_phantom(default_spec(extents=extents, n_coils=1, seed=seed))
    k = fftc_nd(obj["images"].data[0], axes=(0, 1, 2))
    keep = np.zeros(extents, dtype=bool)
    sl = tuple(
        slice(n // 2 - b // 2, n // 2 - b // 2 + b)
        for n, b in zip(extents, band)
    )
    keep[sl] = True
    from rakikit import ifftc_nd

    return ifftc_nd(np.where(keep, k, 0.0), axes=(0, 1, 2))


def compact_scene(extents, n_coils, band, support=3, seed=0, normalized=False):
    """Multi-coil k-space of a band-limited object under compact coils."""
    obj = band_limited_object(extents, band, seed=seed)
    coils = make_compact_coils(
        extents, n_coils, support=support, seed=seed, normalized=normalized
    ).data
    ksp = fftc_nd(coils * obj[None], axes=(1, 2, 3))
    return CTensor(ksp, ("coil", "kx", "ky", "kz")), coils


@pytest.fixture(scope="session")
def small_scene():
    """8-coil smooth-coil textured phantom, 16x48x48, R=2x2 CAIPI."""
    extents = (16, 48, 48)
    spec = default_spec(extents=extents, n_coils=8, texture=1.0, seed=0)
    ph = make_phantom(spec)
    ksp = CTensor(ph["kspace"].data[:, 0], ("coil", "kx", "ky", "kz"))
    mask = make_uniform_mask(
        (48, 48), 2, 2, shift=1, acs_box=centered_acs_box((48, 48), (16, 16))
    )
    masked = apply_mask(ksp, mask)
    acs = extract_acs(masked, mask)
    maps = espirit_maps(acs, kernel_size=5, out_extents=(48, 48))
    return {
        "extents": extents,
        "kspace": ksp,
        "mask": mask,
        "masked": masked,
        "acs": acs,
        "maps": maps,
        "sens_true": ph["sens_true"],
        "images": ph["images"],
    }
