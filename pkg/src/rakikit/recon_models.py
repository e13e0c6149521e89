"""Learned k-space reconstructions: per-coil RAKI and coil-combined
single-model reconstruction, with multi-echo joint and ky-t variants.

All learned modes share one geometry: deshear the CAIPI pattern so the
acquired set is a rectangular lattice, decimate it into a dense grid of
real/imaginary channels, and train a small 3D CNN whose output channels
are the missing offsets of the sampling cell (2R per echo). Targets come
from the ACS region only; the trained model is then applied across the
whole decimated grid and the predictions scattered back to the lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError
from .espirit import SensitivityMaps, coil_combine, make_combo_target
from .nn_engine import ModelWeights, TrainConfig, forward, init_model, train
from .sampling import SamplingMask, extract_acs
from .tensors import CTensor, fftc, ifftc

MODES = ("raki_percoil", "eraki", "eraki_joint", "eraki_kyt")


@dataclass
class ReconProblem:
    kspace_masked: CTensor  # [coil, (echo,) kx, p1, p2]
    masks: tuple[SamplingMask, ...]  # one per echo
    mode: str
    cfg: TrainConfig
    maps: SensitivityMaps | None = None  # full-pattern-grid sensitivities
    acs_kx: int | None = None  # calibration readout window (ky-t)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        ne = self.n_echoes
        if len(self.masks) != ne:
            raise GeometryError(
                f"{ne} echoes need {ne} masks, got {len(self.masks)}"
            )
        if self.mode == "raki_percoil" and ne != 1:
            raise ConfigError("per-coil RAKI supports a single echo")
        if self.mode in ("eraki", "eraki_joint", "eraki_kyt") and self.maps is None:
            raise ConfigError(f"mode {self.mode!r} requires sensitivity maps")

    @property
    def n_echoes(self) -> int:
        k = self.kspace_masked
        return k.extent("echo") if k.has_axis("echo") else 1

    @property
    def n_coils(self) -> int:
        return self.kspace_masked.extent("coil")


def echo_shifted_masks(mask: SamplingMask, n_echo: int) -> tuple[SamplingMask, ...]:
    """Echo e gets CAIPI shift (shift + e) mod R2, same lattice otherwise."""
    if mask.kind == "kyt":
        return tuple([mask] * n_echo)
    from .sampling import make_uniform_mask, make_elliptical_mask

    maker = make_elliptical_mask if mask.elliptical else make_uniform_mask
    return tuple(
        maker(mask.extents, mask.r1, mask.r2,
              shift=(mask.shift + e) % mask.r2, acs_box=mask.acs_box)
        for e in range(n_echo)
    )


# ---------------------------------------------------------------------------
# lattice geometry on the internal [coil, p1, p2, kx] layout


def _steps(mask: SamplingMask) -> tuple[int, int]:
    return (mask.r1, 1) if mask.kind == "kyt" else (mask.r1, mask.r2)


def _offsets(mask: SamplingMask) -> list[tuple[int, int]]:
    if mask.kind == "kyt":
        return [(a, 0) for a in range(mask.r1)]
    return [(a, b) for a in range(mask.r1) for b in range(mask.r2)]


def _deshear_arr(arr: np.ndarray, mask: SamplingMask, inverse: bool = False
                 ) -> np.ndarray:
    """Circularly align the lattice: [coil..., p1, p2, kx] layout."""
    out = np.empty_like(arr)
    sgn = 1 if inverse else -1
    if mask.kind == "kyt":
        if mask.shift == 0:
            return arr.copy()
        for t in range(arr.shape[-2]):
            out[..., :, t, :] = np.roll(
                arr[..., :, t, :], sgn * mask.shift * t, axis=-2
            )
        return out
    if mask.shift == 0:
        return arr.copy()
    for i in range(arr.shape[-3]):
        out[..., i, :, :] = np.roll(
            arr[..., i, :, :], sgn * mask.shift * (i // mask.r1), axis=-2
        )
    return out


def _acq_coords(mask: SamplingMask, i_d: np.ndarray, j_d: np.ndarray):
    """Desheared (p1, p2) indices -> acquired-frame indices."""
    n1, n2 = mask.extents
    if mask.kind == "kyt":
        return (i_d + mask.shift * j_d) % n1, j_d
    return i_d, (j_d + mask.shift * (i_d // mask.r1)) % n2


def _to_internal(x: CTensor, mask: SamplingMask) -> np.ndarray:
    """[coil, (echo,) p1, p2, kx] array from a named tensor."""
    order = ["coil"]
    if x.has_axis("echo"):
        order.append("echo")
    order += [mask.axes[0], mask.axes[1], "kx"]
    if set(order) != set(x.axes):
        raise GeometryError(f"unexpected axes {x.axes}, need {order}")
    return x.transpose(tuple(order)).data


def _complex_to_channels(arr: np.ndarray) -> np.ndarray:
    """[c, ...] complex -> [2c, ...] real, (re, im) interleaved per channel."""
    out = np.empty((2 * arr.shape[0], *arr.shape[1:]))
    out[0::2] = arr.real
    out[1::2] = arr.imag
    return out


def _channels_to_complex(arr: np.ndarray) -> np.ndarray:
    return arr[0::2] + 1j * arr[1::2]


@dataclass
class OffsetTargetSet:
    """Decimated training input plus spatially aligned offset targets."""

    inputs: np.ndarray  # real [2*Nc*Ne, nu, nv, nx]
    targets: np.ndarray  # real [2*R*Ne, ou, ov, ox]
    valid: np.ndarray  # bool, same shape as targets
    offsets: list[tuple[int, int]]  # row-major over the sampling cell
    scale: float
    anchor_origin: tuple[int, int]  # decimated coords of inputs[:, 0, 0, :]

    @property
    def in_channels(self) -> int:
        return self.inputs.shape[0]

    @property
    def out_channels(self) -> int:
        return self.targets.shape[0]


def _decimated_input(problem: ReconProblem) -> np.ndarray:
    """Desheared, decimated acquired grid, echoes stacked on the coil axis."""
    mask0 = problem.masks[0]
    s1, s2 = _steps(mask0)
    n1, n2 = mask0.extents
    if n1 % s1 or n2 % s2:
        raise GeometryError(
            f"pattern extents {mask0.extents} must divide by steps {(s1, s2)}"
        )
    arr = _to_internal(problem.kspace_masked, mask0)
    if arr.ndim == 4:
        arr = arr[:, None]
    per_echo = []
    for e, mask in enumerate(problem.masks):
        d = _deshear_arr(arr[:, e], mask)
        per_echo.append(d[:, ::s1, ::s2, :])
    return np.concatenate(per_echo, axis=0)  # [Nc*Ne, nu, nv, nx]


def _echo_slice(x: CTensor, e: int) -> CTensor:
    if not x.has_axis("echo"):
        return x
    sl = [slice(None)] * x.data.ndim
    sl[x.axis("echo")] = e
    axes = tuple(a for a in x.axes if a != "echo")
    return CTensor(x.data[tuple(sl)], axes)


def _combo_targets_per_echo(problem: ReconProblem) -> list[np.ndarray]:
    """y_combo per echo on the full grid, [n1, n2, nx] in (p1, p2, kx) order.

    The ACS box is embedded in an otherwise-zero full grid and combined
    with the full-grid maps, so interior target values agree with the
    full-grid combined k-space; a validity margin at the box edge hides
    the positions whose combination sources fall outside the box.
    """
    mask0 = problem.masks[0]
    (b1, l1), (b2, l2) = mask0.acs_box
    out = []
    x = problem.kspace_masked
    for e, mask in enumerate(problem.masks):
        arr = _to_internal(_echo_slice(x, e), mask0)  # [coil, p1, p2, kx]
        boxed = np.zeros_like(arr)
        boxed[:, b1 : b1 + l1, b2 : b2 + l2, :] = arr[
            :, b1 : b1 + l1, b2 : b2 + l2, :
        ]
        t = CTensor(boxed.transpose(0, 3, 1, 2), ("coil", "kx", *mask0.axes))
        y = make_combo_target(t, problem.maps)
        out.append(y.transpose((mask0.axes[0], mask0.axes[1], "kx")).data)
    return out


def build_targets(problem: ReconProblem, coil: int | None = None,
                  target_margin: int = 1) -> OffsetTargetSet:
    """Assemble the decimated input and ACS-derived offset targets.

    For the combined modes the target is y_combo (one channel pair per
    cell offset per echo); with ``coil`` given, the target is that coil's
    own ACS k-space (per-coil RAKI). Targets are aligned to the valid-
    convolution output by the receptive-field center; positions whose
    acquired-frame location falls outside the ACS box (or was never
    acquired) are masked out of the loss.
    """
    mask0 = problem.masks[0]
    if mask0.acs_box is None:
        raise GeometryError("training requires a mask with an ACS box")
    s1, s2 = _steps(mask0)
    offsets = _offsets(mask0)
    ne = problem.n_echoes
    dec = _decimated_input(problem)
    nu, nv, nx = dec.shape[1:]

    if coil is None:
        combos = _combo_targets_per_echo(problem)
        mg = target_margin  # skip combination-truncated box-edge targets
    else:
        # per-coil RAKI: the target is the coil's own measured k-space
        arr = _to_internal(problem.kspace_masked, mask0)
        combos = [arr[coil]]
        mg = 0

    scale = _acs_scale(problem)

    (b1, l1), (b2, l2) = mask0.acs_box
    if 2 * mg >= l1 or 2 * mg >= l2:
        raise GeometryError(
            f"target margin {mg} leaves no ACS interior in box {mask0.acs_box}"
        )
    uu, vv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    n_off = len(offsets)
    tgt = np.zeros((ne, n_off, nu, nv, nx), dtype=np.complex128)
    val = np.zeros((ne, n_off, nu, nv), dtype=bool)
    for e, mask in enumerate(problem.masks):
        ycombo = combos[min(e, len(combos) - 1)]
        for k, (a, b) in enumerate(offsets):
            i_d = uu * s1 + a
            j_d = vv * s2 + b
            i_a, j_a = _acq_coords(mask, i_d, j_d)
            ok = (
                (i_a >= b1 + mg) & (i_a < b1 + l1 - mg)
                & (j_a >= b2 + mg) & (j_a < b2 + l2 - mg)
                & ~mask.never_acquired[i_a, j_a]
            )
            val[e, k][ok] = True
            tgt[e, k][ok] = ycombo[i_a[ok], j_a[ok], :]

    any_valid = val.any(axis=(0, 1))
    if not any_valid.any():
        raise GeometryError("no ACS-covered anchor positions for training")
    urange = np.flatnonzero(any_valid.any(axis=1))
    vrange = np.flatnonzero(any_valid.any(axis=0))

    rf = _receptive_field(problem.cfg)
    c1, c2, cx = ((r - 1) // 2 for r in rf)

    # crop the input so the valid-convolution output covers the ACS anchors
    u0 = max(0, urange[0] - c1)
    u1 = min(nu, urange[-1] + 1 + (rf[0] - 1 - c1))
    v0 = max(0, vrange[0] - c2)
    v1 = min(nv, vrange[-1] + 1 + (rf[1] - 1 - c2))
    ou = (u1 - u0) - rf[0] + 1
    ov = (v1 - v0) - rf[1] + 1
    ox = nx - rf[2] + 1
    if ou < 1 or ov < 1 or ox < 1:
        raise GeometryError(
            f"ACS anchor region {(u1 - u0, v1 - v0, nx)} (decimated) is "
            f"smaller than the receptive field {rf}"
        )
    au, av = u0 + c1, v0 + c2  # first anchor covered by the output

    inputs = _complex_to_channels(dec[:, u0:u1, v0:v1, :] * scale)
    tgt_c = tgt[:, :, au : au + ou, av : av + ov, cx : cx + ox] * scale
    val_c = val[:, :, au : au + ou, av : av + ov]
    tgt_flat = tgt_c.reshape(ne * n_off, ou, ov, ox)
    targets = _complex_to_channels(tgt_flat)
    valid_k = np.broadcast_to(
        val_c.reshape(ne * n_off, ou, ov, 1), (ne * n_off, ou, ov, ox)
    )
    valid = np.empty((2 * ne * n_off, ou, ov, ox), dtype=bool)
    valid[0::2] = valid_k
    valid[1::2] = valid_k
    if not valid.any():
        raise GeometryError("receptive-field cropping removed every target")
    return OffsetTargetSet(inputs, targets, valid, offsets, scale, (u0, v0))


def _receptive_field(cfg: TrainConfig) -> tuple[int, int, int]:
    rf = np.ones(3, dtype=int)
    for ks in cfg.kernel_sizes:
        rf += np.array(ks) - 1
    return tuple(int(r) for r in rf)


def _acs_scale(problem: ReconProblem) -> float:
    """RMS normalization keeps the data loss O(1) against the weight penalty."""
    acs = extract_acs(problem.kspace_masked, problem.masks[0]).data
    rms = float(np.sqrt(np.mean(np.abs(acs) ** 2)))
    if rms == 0:
        raise GeometryError("ACS region is identically zero")
    return 1.0 / rms


# ---------------------------------------------------------------------------
# training

RIDGE_INIT = 1e-3  # trace-relative ridge for the linear warm start


def _ridge_solution(ts: OffsetTargetSet, cfg: TrainConfig) -> np.ndarray:
    """Per-channel ridge fit of a single first-layer-sized linear kernel.

    The remaining layers are treated as centered identities, so the input
    is first cropped by their margins; the resulting weight matrix maps a
    ``kernel_sizes[0]`` window directly onto the stack's output grid.
    """
    k1 = cfg.kernel_sizes[0]
    lo = np.zeros(3, dtype=int)
    for ks in cfg.kernel_sizes[1:]:
        lo += (np.array(ks) - 1) // 2
    x = ts.inputs[
        :,
        lo[0] : ts.inputs.shape[1] - lo[0] or None,
        lo[1] : ts.inputs.shape[2] - lo[1] or None,
        lo[2] : ts.inputs.shape[3] - lo[2] or None,
    ]
    win = np.lib.stride_tricks.sliding_window_view(x, k1, axis=(1, 2, 3))
    ou, ov, ox = win.shape[1:4]
    if (ou, ov, ox) != ts.targets.shape[1:]:
        raise GeometryError(
            f"ridge window grid {(ou, ov, ox)} does not match targets "
            f"{ts.targets.shape[1:]}; kernel centers must be aligned"
        )
    F = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(ou * ov * ox, -1)
    nfeat = F.shape[1]
    W = np.zeros((ts.out_channels, nfeat))
    eye = np.eye(nfeat)
    for c in range(ts.out_channels):
        sel = ts.valid[c].ravel()
        A = F[sel]
        y = ts.targets[c].ravel()[sel]
        gram = A.T @ A
        gram += RIDGE_INIT * np.trace(gram) / nfeat * eye
        W[c] = np.linalg.solve(gram, A.T @ y)
    return W


def linear_init(ts: OffsetTargetSet, cfg: TrainConfig) -> ModelWeights:
    """Seed the CNN with a calibrated linear kernel (GRAPPA-style warm start).

    The ridge solution W is factorized by SVD and embedded exactly in the
    ReLU stack with paired +/- channels (ReLU(v) - ReLU(-v) = v); later
    layers start as centered identities. Falls back to the random init if
    the hidden widths cannot hold the paired factors.
    """
    model = init_model(ts.in_channels, ts.out_channels, cfg)
    if not cfg.widths:  # degenerate single-layer stack: the kernel is W itself
        W = _ridge_solution(ts, cfg)
        model.layers[0].kernel = W.reshape(
            ts.out_channels, ts.in_channels, *cfg.kernel_sizes[0]
        )
        model.layers[0].bias = np.zeros_like(model.layers[0].bias)
        return model
    r = min(ts.out_channels, min(cfg.widths) // 2)
    if r < 1:
        return model
    W = _ridge_solution(ts, cfg)
    u, s, vt = np.linalg.svd(W, full_matrices=False)
    rs = np.sqrt(s[:r])
    A = u[:, :r] * rs  # [out_ch, r]
    B = rs[:, None] * vt[:r]  # [r, nfeat]
    k1 = cfg.kernel_sizes[0]
    first = np.zeros_like(model.layers[0].kernel)
    first[:r] = B.reshape(r, ts.in_channels, *k1)
    first[r : 2 * r] = -first[:r]
    model.layers[0].kernel = first
    model.layers[0].bias = np.zeros_like(model.layers[0].bias)
    for layer in model.layers[1:-1]:
        kern = np.zeros_like(layer.kernel)
        ctr = tuple((k - 1) // 2 for k in kern.shape[2:])
        for j in range(2 * r):
            kern[(j, j, *ctr)] = 1.0
        layer.kernel = kern
        layer.bias = np.zeros_like(layer.bias)
    last = np.zeros_like(model.layers[-1].kernel)
    last[:, :r, 0, 0, 0] = A
    last[:, r : 2 * r, 0, 0, 0] = -A
    model.layers[-1].kernel = last
    model.layers[-1].bias = np.zeros_like(model.layers[-1].bias)
    return model


def _init_for(ts: OffsetTargetSet, cfg: TrainConfig, init: str) -> ModelWeights:
    if init == "linear":
        return linear_init(ts, cfg)
    if init == "random":
        return init_model(ts.in_channels, ts.out_channels, cfg)
    raise ConfigError(f"unknown init {init!r}; choose 'linear' or 'random'")


def train_eraki(problem: ReconProblem, target_margin: int = 1,
                init: str = "linear") -> tuple[ModelWeights, list[float]]:
    """Train the single coil-combined model (eraki / eraki_joint / eraki_kyt)."""
    if problem.mode == "raki_percoil":
        raise ConfigError("use train_raki for per-coil mode")
    ts = build_targets(problem, target_margin=target_margin)
    model = _init_for(ts, problem.cfg, init)
    return train(model, ts.inputs, ts.targets, problem.cfg, valid=ts.valid)


def train_raki(problem: ReconProblem, init: str = "linear"
               ) -> tuple[list[ModelWeights], list[list[float]]]:
    """One model per coil, each predicting that coil's own offset targets."""
    if problem.mode != "raki_percoil":
        raise ConfigError("train_raki requires mode 'raki_percoil'")
    models, histories = [], []
    for c in range(problem.n_coils):
        ts = build_targets(problem, coil=c)
        model = _init_for(ts, problem.cfg, init)
        trained, hist = train(model, ts.inputs, ts.targets, problem.cfg,
                              valid=ts.valid)
        models.append(trained)
        histories.append(hist)
    return models, histories


# ---------------------------------------------------------------------------
# inference


@dataclass
class ReconResult:
    """Reconstructed k-space plus its magnitude image."""

    kspace: CTensor  # combined (eraki) or per-coil (raki) k-space
    image: CTensor  # magnitude image, echo axis kept when present


def _predict_grids(problem: ReconProblem, model: ModelWeights) -> np.ndarray:
    """Run the model over the whole decimated grid -> [groups, nu, nv, nx]."""
    dec = _decimated_input(problem)
    scale = _acs_scale(problem)
    rf = model.receptive_field
    c1, c2, cx = ((r - 1) // 2 for r in rf)
    x = _complex_to_channels(dec * scale)
    x = np.pad(x, ((0, 0), (c1, rf[0] - 1 - c1), (c2, rf[1] - 1 - c2),
                   (cx, rf[2] - 1 - cx)))
    pred = forward(model, x)
    return _channels_to_complex(pred) / scale


def _scatter_echo(pred: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Offset predictions [n_off, nu, nv, nx] -> full acquired-frame grid."""
    s1, s2 = _steps(mask)
    n1, n2 = mask.extents
    nx = pred.shape[-1]
    out = np.zeros((n1, n2, nx), dtype=np.complex128)
    for k, (a, b) in enumerate(_offsets(mask)):
        out[a::s1, b::s2, :] = pred[k]
    out = _deshear_arr(out[None], mask, inverse=True)[0]
    out[mask.never_acquired] = 0.0
    return out


def infer(models: ModelWeights | list[ModelWeights],
          problem: ReconProblem) -> ReconResult:
    """Apply trained weights across the full undersampled grid.

    Combined modes return the coil-combined k-space as predicted (no data
    consistency is defined on the combined grid); per-coil RAKI restores
    the acquired multi-coil samples exactly (hard data consistency) and
    combines with the full-grid maps for the image.
    """
    mask0 = problem.masks[0]
    p1l, p2l = mask0.axes
    fourier = tuple(a for a in ("kx", p1l, p2l) if a != "t")
    n_off = len(_offsets(mask0))
    ne = problem.n_echoes

    if problem.mode == "raki_percoil":
        model_list = list(models) if isinstance(models, (list, tuple)) else [models]
        if len(model_list) != problem.n_coils:
            raise GeometryError(
                f"{problem.n_coils} coils need as many models, got {len(model_list)}"
            )
        coils = []
        for model in model_list:
            pred = _predict_grids(problem, model)  # [n_off, nu, nv, nx]
            coils.append(_scatter_echo(pred, mask0))
        out = np.stack(coils)  # [coil, p1, p2, kx]
        acq = _to_internal(problem.kspace_masked, mask0)
        out[:, mask0.grid] = acq[:, mask0.grid]
        ksp = CTensor(out.transpose(0, 3, 1, 2), ("coil", "kx", p1l, p2l))
        ksp = ksp.transpose(problem.kspace_masked.axes)
        if problem.maps is None:
            raise ConfigError("raki_percoil image needs full-grid maps")
        img = coil_combine(ifftc(ksp, fourier), problem.maps)
        image = img.with_data(np.abs(img.data))
        return ReconResult(ksp, image)

    model = models[0] if isinstance(models, (list, tuple)) else models
    pred = _predict_grids(problem, model)  # [ne*n_off, nu, nv, nx]
    per_echo = [
        _scatter_echo(pred[e * n_off : (e + 1) * n_off], problem.masks[e])
        for e in range(ne)
    ]
    combined = np.stack(per_echo)  # [echo, p1, p2, kx]
    ksp = CTensor(combined.transpose(0, 3, 1, 2), ("echo", "kx", p1l, p2l))
    img = ifftc(ksp, fourier)
    image = img.with_data(np.abs(img.data))
    if not problem.kspace_masked.has_axis("echo"):
        ksp = CTensor(ksp.data[0], ("kx", p1l, p2l))
        image = CTensor(image.data[0], ("kx", p1l, p2l))
    return ReconResult(ksp, image)


def recon_joint(problem: ReconProblem) -> tuple[ReconResult, ModelWeights]:
    """Train the single joint model and reconstruct every echo with it."""
    model, _ = train_eraki(problem)
    return infer(model, problem), model


def zerofill_recon(problem: ReconProblem) -> ReconResult:
    """Zero-filled baseline: combine the masked k-space with full-grid maps."""
    if problem.maps is None:
        raise ConfigError("zero-filled combination needs full-grid maps")
    x = problem.kspace_masked
    mask0 = problem.masks[0]
    p1l, p2l = mask0.axes
    fourier = tuple(a for a in ("kx", p1l, p2l) if a != "t")
    img = ifftc(x, fourier)
    if x.has_axis("echo"):
        ne = x.extent("echo")
        arr = img.transpose(("coil", "echo", "kx", p1l, p2l)).data
        combos = []
        for e in range(ne):
            ce = coil_combine(
                CTensor(arr[:, e], ("coil", "kx", p1l, p2l)), problem.maps
            )
            combos.append(ce.data)
        comb = CTensor(np.stack(combos), ("echo", "kx", p1l, p2l))
    else:
        comb = coil_combine(img, problem.maps)
    image = comb.with_data(np.abs(comb.data))
    ksp = fftc(comb, fourier)
    return ReconResult(ksp, image)
