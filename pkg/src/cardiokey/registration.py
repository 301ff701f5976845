"""Sequential dense registration by direct minimisation of ``1 - SSIM + lambda * diffusion``.

The learned registration network is replaced by a coarse-to-fine gradient
descent on the displacement field itself. Gradients are analytic: the SSIM
term is differentiated through the box-window statistics and the
multilinear warp, the diffusion term through its forward differences.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .core import (
    DisplacementFieldSequence,
    ImageSequence,
    NumericalFailure,
    RegistrationConfig,
    identity_grid,
    sample_with_gradient,
    trilinear_sample,
)

log = logging.getLogger(__name__)

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 12
MIN_Z_FOR_DOWNSAMPLING = 8


@dataclass(frozen=True)
class RegistrationResult:
    field: np.ndarray
    final_loss: float
    loss_trace: np.ndarray
    trace_levels: np.ndarray
    moved: np.ndarray

    @property
    def accepted_steps(self) -> int:
        return int(len(self.loss_trace) - len(np.unique(self.trace_levels)))


# --------------------------------------------------------------------------- SSIM

def _box(x: np.ndarray, window: int) -> np.ndarray:
    size = (1,) * (x.ndim - 2) + (window, window)
    return uniform_filter(x, size=size, mode="constant")


def _valid(shape, window: int):
    h = window // 2
    lead = (slice(None),) * (len(shape) - 2)
    return lead + (slice(h, shape[-2] - h), slice(h, shape[-1] - h))


def _check_pair(a: np.ndarray, b: np.ndarray, window: int, data_range: float):
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ValueError(f"expected a 2D or 3D grid, got {a.ndim}D")
    if not data_range > 0:
        raise ValueError(f"range must be > 0, got {data_range}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"in-plane dims {a.shape[-2:]} smaller than SSIM window {window}")


def _ssim_terms(a, b, window, data_range, b_stats=None):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    crop = _valid(a.shape, window)
    lead = (slice(None),) + crop
    if b_stats is None:
        ma, qaa, qab, mb, qbb = _box(np.stack([a, a * a, a * b, b, b * b]), window)[lead]
    else:
        ma, qaa, qab = _box(np.stack([a, a * a, a * b]), window)[lead]
        mb, qbb = b_stats
    num1 = 2.0 * ma * mb + c1
    num2 = 2.0 * (qab - ma * mb) + c2
    den1 = ma * ma + mb * mb + c1
    den2 = (qaa - ma * ma) + (qbb - mb * mb) + c2
    smap = (num1 * num2) / (den1 * den2)
    return smap, (ma, mb, num1, num2, den1, den2, crop)


def _fixed_stats(b, window):
    crop = _valid(b.shape, window)
    mb, qbb = _box(np.stack([b, b * b]), window)[(slice(None),) + crop]
    return mb, qbb


def ssim(a, b, window: int = 7, data_range: Optional[float] = None) -> float:
    """Mean SSIM over all valid box-window positions.

    3D grids are treated as stacks of 2D slices along the first axis and the
    slice SSIMs are averaged. ``data_range`` defaults to the joint span of
    both images (1 when both are constant).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if data_range is None:
        data_range = _joint_range(a, b)
    _check_pair(a, b, window, data_range)
    smap, _ = _ssim_terms(a, b, window, data_range)
    return float(smap.mean())


def ssim_and_gradient(a: np.ndarray, b: np.ndarray, window: int, data_range: float, b_stats=None):
    """Return ``(ssim(a, b), d ssim / d a)``; the gradient has the shape of ``a``."""
    _check_pair(a, b, window, data_range)
    smap, (ma, mb, num1, num2, den1, den2, crop) = _ssim_terms(a, b, window, data_range, b_stats)
    n = smap.size
    inv = 1.0 / (den1 * den2)
    # partials of each window's SSIM w.r.t. box(a), box(a*a), box(a*b)
    d_ma = (2.0 * mb * num2 * inv - 2.0 * mb * num1 * inv
            - smap * 2.0 * ma / den1 + smap * 2.0 * ma / den2)
    d_qaa = -smap / den2
    d_qab = 2.0 * num1 * inv
    full = np.zeros((3,) + a.shape)
    full[(0,) + crop] = d_ma / n
    full[(1,) + crop] = d_qaa / n
    full[(2,) + crop] = d_qab / n
    # the zero-padded box filter is self-adjoint
    back = _box(full, window)
    grad = back[0] + 2.0 * a * back[1] + b * back[2]
    return float(smap.mean()), grad


def _joint_range(a, b) -> float:
    span = float(max(a.max(), b.max()) - min(a.min(), b.min()))
    return span if span > 0 else 1.0


# --------------------------------------------------------------------------- diffusion

def smoothness(field) -> float:
    """Diffusion energy: sum over grid points of the squared Frobenius norm of the Jacobian.

    Forward differences; the last difference along each axis is replicated
    onto the boundary row so every grid point carries a gradient.
    """
    value, _ = smoothness_and_gradient(np.asarray(field, dtype=np.float64), want_grad=False)
    return value


def smoothness_and_gradient(field: np.ndarray, want_grad: bool = True):
    d = field.ndim - 1
    total = 0.0
    grad = np.zeros_like(field) if want_grad else None
    for ax in range(d):
        if field.shape[ax] < 2:
            continue
        diff = np.diff(field, axis=ax)
        last = np.take(diff, [-1], axis=ax)
        total += float(np.sum(diff * diff)) + float(np.sum(last * last))
        if want_grad:
            g = 2.0 * diff
            tail = [slice(None)] * field.ndim
            tail[ax] = slice(-1, None)
            g[tuple(tail)] *= 2.0
            hi = [slice(None)] * field.ndim
            lo = [slice(None)] * field.ndim
            hi[ax] = slice(1, None)
            lo[ax] = slice(None, -1)
            grad[tuple(hi)] += g
            grad[tuple(lo)] -= g
    return total, grad


# --------------------------------------------------------------------------- objective

class _Objective:
    """Registration loss for one (moving, fixed) pair at one pyramid level."""

    def __init__(self, moving, fixed, lam, window, data_range):
        self.moving = moving
        self.fixed = fixed
        self.lam = lam
        self.window = window
        self.data_range = data_range
        self.base = identity_grid(moving.shape)
        _check_pair(moving, fixed, window, data_range)
        self.fixed_stats = _fixed_stats(fixed, window)

    def loss(self, phi: np.ndarray) -> float:
        moved = trilinear_sample(self.moving, self.base + phi)
        smap, _ = _ssim_terms(moved, self.fixed, self.window, self.data_range, self.fixed_stats)
        s = float(smap.mean())
        return 1.0 - s + self.lam * smoothness_and_gradient(phi, want_grad=False)[0]

    def loss_and_grad(self, phi: np.ndarray):
        moved, dmoved = sample_with_gradient(self.moving, self.base + phi)
        s, ds = ssim_and_gradient(moved, self.fixed, self.window, self.data_range, self.fixed_stats)
        r, dr = smoothness_and_gradient(phi)
        loss = 1.0 - s + self.lam * r
        grad = -ds[..., None] * dmoved + self.lam * dr
        return loss, grad


# --------------------------------------------------------------------------- pyramid

def _pool_factors(shape, window: int) -> tuple:
    factors = []
    for ax, n in enumerate(shape):
        if ax >= len(shape) - 2:
            ok = (n + 1) // 2 >= window
        else:
            ok = n >= MIN_Z_FOR_DOWNSAMPLING
        factors.append(2 if ok else 1)
    return tuple(factors)


def _pool(arr: np.ndarray, factors: Sequence[int]) -> np.ndarray:
    """Block-average spatial axes by their factor (edge-padded for odd sizes)."""
    out = arr
    for ax, f in enumerate(factors):
        if f == 1:
            continue
        n = out.shape[ax]
        if n % 2:
            out = np.concatenate([out, np.take(out, [-1], axis=ax)], axis=ax)
        shape = out.shape[:ax] + (out.shape[ax] // 2, 2) + out.shape[ax + 1:]
        out = out.reshape(shape).mean(axis=ax + 1)
    return out


def _upsample_field(field: np.ndarray, factors: Sequence[int], fine_shape) -> np.ndarray:
    d = len(fine_shape)
    pos = identity_grid(fine_shape)
    scale = np.ones(d)
    for ax, f in enumerate(factors):
        if f == 2:
            pos[..., ax] = (pos[..., ax] - 0.5) / 2.0
            scale[ax] = 2.0
    out = np.empty(tuple(fine_shape) + (d,))
    for k in range(d):
        out[..., k] = trilinear_sample(field[..., k], pos) * scale[k]
    return out


def _downsample_field(field: np.ndarray, factors: Sequence[int]) -> np.ndarray:
    pooled = _pool(field, tuple(factors) + (1,))
    return pooled / np.asarray(factors, dtype=np.float64)


def _build_pyramid(moving, fixed, levels: int, window: int):
    pyramid = [(moving, fixed, None)]
    for _ in range(levels - 1):
        m, f, _ = pyramid[-1]
        factors = _pool_factors(m.shape, window)
        if all(x == 1 for x in factors):
            break
        pyramid[-1] = (m, f, factors)
        pyramid.append((_pool(m, factors), _pool(f, factors), None))
    # each entry: (moving, fixed, factors linking it to the next coarser level)
    return pyramid


# --------------------------------------------------------------------------- solver

def _descend(obj: _Objective, phi: np.ndarray, cfg: RegistrationConfig, level: int, trace, levels_out):
    loss, grad = obj.loss_and_grad(phi)
    if not np.isfinite(loss):
        raise NumericalFailure(0, level)
    trace.append(loss)
    levels_out.append(level)
    step = cfg.step_size
    spatial_sigma = (cfg.gradient_sigma,) * (phi.ndim - 1) + (0.0,)
    for it in range(1, cfg.iterations_per_level + 1):
        if cfg.gradient_sigma > 0:
            direction = -gaussian_filter(grad, spatial_sigma, mode="nearest", truncate=3.0)
        else:
            direction = -grad
        slope = float(np.sum(grad * direction))
        if not slope < 0:
            direction = -grad
            slope = float(np.sum(grad * direction))
        peak = float(np.max(np.abs(direction)))
        if peak == 0.0 or slope == 0.0:
            break
        direction /= peak
        slope /= peak
        accepted = False
        trial_grad = None
        for attempt in range(MAX_BACKTRACKS):
            trial = phi + step * direction
            if attempt == 0:
                trial_loss, trial_grad = obj.loss_and_grad(trial)
            else:
                trial_loss, trial_grad = obj.loss(trial), None
            if not np.isfinite(trial_loss):
                raise NumericalFailure(it, level)
            if trial_loss <= loss + ARMIJO_C1 * step * slope and trial_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rel = (loss - trial_loss) / max(abs(loss), 1e-12)
        phi = trial
        if trial_grad is None:
            trial_loss, trial_grad = obj.loss_and_grad(phi)
        loss, grad = trial_loss, trial_grad
        trace.append(loss)
        levels_out.append(level)
        if rel < cfg.convergence_tol:
            break
        if attempt == 0:
            step = min(2.0 * step, cfg.step_size)
    return phi, loss


def register_pair(moving, fixed, cfg: RegistrationConfig = RegistrationConfig(),
                  init: Optional[np.ndarray] = None, data_range: Optional[float] = None) -> RegistrationResult:
    """Find ``phi`` minimising ``1 - SSIM(moving(x + phi(x)), fixed) + lambda * smoothness(phi)``.

    Pull semantics: the returned ``moved`` image is ``moving`` sampled at
    ``x + phi(x)`` and approximates ``fixed``.
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape:
        raise ValueError(f"moving {moving.shape} and fixed {fixed.shape} dims differ")
    d = moving.ndim
    if data_range is None:
        data_range = _joint_range(moving, fixed)
    if init is not None:
        init = np.asarray(init, dtype=np.float64)
        if init.shape != moving.shape + (d,):
            raise ValueError(f"init field shape {init.shape} does not match {moving.shape + (d,)}")

    if cfg.presmooth_sigma > 0:
        sig = (0.0,) * (d - 2) + (cfg.presmooth_sigma,) * 2
        src_m = gaussian_filter(moving, sig, mode="nearest")
        src_f = gaussian_filter(fixed, sig, mode="nearest")
    else:
        src_m, src_f = moving, fixed
    pyramid = _build_pyramid(src_m, src_f, cfg.pyramid_levels, cfg.ssim_window)
    n_levels = len(pyramid)

    # coarse initial field from init
    if init is None:
        phi = np.zeros(pyramid[-1][0].shape + (d,))
    else:
        phi = init
        for lvl in range(n_levels - 1):
            phi = _downsample_field(phi, pyramid[lvl][2])

    trace: List[float] = []
    levels_out: List[int] = []
    loss = np.nan
    for lvl in range(n_levels - 1, -1, -1):
        m, f, _ = pyramid[lvl]
        if lvl < n_levels - 1:
            phi = _upsample_field(phi, pyramid[lvl][2], m.shape)
        obj = _Objective(m, f, cfg.lambda_smooth, cfg.ssim_window, data_range)
        phi, loss = _descend(obj, phi, cfg, lvl, trace, levels_out)
        log.debug("level %d: loss %.6g after %d evaluations", lvl, loss, len(trace))

    moved = trilinear_sample(moving, identity_grid(moving.shape) + phi)
    return RegistrationResult(
        field=phi,
        final_loss=float(loss),
        loss_trace=np.asarray(trace),
        trace_levels=np.asarray(levels_out, dtype=int),
        moved=moved,
    )


def register_sequence_detailed(seq: ImageSequence, cfg: RegistrationConfig = RegistrationConfig(),
                               threads: int = 1):
    """Register every consecutive pair of the cycle; returns ``(fields, results)``.

    Field t is the forward tissue motion from frame t to frame t+1 (mod T):
    frame t+1 is pulled back onto frame t, so ``I[t+1](x + phi_t(x)) ~ I[t](x)``.
    """
    T = seq.T
    frames = seq.frames
    data_range = seq.data_range

    def one(t, init=None):
        try:
            return register_pair(frames[(t + 1) % T], frames[t], cfg, init=init, data_range=data_range)
        except NumericalFailure as exc:
            raise exc.with_frame(t) from None

    results: List[RegistrationResult] = []
    if cfg.warm_start:
        prev = None
        for t in range(T):
            res = one(t, prev)
            results.append(res)
            prev = res.field
    elif threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(T)))
    else:
        results = [one(t) for t in range(T)]
    fields = DisplacementFieldSequence(np.stack([r.field for r in results]), seq.spacing)
    return fields, results


def register_sequence(seq: ImageSequence, cfg: RegistrationConfig = RegistrationConfig(),
                      threads: int = 1) -> DisplacementFieldSequence:
    return register_sequence_detailed(seq, cfg, threads)[0]


def write_loss_traces(path, results: Sequence[RegistrationResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "iteration", "level", "loss"])
        for frame, res in enumerate(results):
            counters = {}
            for lvl, loss in zip(res.trace_levels, res.loss_trace):
                it = counters.get(int(lvl), 0)
                counters[int(lvl)] = it + 1
                writer.writerow([frame, it, int(lvl), repr(float(loss))])
