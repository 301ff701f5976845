"""Grids, vector fields and configuration shared across the pipeline.

Array layout conventions used everywhere in the package:

* a scalar grid has shape ``dims`` with axes ordered ``(z, y, x)`` for 3D
  and ``(y, x)`` for 2D;
* a vector grid has shape ``dims + (d,)`` whose last axis holds the
  displacement components in the same axis order, in grid-index units;
* sequences prepend a time axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

FOCUS_KINDS = ("mse", "vol", "lv", "sept", "explicit")

# Defaults per view: (target spacing in mm, T_norm percentile, T_delta_alpha).
VIEW_DEFAULTS = {
    "sax": {"target_spacing": 2.5, "t_norm_percentile": 50.0, "t_delta_alpha": 0.8},
    "fourch": {"target_spacing": 1.0, "t_norm_percentile": 50.0, "t_delta_alpha": 1.2},
}


class DegenerateMaskError(ValueError):
    """Raised when the combined motion mask retains no grid point."""

    def __init__(self, stage: str, message: str | None = None):
        self.stage = stage
        super().__init__(message or f"mask is empty after the {stage} filter")


class NumericalFailure(RuntimeError):
    """Non-finite loss encountered while optimising a registration."""

    def __init__(self, iteration: int, level: int | None = None, frame: int | None = None):
        self.iteration = iteration
        self.level = level
        self.frame = frame
        where = f"iteration {iteration}"
        if level is not None:
            where += f", pyramid level {level}"
        if frame is not None:
            where += f", frame {frame}"
        super().__init__(f"non-finite registration loss at {where}")

    def with_frame(self, frame: int) -> "NumericalFailure":
        return NumericalFailure(self.iteration, self.level, frame)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class ImageSequence:
    """T frames of scalar intensity grids sharing one physical spacing (mm per axis)."""

    frames: np.ndarray
    spacing: Tuple[float, ...]
    intensity_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        frames = _frozen(self.frames)
        if frames.ndim not in (3, 4):
            raise ValueError(f"frames must have shape (T, [z,] y, x), got {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError("an image sequence needs at least 2 frames")
        _check_finite(frames, "frames")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != frames.ndim - 1:
            raise ValueError(f"spacing {spacing} does not match {frames.ndim - 1} spatial axes")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        lo, hi = float(frames.min()), float(frames.max())
        rng = self.intensity_range
        if rng is None:
            rng = (lo, hi)
        else:
            rng = (float(rng[0]), float(rng[1]))
            _check_finite(np.asarray(rng), "intensity_range")
            if rng[0] > lo or rng[1] < hi:
                raise ValueError(f"intensity_range {rng} does not bracket data [{lo}, {hi}]")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "intensity_range", rng)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.frames.shape[1:])

    @property
    def ndim(self) -> int:
        return self.frames.ndim - 1

    @property
    def data_range(self) -> float:
        span = self.intensity_range[1] - self.intensity_range[0]
        return span if span > 0 else 1.0


@dataclass(frozen=True)
class DisplacementFieldSequence:
    """One forward displacement field per frame; field t moves tissue from frame t to t+1 (mod T)."""

    fields: np.ndarray
    spacing: Tuple[float, ...]

    def __post_init__(self):
        fields = _frozen(self.fields)
        if fields.ndim not in (4, 5) or fields.shape[-1] != fields.ndim - 2:
            raise ValueError(f"fields must have shape (T, *dims, d), got {fields.shape}")
        if fields.shape[0] < 1:
            raise ValueError("at least one field is required")
        _check_finite(fields, "fields")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != fields.shape[-1]:
            raise ValueError(f"spacing {spacing} does not match d={fields.shape[-1]}")
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "spacing", spacing)

    @property
    def T(self) -> int:
        return self.fields.shape[0]

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.fields.shape[1:-1])

    @property
    def ndim(self) -> int:
        return self.fields.shape[-1]

    def scaled(self, s: float) -> "DisplacementFieldSequence":
        return DisplacementFieldSequence(self.fields * s, self.spacing)

    def rolled(self, k: int) -> "DisplacementFieldSequence":
        """Cyclically rotate the frame axis so that frame t moves to t + k."""
        return DisplacementFieldSequence(np.roll(self.fields, k, axis=0), self.spacing)


@dataclass(frozen=True)
class FocusPoint:
    coords: Tuple[float, ...]
    kind: str = "explicit"

    def __post_init__(self):
        if self.kind not in FOCUS_KINDS:
            raise ValueError(f"unknown focus kind {self.kind!r}; expected one of {FOCUS_KINDS}")
        coords = tuple(float(c) for c in self.coords)
        _check_finite(np.asarray(coords), "focus coords")
        object.__setattr__(self, "coords", coords)

    def check_inside(self, dims: Sequence[int]) -> None:
        if len(dims) != len(self.coords):
            raise ValueError(f"focus {self.coords} has {len(self.coords)} coords for a {len(dims)}-d grid")
        for c, n in zip(self.coords, dims):
            if c < 0 or c > n - 1:
                raise ValueError(f"focus {self.coords} lies outside grid {tuple(dims)}")

    def as_dict(self) -> dict:
        return {"kind": self.kind, "coords": list(self.coords)}


@dataclass(frozen=True)
class DescriptorConfig:
    t_norm_percentile: float = 50.0
    t_delta_alpha: float = 0.8
    gaussian_sigma: float = 2.0
    focus_kind: str = "mse"
    explicit_focus: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not 0.0 <= self.t_norm_percentile <= 100.0:
            raise ValueError(f"t_norm_percentile must lie in [0, 100], got {self.t_norm_percentile}")
        if not 0.0 <= self.t_delta_alpha <= 2.0:
            raise ValueError(f"t_delta_alpha must lie in [0, 2], got {self.t_delta_alpha}")
        if not self.gaussian_sigma >= 0.0:
            raise ValueError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if self.focus_kind not in FOCUS_KINDS:
            raise ValueError(f"unknown focus_kind {self.focus_kind!r}")
        if self.focus_kind in ("lv", "sept", "explicit") and self.explicit_focus is None:
            raise ValueError(f"focus_kind {self.focus_kind!r} requires explicit_focus coordinates")
        if self.explicit_focus is not None:
            object.__setattr__(self, "explicit_focus", tuple(float(c) for c in self.explicit_focus))

    @classmethod
    def for_view(cls, view: str, **overrides) -> "DescriptorConfig":
        preset = VIEW_DEFAULTS[view]
        base = cls(t_norm_percentile=preset["t_norm_percentile"], t_delta_alpha=preset["t_delta_alpha"])
        return replace(base, **overrides)


@dataclass(frozen=True)
class RegistrationConfig:
    lambda_smooth: float = 0.001
    pyramid_levels: int = 3
    iterations_per_level: int = 100
    step_size: float = 1.0
    ssim_window: int = 7
    convergence_tol: float = 1e-5
    warm_start: bool = False
    # Gaussian preconditioner on the descent direction, in grid units; 0 disables it.
    gradient_sigma: float = 1.0
    # Gaussian pre-smoothing of both images before optimisation (grid units, in-plane); 0 disables it.
    presmooth_sigma: float = 1.0

    def __post_init__(self):
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.gradient_sigma < 0:
            raise ValueError("gradient_sigma must be >= 0")
        if self.presmooth_sigma < 0:
            raise ValueError("presmooth_sigma must be >= 0")


def trilinear_sample(grid: np.ndarray, pos) -> np.ndarray:
    """Multilinear interpolation of ``grid`` at fractional index positions.

    ``pos`` has shape ``(..., d)``; positions outside the grid are clamped to
    the border. Returns an array of shape ``pos.shape[:-1]`` (a 0-d array for
    a single position).
    """
    values, _ = _sample(np.asarray(grid, dtype=np.float64), np.asarray(pos, dtype=np.float64), False)
    return values


def sample_with_gradient(grid: np.ndarray, pos: np.ndarray):
    """Like :func:`trilinear_sample` but also returns d(value)/d(pos), shape ``(..., d)``.

    The derivative is that of the piecewise-multilinear interpolant; it is zero
    along axes where the position was clamped.
    """
    return _sample(np.asarray(grid, dtype=np.float64), np.asarray(pos, dtype=np.float64), True)


def _sample(grid, pos, want_grad):
    d = grid.ndim
    if pos.shape[-1] != d:
        raise ValueError(f"positions have {pos.shape[-1]} coords for a {d}-d grid")
    lead = pos.shape[:-1]
    p = pos.reshape(-1, d)
    npts = p.shape[0]
    flat = grid.ravel()
    strides = np.cumprod((grid.shape[1:] + (1,))[::-1])[::-1]
    # corner values gathered into shape (2,)*d + (npts,)
    offsets = np.zeros((2,) * d + (npts,), dtype=np.intp)
    fracs, inside = [], []
    for ax in range(d):
        n = grid.shape[ax]
        c = p[:, ax]
        cc = np.clip(c, 0.0, n - 1)
        i0 = np.minimum(np.floor(cc).astype(np.intp), max(n - 2, 0))
        i1 = np.minimum(i0 + 1, n - 1)
        fracs.append(cc - i0)
        inside.append((c >= 0.0) & (c <= n - 1) if n > 1 else np.zeros(npts, dtype=bool))
        shape = [1] * d + [npts]
        shape[ax] = 2
        offsets = offsets + (np.stack([i0, i1]) * strides[ax]).reshape(shape)
    corners = flat[offsets]
    values = corners
    for ax in range(d):
        f = fracs[ax]
        values = values[0] * (1.0 - f) + values[1] * f
    values = values.reshape(lead)
    if not want_grad:
        return values, None
    grads = np.empty((npts, d))
    for ax in range(d):
        g = corners
        for other in range(d):
            if other == ax:
                g = g[1] - g[0]
            else:
                f = fracs[other]
                g = g[0] * (1.0 - f) + g[1] * f
        grads[:, ax] = g * inside[ax]
    return values, grads.reshape(lead + (d,))


def identity_grid(dims: Sequence[int]) -> np.ndarray:
    """Index coordinates of every grid point, shape ``dims + (d,)``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def warp(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Pull-warp: ``out(x) = image(x + field(x))`` with clamp-to-edge sampling."""
    return trilinear_sample(image, identity_grid(image.shape) + field)


def _resample_axis(arr: np.ndarray, axis: int, n_new: int, ratio: float) -> np.ndarray:
    n = arr.shape[axis]
    pos = np.arange(n_new, dtype=np.float64) * ratio
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, max(n - 2, 0))
    frac = pos - i0
    i1 = np.minimum(i0 + 1, n - 1)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_new
    frac = frac.reshape(shape)
    # frac == 0 must return a bit-exactly
    return np.where(frac == 0.0, a, a + frac * (b - a))


def resample(seq: ImageSequence, target_spacing) -> ImageSequence:
    """Linearly resample every frame to ``target_spacing`` (scalar or per-axis, mm).

    New dims are ``round(dims * spacing / target)``; sample ``i`` of the new grid
    sits at old index ``i * target / spacing`` (origins aligned).
    """
    d = seq.ndim
    target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (d,))
    if np.any(~np.isfinite(target)) or np.any(target <= 0):
        raise ValueError(f"target spacing must be positive, got {tuple(target)}")
    out = seq.frames
    for ax in range(d):
        ratio = target[ax] / seq.spacing[ax]
        n_new = max(1, int(round(seq.dims[ax] * seq.spacing[ax] / target[ax])))
        if n_new == seq.dims[ax] and ratio == 1.0:
            continue
        out = _resample_axis(out, ax + 1, n_new, ratio)
    return ImageSequence(out, tuple(target), seq.intensity_range)
