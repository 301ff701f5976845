"""Reduction of displacement fields to the 1D motion descriptor alpha_t.

Sign convention: ``alpha = -cos(v, C - x)``, so tissue moving toward the
focus point C (contraction) gives negative values and motion away from C
(relaxation) positive ones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    DegenerateMaskError,
    DescriptorConfig,
    DisplacementFieldSequence,
    FocusPoint,
    identity_grid,
)

ZERO_MOTION = 1e-8
_ZERO_OFFSET = 1e-12


@dataclass(frozen=True)
class MotionDescriptor:
    alpha: np.ndarray
    alpha_raw: np.ndarray
    magnitude: np.ndarray
    mask: np.ndarray
    focus: FocusPoint
    config: DescriptorConfig

    def __post_init__(self):
        if not np.any(self.mask):
            raise DegenerateMaskError("combined", "descriptor mask has no active point")

    @property
    def T(self) -> int:
        return len(self.alpha)

    @property
    def magnitude_normalized(self) -> np.ndarray:
        lo, hi = self.magnitude.min(), self.magnitude.max()
        if hi - lo <= 0:
            return np.zeros_like(self.magnitude)
        return (self.magnitude - lo) / (hi - lo)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "alpha_raw", "alpha", "magnitude", "magnitude_normalized"])
            norm = self.magnitude_normalized
            for t in range(self.T):
                writer.writerow([t, repr(float(self.alpha_raw[t])), repr(float(self.alpha[t])),
                                 repr(float(self.magnitude[t])), repr(float(norm[t]))])


def direction_field(fields: DisplacementFieldSequence, focus: FocusPoint) -> np.ndarray:
    """Per-point, per-frame direction ``alpha_i(t) = -cos(phi_t(x_i), C - x_i)``.

    Returns shape ``(T, *dims)``. Points with (near) zero motion, or sitting
    exactly on the focus point, get 0.
    """
    focus.check_inside(fields.dims)
    w = np.asarray(focus.coords) - identity_grid(fields.dims)
    w_norm = np.sqrt(np.sum(w * w, axis=-1))
    v = fields.fields
    v_norm = np.sqrt(np.sum(v * v, axis=-1))
    dot = np.sum(v * w, axis=-1)
    denom = v_norm * w_norm
    valid = (v_norm >= ZERO_MOTION) & (w_norm > _ZERO_OFFSET)
    alpha = np.zeros_like(dot)
    np.divide(-dot, denom, out=alpha, where=valid)
    return np.clip(alpha, -1.0, 1.0)


def mean_magnitude(fields: DisplacementFieldSequence) -> np.ndarray:
    """Temporally averaged displacement magnitude per grid point."""
    v = fields.fields
    return np.sqrt(np.sum(v * v, axis=-1)).mean(axis=0)


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(P/100 * N)-th smallest value (the minimum for P = 0)."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = math.ceil(percentile / 100.0 * flat.size)
    return float(flat[max(rank, 1) - 1])


def magnitude_mask(fields: DisplacementFieldSequence, t_norm_percentile: float) -> np.ndarray:
    if not 0.0 <= t_norm_percentile <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {t_norm_percentile}")
    avg = mean_magnitude(fields)
    return avg >= nearest_rank(avg, t_norm_percentile)


def direction_change_mask(alpha_fields: np.ndarray, t_delta_alpha: float) -> np.ndarray:
    """Keep points whose direction swings by at least ``t_delta_alpha`` over the cycle."""
    if not 0.0 <= t_delta_alpha <= 2.0:
        raise ValueError(f"threshold must lie in [0, 2], got {t_delta_alpha}")
    alpha_fields = np.asarray(alpha_fields)
    delta = alpha_fields.max(axis=0) - alpha_fields.min(axis=0)
    return delta >= t_delta_alpha


def combined_mask(fields: DisplacementFieldSequence, focus: FocusPoint, config: DescriptorConfig,
                  alpha_fields: Optional[np.ndarray] = None) -> np.ndarray:
    if alpha_fields is None:
        alpha_fields = direction_field(fields, focus)
    m_norm = magnitude_mask(fields, config.t_norm_percentile)
    if not np.any(m_norm):
        raise DegenerateMaskError("magnitude")
    mask = m_norm & direction_change_mask(alpha_fields, config.t_delta_alpha)
    if not np.any(mask):
        raise DegenerateMaskError("direction_change")
    return mask


def gaussian_smooth_cyclic(x: np.ndarray, sigma: float) -> np.ndarray:
    """Wrap-around Gaussian smoothing, kernel truncated at +-4 sigma and renormalised.

    Every output sample is computed with the same summation order, so the
    result is exactly equivariant under cyclic shifts of the input.
    """
    x = np.asarray(x, dtype=np.float64)
    if sigma <= 0:
        return x.copy()
    radius = int(math.ceil(4.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    with np.errstate(over="ignore"):  # sigma -> 0 leaves only the centre tap
        weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    weights /= weights.sum()
    out = np.zeros_like(x)
    for k, w in zip(offsets, weights):
        out += w * np.roll(x, -k)
    return out


def _masked_mean(per_frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    sel = per_frame[:, mask]
    return sel.sum(axis=1) / sel.shape[1]


def focus_vol(dims: Sequence[int]) -> FocusPoint:
    if any(n <= 0 for n in dims):
        raise ValueError(f"dims must be positive, got {tuple(dims)}")
    return FocusPoint(tuple((n - 1) / 2.0 for n in dims), "vol")


def focus_explicit(coords, dims: Sequence[int], kind: str = "explicit") -> FocusPoint:
    if kind not in ("lv", "sept", "explicit"):
        raise ValueError(f"explicit focus kind must be lv, sept or explicit, got {kind!r}")
    fp = FocusPoint(tuple(coords), kind)
    fp.check_inside(dims)
    return fp


def center_of_mass(mask: np.ndarray) -> tuple:
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise DegenerateMaskError("combined", "cannot take the centre of mass of an empty mask")
    return tuple(float(c) for c in idx.mean(axis=0))


def focus_mse(fields: DisplacementFieldSequence, config: DescriptorConfig) -> FocusPoint:
    """Centre of mass of the motion mask, bootstrapped from the volume centre.

    The mask depends on the focus point through the direction-change filter;
    the loop is closed with exactly one refinement pass.
    """
    focus = focus_vol(fields.dims)
    for _ in range(2):
        mask = combined_mask(fields, focus, config)
        focus = FocusPoint(center_of_mass(mask), "mse")
    return focus


def resolve_focus(fields: DisplacementFieldSequence, config: DescriptorConfig) -> FocusPoint:
    kind = config.focus_kind
    if kind == "vol":
        return focus_vol(fields.dims)
    if kind == "mse":
        return focus_mse(fields, config)
    return focus_explicit(config.explicit_focus, fields.dims, kind)


def compute_descriptor(fields: DisplacementFieldSequence, config: DescriptorConfig = DescriptorConfig(),
                       focus: Optional[FocusPoint] = None) -> MotionDescriptor:
    """Masked-mean direction curve alpha_t plus the masked magnitude curve.

    ``focus`` overrides the focus selected by ``config.focus_kind``.
    """
    if fields.T < 1:
        raise ValueError("no fields given")
    if focus is None:
        focus = resolve_focus(fields, config)
    alpha_fields = direction_field(fields, focus)
    mask = combined_mask(fields, focus, config, alpha_fields)
    alpha_raw = _masked_mean(alpha_fields, mask)
    v = fields.fields
    magnitude = _masked_mean(np.sqrt(np.sum(v * v, axis=-1)), mask)
    alpha = np.clip(gaussian_smooth_cyclic(alpha_raw, config.gaussian_sigma), -1.0, 1.0)
    return MotionDescriptor(
        alpha=alpha,
        alpha_raw=alpha_raw,
        magnitude=magnitude,
        mask=mask,
        focus=focus,
        config=config,
    )
