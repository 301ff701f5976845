"""Synthetic contracting/relaxing ring phantoms with analytic motion and keyframes.

The phantom is a textured annulus around ``center``. Per frame it moves
radially by the schedule value a(t) (negative = toward the centre) and
twists by a constant angle, so that the direction of motion relative to the
centre, ``a / sqrt(a^2 + twist^2)``, is a monotone function of a(t). The
angular texture has ``texture_folds``-fold symmetry and one cycle rotates it
by whole texture periods, which makes the sequence exactly cyclic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .core import DisplacementFieldSequence, ImageSequence, identity_grid
from .keyframes import KEYFRAMES, KeyframeSet

PROFILES = ("normal", "no_md_peak", "weak_relaxation")

# (centre in cycle fraction, von Mises concentration, relative height) per diastolic bump
_DIASTOLE = {
    "normal": [(0.46, 14.0, 1.0), (0.76, 14.0, 0.75)],
    "no_md_peak": [(0.52, 6.0, 1.0)],
    "weak_relaxation": [(0.48, 10.0, 0.45), (0.76, 10.0, 0.35)],
}
_SYSTOLE = (0.2, 12.0)


def _bump(u: np.ndarray, centre: float, kappa: float) -> np.ndarray:
    return np.exp(kappa * (np.cos(2.0 * np.pi * (u - centre)) - 1.0))


def default_schedule(T: int, profile: str = "normal", stroke: float = 5.0) -> np.ndarray:
    """Signed radial motion per frame (grid units), one systolic trough then diastole.

    ``stroke`` is the total inward travel during systole. The schedule sums to
    zero over the cycle so the ring returns to its starting radius.
    """
    if T < 10:
        raise ValueError(f"T must be >= 10, got {T}")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    u = np.arange(T) / T
    sys_shape = _bump(u, *_SYSTOLE)
    dia_shape = sum(h * _bump(u, c, k) for c, k, h in _DIASTOLE[profile])
    # balance the two parts exactly so the cycle closes
    sched = dia_shape / dia_shape.sum() - sys_shape / sys_shape.sum()
    negative = -sched[sched < 0].sum()
    return sched * (stroke / negative)


def _transitions(a: np.ndarray, rising: bool):
    """(i, position) pairs for cyclic sign changes of ``a``; plain loop, no zero runs assumed."""
    T = len(a)
    out = []
    for i in range(T):
        x0, x1 = a[i], a[(i + 1) % T]
        if (rising and x0 < 0 <= x1) or (not rising and x0 >= 0 > x1):
            out.append((i + x0 / (x0 - x1)) % T)
    return out


def _peaks(a: np.ndarray):
    T = len(a)
    return [t for t in range(T) if a[t] > a[t - 1] and a[t] >= a[(t + 1) % T]]


def truth_keyframes(schedule: np.ndarray) -> KeyframeSet:
    """Reference keyframes read directly off the sampled schedule.

    MS is the deepest contraction, ES / ED the negative-to-positive /
    positive-to-negative sign changes (nearest frame), PF the diastolic
    maximum and MD the later secondary peak; without one MD coincides with PF.
    """
    a = np.asarray(schedule, dtype=np.float64)
    T = len(a)
    if not np.any(a):
        # static phantom: nothing to detect
        return KeyframeSet({}, {k: "missing" for k in KEYFRAMES}, T)
    ms = int(np.argmin(a))
    ups = _transitions(a, True)
    downs = _transitions(a, False)
    if len(ups) != 1 or len(downs) != 1:
        raise ValueError("schedule must have exactly one negative run")
    es_pos, ed_pos = ups[0], downs[0]
    es = int(math.floor(es_pos + 0.5)) % T
    ed = int(math.floor(ed_pos + 0.5)) % T
    # frames of the positive run, in time order
    start = int(math.ceil(es_pos)) % T
    run = [(start + k) % T for k in range(T) if (start + k) % T != ed and a[(start + k) % T] >= 0
           and ((start + k - es_pos) % T) < ((ed_pos - es_pos) % T)]
    pf = max(run, key=lambda t: a[t])
    peaks = [t for t in _peaks(a) if t in run]
    later = [t for t in peaks if ((t - pf) % T) > 0 and ((t - pf) % T) < ((ed - pf) % T)]
    status = {k: "detected" for k in KEYFRAMES}
    if later:
        md = later[-1]
    else:
        md = pf
        status["MD"] = "fallback"
    return KeyframeSet({"MS": ms, "ES": es, "PF": pf, "MD": md, "ED": ed}, status, T)


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, ...] = (64, 64)
    T: int = 30
    profile: str = "normal"
    center: Optional[Tuple[float, ...]] = None
    ring_radius: Optional[float] = None
    ring_width: Optional[float] = None
    stroke: Optional[float] = None
    noise_sigma: float = 0.0
    texture_folds: int = 8
    twist_turns: int = 1
    seed: int = 0
    spacing: Optional[Tuple[float, ...]] = None
    schedule: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3) or any(n < 4 for n in dims):
            raise ValueError(f"dims must be 2 or 3 axes of at least 4 points, got {dims}")
        if self.T < 10:
            raise ValueError(f"T must be >= 10, got {self.T}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "dims", dims)
        plane = min(dims[-2:])
        if self.center is None:
            object.__setattr__(self, "center", tuple((n - 1) / 2.0 for n in dims))
        if len(self.center) != len(dims):
            raise ValueError("center must have one coordinate per axis")
        if self.ring_radius is None:
            object.__setattr__(self, "ring_radius", plane / 4.0)
        if self.ring_width is None:
            object.__setattr__(self, "ring_width", max(2.0, 0.15 * self.ring_radius))
        if self.stroke is None:
            object.__setattr__(self, "stroke", 0.3 * self.ring_radius)
        if self.spacing is None:
            object.__setattr__(self, "spacing", (1.0,) * len(dims))
        if self.schedule is None:
            object.__setattr__(self, "schedule", tuple(default_schedule(self.T, self.profile, self.stroke)))
        if len(self.schedule) != self.T:
            raise ValueError("schedule length must equal T")
        if self.stroke >= self.ring_radius - self.ring_width and np.any(np.asarray(self.schedule) < 0):
            raise ValueError("stroke would collapse the ring onto its centre")

    @property
    def twist_angle(self) -> float:
        """Rotation per frame in radians."""
        return self.twist_turns * 2.0 * math.pi / (self.texture_folds * self.T)

    @property
    def truth_keyframes(self) -> KeyframeSet:
        return truth_keyframes(np.asarray(self.schedule))

    def radii(self) -> np.ndarray:
        a = np.asarray(self.schedule)
        return self.ring_radius + np.concatenate([[0.0], np.cumsum(a)[:-1]])


def jittered_spec(seed: int, dims=(64, 64), T: int = 30, profile: str = "normal",
                  noise_sigma: float = 0.0, **kw) -> PhantomSpec:
    """Phantom whose centre and ring radius are drawn from ``seed``; noise uses the same seed."""
    rng = np.random.default_rng(seed)
    dims = tuple(dims)
    plane = min(dims[-2:])
    centre = [(n - 1) / 2.0 for n in dims]
    centre[-2] += rng.uniform(-0.06, 0.06) * plane
    centre[-1] += rng.uniform(-0.06, 0.06) * plane
    radius = rng.uniform(0.22, 0.28) * plane
    return PhantomSpec(dims=dims, T=T, profile=profile, center=tuple(centre), ring_radius=radius,
                       noise_sigma=noise_sigma, seed=seed, **kw)


def _polar(spec: PhantomSpec):
    grid = identity_grid(spec.dims)
    c = np.asarray(spec.center)
    dy = grid[..., -2] - c[-2]
    dx = grid[..., -1] - c[-1]
    return np.hypot(dy, dx), np.arctan2(dy, dx)


def _support(rho: np.ndarray, width: float) -> np.ndarray:
    """1 within 1.5 widths of the ring centre line, cosine taper to 0 over one more width."""
    inner = 1.5 * width
    s = np.clip((np.abs(rho) - inner) / width, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * s))


def render_frame(spec: PhantomSpec, t: int, r=None, theta=None) -> np.ndarray:
    if r is None:
        r, theta = _polar(spec)
    radius = spec.radii()[t]
    rho = r - radius
    sigma = spec.ring_width / 2.0
    profile = np.exp(-0.5 * (rho / sigma) ** 2)
    texture = 0.7 + 0.3 * np.cos(spec.texture_folds * (theta - t * spec.twist_angle))
    img = profile * texture
    if len(spec.dims) == 3:
        nz = spec.dims[0]
        z = np.arange(nz, dtype=np.float64)
        taper = 0.75 + 0.25 * np.cos(np.pi * (z - (nz - 1) / 2.0) / max(nz - 1, 1))
        img = img * taper[:, None, None]
    return img


def analytic_field(spec: PhantomSpec, t: int, r=None, theta=None) -> np.ndarray:
    """Forward motion of tissue from frame t to t+1: radial a(t) plus linearised twist."""
    if r is None:
        r, theta = _polar(spec)
    a = spec.schedule[t]
    rho = r - spec.radii()[t]
    w = _support(rho, spec.ring_width)
    radial = a * w
    tangential = r * spec.twist_angle * w
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    d = len(spec.dims)
    out = np.zeros(spec.dims + (d,))
    # (y, x) components of radial and tangential unit vectors
    out[..., -2] = radial * sin_t + tangential * cos_t
    out[..., -1] = radial * cos_t - tangential * sin_t
    return out


def generate(spec: PhantomSpec):
    """Render ``(ImageSequence, DisplacementFieldSequence, KeyframeSet)`` for a phantom."""
    r, theta = _polar(spec)
    frames = np.stack([render_frame(spec, t, r, theta) for t in range(spec.T)])
    fields = np.stack([analytic_field(spec, t, r, theta) for t in range(spec.T)])
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        frames = frames + rng.normal(0.0, spec.noise_sigma, frames.shape)
    seq = ImageSequence(frames, spec.spacing)
    return seq, DisplacementFieldSequence(fields, spec.spacing), spec.truth_keyframes


def truth_json(spec: PhantomSpec) -> dict:
    kf = spec.truth_keyframes
    out = kf.to_json()
    out.update({
        "profile": spec.profile,
        "schedule": [float(x) for x in spec.schedule],
        "center": list(spec.center),
        "md_coincides_with_pf": kf.indices["MD"] is not None and kf.indices["MD"] == kf.indices["PF"],
        "seed": spec.seed,
        "noise_sigma": spec.noise_sigma,
    })
    return out
