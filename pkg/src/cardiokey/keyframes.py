"""Rule-based keyframe detection on alpha_t and cyclic frame difference scoring.

All positions live on the cycle ``[0, T)``. Zero crossings and extrema are
located with sub-frame precision first and rounded to the nearest frame
only when reported, so ordering decisions are not distorted by rounding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

KEYFRAMES = ("ED", "MS", "ES", "PF", "MD")
STATUSES = ("detected", "fallback", "missing")


@dataclass(frozen=True)
class KeyframeSet:
    indices: Dict[str, Optional[int]]
    status: Dict[str, str]
    T: Optional[int] = None

    def __post_init__(self):
        idx = {k: (None if self.indices.get(k) is None else int(self.indices[k])) for k in KEYFRAMES}
        status = {k: self.status.get(k, "detected" if idx[k] is not None else "missing") for k in KEYFRAMES}
        for k in KEYFRAMES:
            if status[k] not in STATUSES:
                raise ValueError(f"{k}: unknown status {status[k]!r}")
            if idx[k] is None and status[k] != "missing":
                raise ValueError(f"{k}: status {status[k]!r} needs an index")
            if idx[k] is not None and self.T is not None and not 0 <= idx[k] < self.T:
                raise ValueError(f"{k}: index {idx[k]} outside [0, {self.T})")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "status", status)

    def __getattr__(self, name):
        upper = name.upper()
        if upper in KEYFRAMES:
            return self.indices[upper]
        raise AttributeError(name)

    def all_detected(self) -> bool:
        return all(self.status[k] == "detected" for k in KEYFRAMES)

    def shifted(self, k: int) -> "KeyframeSet":
        if self.T is None:
            raise ValueError("shifting needs T")
        idx = {n: (None if i is None else (i + k) % self.T) for n, i in self.indices.items()}
        return KeyframeSet(idx, dict(self.status), self.T)

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "keyframes": {k: {"index": self.indices[k], "status": self.status[k]} for k in KEYFRAMES},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KeyframeSet":
        if "keyframes" not in obj:
            raise ValueError("keyframe JSON lacks 'keyframes'")
        kf = obj["keyframes"]
        indices, status = {}, {}
        for k in KEYFRAMES:
            entry = kf.get(k)
            if entry is None:
                indices[k], status[k] = None, "missing"
            elif isinstance(entry, dict):
                indices[k] = entry.get("index")
                status[k] = entry.get("status", "detected" if entry.get("index") is not None else "missing")
            else:
                indices[k], status[k] = int(entry), "detected"
        T = obj.get("T")
        return cls(indices, status, None if T is None else int(T))


def cyclic_order_ok(kf: KeyframeSet) -> bool:
    """True if MS -> ES -> PF -> MD -> ED are strictly increasing cyclic offsets from MS."""
    order = ("MS", "ES", "PF", "MD", "ED")
    if any(kf.indices[k] is None for k in order) or kf.T is None:
        return False
    ms = kf.indices["MS"]
    offs = [(kf.indices[k] - ms) % kf.T for k in order]
    return all(a < b for a, b in zip(offs, offs[1:]))


# --------------------------------------------------------------------------- events

def cyclic_derivative(alpha: np.ndarray) -> np.ndarray:
    return (np.roll(alpha, -1) - np.roll(alpha, 1)) / 2.0


def _sign_transitions(x: np.ndarray, rising: bool) -> List[float]:
    """Sub-frame positions where ``x`` changes sign (- to + if rising, + to - otherwise).

    A run of exact zeros between the two signs is located at its midpoint;
    a direct change is located by linear interpolation.
    """
    T = len(x)
    s = np.sign(x)
    if rising:
        s = -s
    # now look for + ... 0* ... -
    out = []
    for i in range(T):
        if s[i] <= 0:
            continue
        j, run = (i + 1) % T, 0
        while s[j] == 0 and run < T:
            j, run = (j + 1) % T, run + 1
        if s[j] >= 0:
            continue
        if run:
            pos = i + 1 + (run - 1) / 2.0
        else:
            xi, xj = x[i], x[(i + 1) % T]
            pos = i + xi / (xi - xj)
        out.append(pos % T)
    return out


def zero_crossings(alpha: np.ndarray, upward: bool) -> List[float]:
    return _sign_transitions(np.asarray(alpha, dtype=np.float64), rising=upward)


def local_maxima(alpha: np.ndarray) -> List[float]:
    """Local maxima as sign changes (+ to -) of the cyclic central difference."""
    return _sign_transitions(cyclic_derivative(np.asarray(alpha, dtype=np.float64)), rising=False)


def _round(pos: float, T: int) -> int:
    return int(math.floor(pos + 0.5)) % T


def _offset(pos: float, ref: float, T: int) -> float:
    return (pos - ref) % T


# --------------------------------------------------------------------------- detection

def detect_keyframes(alpha) -> KeyframeSet:
    """Detect MS, ES, PF, MD and ED on a (smoothed) motion descriptor curve.

    MS is the global minimum. Scanning forward from it: ES is the upward zero
    crossing that precedes PF, PF the first local maximum after ES, ED the
    last downward zero crossing before the cycle returns to MS, and MD the
    last local maximum strictly between PF and ED. Missing features fall back
    as documented on each branch and are flagged ``fallback``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    T = alpha.size
    if T < 5:
        raise ValueError(f"need at least 5 frames, got {T}")
    status = {}
    d1 = cyclic_derivative(alpha)

    ms = int(np.argmin(alpha))
    status["MS"] = "detected"

    ups = sorted((p for p in zero_crossings(alpha, True) if _offset(p, ms, T) > 0),
                 key=lambda p: _offset(p, ms, T))
    downs = [p for p in zero_crossings(alpha, False) if _offset(p, ms, T) > 0]
    maxima = sorted((p for p in local_maxima(alpha) if _offset(p, ms, T) > 0),
                    key=lambda p: _offset(p, ms, T))

    def frames_between(start: float, stop_off: float) -> List[int]:
        """Integer frames with offset from MS strictly inside (off(start), stop_off)."""
        lo = _offset(start, ms, T)
        return [(ms + k) % T for k in range(1, T) if lo < k < stop_off]

    # ES; at most one upward crossing precedes the first maximum that follows one
    if ups:
        es_pos = ups[0]
        status["ES"] = "detected"
    else:
        first_max = maxima[0] if maxima else ms + T
        cands = frames_between(ms, _offset(first_max, ms, T) if maxima else T) or [(ms + 1) % T]
        es_pos = float(max(cands, key=lambda f: (d1[f], -_offset(f, ms, T))))
        status["ES"] = "fallback"
    es_off = _offset(es_pos, ms, T)

    after_es = [p for p in maxima if _offset(p, ms, T) > es_off]
    if after_es:
        pf_pos = after_es[0]
        status["PF"] = "detected"
    else:
        cands = frames_between(es_pos, T) or [(ms + T - 1) % T]
        pf_pos = float(max(cands, key=lambda f: (alpha[f], -_offset(f, ms, T))))
        status["PF"] = "fallback"
    pf_off = _offset(pf_pos, ms, T)

    ed_cands = sorted((p for p in downs if _offset(p, ms, T) > pf_off), key=lambda p: _offset(p, ms, T))
    if ed_cands:
        ed_pos = ed_cands[-1]
        status["ED"] = "detected"
    else:
        cands = frames_between(pf_pos, T) or [(_round(pf_pos, T) + 1) % T]
        ed_pos = float(max(cands, key=lambda f: (alpha[f], -_offset(f, ms, T))))
        status["ED"] = "fallback"
    ed_off = _offset(ed_pos, ms, T)

    pf_idx, ed_idx = _round(pf_pos, T), _round(ed_pos, T)
    md_cands = [p for p in maxima
                if pf_off < _offset(p, ms, T) < ed_off and _round(p, T) not in (pf_idx, ed_idx)]
    if md_cands:
        md_pos = md_cands[-1]
        status["MD"] = "detected"
    else:
        md_pos = pf_pos
        status["MD"] = "fallback"

    indices = {
        "MS": ms,
        "ES": _round(es_pos, T),
        "PF": pf_idx,
        "MD": _round(md_pos, T),
        "ED": ed_idx,
    }
    # sub-frame features closer than one frame can round onto each other (or ED onto MS);
    # such a keyframe cannot be resolved in order and is flagged rather than moved
    prev = 0
    for k in ("ES", "PF", "MD", "ED"):
        off = (indices[k] - ms) % T
        if off <= prev and status[k] == "detected":
            status[k] = "fallback"
        prev = max(prev, off)
    return KeyframeSet(indices, status, T)


# --------------------------------------------------------------------------- scoring

def cfd(p: int, p_hat: int, T: int) -> int:
    """Cyclic frame difference between a reference and a predicted frame index."""
    for name, v in (("p", p), ("p_hat", p_hat)):
        if not 0 <= v < T:
            raise ValueError(f"{name}={v} outside [0, {T})")
    return min(abs(p - p_hat), T - max(p, p_hat) + min(p, p_hat))


@dataclass
class EvaluationTable:
    rows: List[dict]
    summary: Dict[str, Optional[dict]]
    pooled: Optional[dict]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "keyframe", "reference", "prediction", "cfd"])
            for r in self.rows:
                writer.writerow([r["case_id"], r["keyframe"], r["reference"], r["prediction"], r["cfd"]])
            for key, stats in list(self.summary.items()) + [("all", self.pooled)]:
                for stat in ("n", "mean", "sd"):
                    value = "absent" if stats is None else _fmt(stats[stat])
                    writer.writerow([f"__{stat}__", key, "", "", value])


def _fmt(x):
    return x if isinstance(x, int) else repr(float(x))


def _moments(values: Sequence[int]) -> Optional[dict]:
    if not values:
        return None
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return {"n": n, "mean": mean, "sd": math.sqrt(var)}


def evaluate(predictions: Sequence[KeyframeSet], references: Sequence[KeyframeSet],
             Ts: Optional[Sequence[int]] = None, case_ids: Optional[Sequence[str]] = None) -> EvaluationTable:
    """Per-case cFD rows plus per-keyframe and pooled mean/SD (population SD).

    Keyframes whose reference is ``missing`` are skipped; a keyframe no case
    provides is reported as absent (``None``).
    """
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    n = len(references)
    if Ts is None:
        Ts = [r.T if r.T is not None else p.T for p, r in zip(predictions, references)]
    if len(Ts) != n:
        raise ValueError("one T per case is required")
    if case_ids is None:
        case_ids = [str(i) for i in range(n)]
    rows = []
    per_key: Dict[str, List[int]] = {k: [] for k in KEYFRAMES}
    for cid, pred, ref, T in zip(case_ids, predictions, references, Ts):
        if T is None:
            raise ValueError(f"case {cid}: unknown sequence length")
        for k in KEYFRAMES:
            if ref.status[k] == "missing":
                continue
            if pred.indices[k] is None:
                raise ValueError(f"case {cid}: reference has {k} but prediction does not")
            value = cfd(ref.indices[k], pred.indices[k], T)
            per_key[k].append(value)
            rows.append({"case_id": cid, "keyframe": k, "reference": ref.indices[k],
                         "prediction": pred.indices[k], "cfd": value})
    summary = {k: _moments(v) for k, v in per_key.items()}
    pooled = _moments([v for k in KEYFRAMES for v in per_key[k]])
    return EvaluationTable(rows, summary, pooled)
