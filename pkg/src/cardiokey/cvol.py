"""Reader/writer for the ``cvol`` volume directory format.

A cvol is a directory holding ``header.json`` and ``data.raw``. The header
carries ``dims`` as ``[t, (z,) y, x]``, ``spacing_mm`` per spatial axis,
``dtype`` (always ``"f32le"``) and ``order``. ``data.raw`` holds
little-endian float32 values, t-major, then z, y, x.

Vector fields and masks reuse the format: a field adds ``"components": d``
and stores the component as the fastest axis; a mask is stored with t = 1.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import DisplacementFieldSequence, ImageSequence

DTYPE = "f32le"
ORDER = "t-major, then z, y, x"
FIELD_ORDER = "t-major, then z, y, x, component"


class CvolFormatError(ValueError):
    """Malformed cvol header or payload; ``key`` names the offending header field."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"cvol header field {key!r}: {message}")


def _write(path, array: np.ndarray, spacing, order: str, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": [int(n) for n in array.shape[: 1 + len(spacing)]],
        "spacing_mm": [float(s) for s in spacing],
        "dtype": DTYPE,
        "order": order,
    }
    if extra:
        header.update(extra)
    (path / "header.json").write_text(json.dumps(header, indent=2) + "\n")
    np.ascontiguousarray(array, dtype="<f4").tofile(path / "data.raw")
    return path


def read_header(path) -> dict:
    path = Path(path)
    hfile = path / "header.json"
    if not hfile.is_file():
        raise CvolFormatError("header.json", f"missing in {path}")
    try:
        header = json.loads(hfile.read_text())
    except json.JSONDecodeError as exc:
        raise CvolFormatError("header.json", f"not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise CvolFormatError("header.json", "top level must be an object")
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in header:
            raise CvolFormatError(key, "missing")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) not in (3, 4)
            or not all(isinstance(n, int) and n > 0 for n in dims)):
        raise CvolFormatError("dims", f"expected [t, (z,) y, x] positive ints, got {dims!r}")
    spacing = header["spacing_mm"]
    if (not isinstance(spacing, list) or len(spacing) != len(dims) - 1
            or not all(isinstance(s, (int, float)) and s > 0 for s in spacing)):
        raise CvolFormatError("spacing_mm", f"expected {len(dims) - 1} positive numbers, got {spacing!r}")
    if header["dtype"] != DTYPE:
        raise CvolFormatError("dtype", f"only {DTYPE!r} is supported, got {header['dtype']!r}")
    comps = header.get("components")
    if comps is not None and comps != len(dims) - 1:
        raise CvolFormatError("components", f"expected {len(dims) - 1}, got {comps!r}")
    return header


def _read_array(path, header: dict) -> np.ndarray:
    path = Path(path)
    shape = list(header["dims"])
    if header.get("components") is not None:
        shape.append(header["components"])
    raw = path / "data.raw"
    if not raw.is_file():
        raise CvolFormatError("data.raw", f"missing in {path}")
    data = np.fromfile(raw, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise CvolFormatError("dims", f"expects {int(np.prod(shape))} values, data.raw holds {data.size}")
    return data.reshape(shape).astype(np.float64)


def write_sequence(path, seq: ImageSequence) -> Path:
    return _write(path, seq.frames, seq.spacing, ORDER)


def read_sequence(path) -> ImageSequence:
    header = read_header(path)
    if header.get("components") is not None:
        raise CvolFormatError("components", "expected an image sequence, found a vector field")
    frames = _read_array(path, header)
    if frames.shape[0] < 2:
        raise CvolFormatError("dims", "an image sequence needs t >= 2")
    return ImageSequence(frames, tuple(header["spacing_mm"]))


def write_fields(path, fields: DisplacementFieldSequence) -> Path:
    return _write(path, fields.fields, fields.spacing, FIELD_ORDER, {"components": fields.ndim})


def read_fields(path) -> DisplacementFieldSequence:
    header = read_header(path)
    if header.get("components") is None:
        raise CvolFormatError("components", "missing; not a vector-field cvol")
    return DisplacementFieldSequence(_read_array(path, header), tuple(header["spacing_mm"]))


def write_mask(path, mask: np.ndarray, spacing) -> Path:
    return _write(path, np.asarray(mask, dtype=np.float64)[None], spacing, ORDER)


def read_mask(path) -> np.ndarray:
    header = read_header(path)
    arr = _read_array(path, header)
    return arr[0] > 0.5
