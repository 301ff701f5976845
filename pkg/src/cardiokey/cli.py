"""Command-line entry points: ``cardiokey {detect,register,describe,evaluate,phantom}``.

Configuration precedence is flags > ``--config`` JSON file > view preset.
The effective configuration is echoed into every JSON output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields as dc_fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import cvol
from .core import (
    VIEW_DEFAULTS,
    DegenerateMaskError,
    DescriptorConfig,
    DisplacementFieldSequence,
    NumericalFailure,
    RegistrationConfig,
    resample,
)
from .descriptor import compute_descriptor
from .keyframes import KeyframeSet, detect_keyframes, evaluate
from .phantom import PROFILES, PhantomSpec, generate, truth_json
from .registration import register_sequence_detailed, write_loss_traces

log = logging.getLogger("cardiokey")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    view: str = "sax"
    target_spacing: float = 2.5
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    seed: int = 0

    @classmethod
    def for_view(cls, view: str) -> "RunConfig":
        if view not in VIEW_DEFAULTS:
            raise ConfigError(f"view: unknown view {view!r}; expected one of {sorted(VIEW_DEFAULTS)}")
        preset = VIEW_DEFAULTS[view]
        return cls(view=view, target_spacing=preset["target_spacing"],
                   descriptor=DescriptorConfig.for_view(view))

    def to_json(self) -> dict:
        out = asdict(self)
        if out["descriptor"]["explicit_focus"] is not None:
            out["descriptor"]["explicit_focus"] = list(out["descriptor"]["explicit_focus"])
        return out


def _apply_section(obj, section: dict, prefix: str):
    known = {f.name for f in dc_fields(obj)}
    for key in section:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}: unknown configuration key")
    try:
        return replace(obj, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    allowed = {"view", "target_spacing", "registration", "descriptor", "seed"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown configuration key")
    return data


def parse_focus(text: str, ndim: Optional[int] = None):
    """``mse`` | ``vol`` | ``explicit:X,Y[,Z]`` (also ``lv:`` / ``sept:``) -> (kind, coords in array order)."""
    if text in ("mse", "vol"):
        return text, None
    kind, sep, rest = text.partition(":")
    if not sep or kind not in ("explicit", "lv", "sept"):
        raise ConfigError(f"focus: cannot parse {text!r}")
    try:
        xyz = [float(v) for v in rest.split(",")]
    except ValueError:
        raise ConfigError(f"focus: bad coordinates in {text!r}") from None
    if len(xyz) not in (2, 3) or (ndim is not None and len(xyz) != ndim):
        raise ConfigError(f"focus: expected {ndim or '2 or 3'} coordinates, got {len(xyz)}")
    # flags give x, y[, z]; arrays are ordered [z,] y, x
    return kind, tuple(reversed(xyz))


def build_config(args, ndim: int) -> RunConfig:
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    view = getattr(args, "view", None) or file_cfg.get("view") or ("sax" if ndim == 3 else "fourch")
    cfg = RunConfig.for_view(view)
    if "target_spacing" in file_cfg:
        cfg = replace(cfg, target_spacing=float(file_cfg["target_spacing"]))
    if "seed" in file_cfg:
        cfg = replace(cfg, seed=int(file_cfg["seed"]))
    if "registration" in file_cfg:
        cfg = replace(cfg, registration=_apply_section(cfg.registration, file_cfg["registration"], "registration"))
    if "descriptor" in file_cfg:
        section = dict(file_cfg["descriptor"])
        if section.get("explicit_focus") is not None:
            section["explicit_focus"] = tuple(section["explicit_focus"])
        cfg = replace(cfg, descriptor=_apply_section(cfg.descriptor, section, "descriptor"))

    desc = {}
    if getattr(args, "t_norm", None) is not None:
        desc["t_norm_percentile"] = args.t_norm
    if getattr(args, "t_delta_alpha", None) is not None:
        desc["t_delta_alpha"] = args.t_delta_alpha
    if getattr(args, "sigma", None) is not None:
        desc["gaussian_sigma"] = args.sigma
    if getattr(args, "focus", None) is not None:
        kind, coords = parse_focus(args.focus, ndim)
        desc["focus_kind"] = kind
        desc["explicit_focus"] = coords
    if desc:
        cfg = replace(cfg, descriptor=_apply_section(cfg.descriptor, desc, "descriptor"))
    reg = {}
    if getattr(args, "lam", None) is not None:
        reg["lambda_smooth"] = args.lam
    if reg:
        cfg = replace(cfg, registration=_apply_section(cfg.registration, reg, "registration"))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if not cfg.target_spacing > 0:
        raise ConfigError("target_spacing: must be positive")
    return cfg


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- commands

def _load_resampled(path, cfg: RunConfig):
    seq = cvol.read_sequence(path)
    return resample(seq, cfg.target_spacing)


def _describe_and_detect(fields: DisplacementFieldSequence, cfg: RunConfig, out: Path, source: str):
    desc = compute_descriptor(fields, cfg.descriptor)
    kf = detect_keyframes(desc.alpha)
    payload = kf.to_json()
    payload.update({
        "focus": desc.focus.as_dict(),
        "mask_points": int(desc.mask.sum()),
        "config": cfg.to_json(),
        "input": source,
    })
    _write_json(out / "keyframes.json", payload)
    desc.write_csv(out / "descriptor.csv")
    return desc, kf


def cmd_detect(args) -> int:
    out = Path(args.out)
    header = cvol.read_header(args.input)
    cfg = build_config(args, len(header["dims"]) - 1)
    seq = _load_resampled(args.input, cfg)
    log.info("registering %d frames of %s", seq.T, seq.dims)
    fields, results = register_sequence_detailed(seq, cfg.registration, threads=args.threads)
    out.mkdir(parents=True, exist_ok=True)
    desc, kf = _describe_and_detect(fields, cfg, out, str(args.input))
    if args.emit_intermediates:
        cvol.write_fields(out / "fields", fields)
        cvol.write_mask(out / "mask", desc.mask, fields.spacing)
        write_loss_traces(out / "loss_trace.csv", results)
    print(json.dumps({k: kf.indices[k] for k in ("ED", "MS", "ES", "PF", "MD")}))
    return EXIT_OK


def cmd_register(args) -> int:
    out = Path(args.out)
    header = cvol.read_header(args.input)
    cfg = build_config(args, len(header["dims"]) - 1)
    seq = _load_resampled(args.input, cfg)
    fields, results = register_sequence_detailed(seq, cfg.registration, threads=args.threads)
    cvol.write_fields(out / "fields", fields)
    write_loss_traces(out / "loss_trace.csv", results)
    _write_json(out / "run.json", {"config": cfg.to_json(), "input": str(args.input)})
    return EXIT_OK


def cmd_describe(args) -> int:
    out = Path(args.out)
    fields = cvol.read_fields(args.fields)
    cfg = build_config(args, fields.ndim)
    out.mkdir(parents=True, exist_ok=True)
    desc, kf = _describe_and_detect(fields, cfg, out, str(args.fields))
    if args.emit_intermediates:
        cvol.write_mask(out / "mask", desc.mask, fields.spacing)
    print(json.dumps({k: kf.indices[k] for k in ("ED", "MS", "ES", "PF", "MD")}))
    return EXIT_OK


def _load_keyframe_json(path: Path) -> KeyframeSet:
    try:
        return KeyframeSet.from_json(json.loads(path.read_text()))
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _collect_predictions(pred_dir: Path) -> dict:
    if not pred_dir.is_dir():
        raise ConfigError(f"predictions: {pred_dir} is not a directory")
    found = {}
    for p in sorted(pred_dir.glob("*.json")):
        found[p.stem] = p
    for p in sorted(pred_dir.glob("*/keyframes.json")):
        found[p.parent.name] = p
    return found


def _collect_references(ref_path: Path) -> dict:
    if ref_path.is_dir():
        refs = {}
        for p in sorted(ref_path.glob("*.json")):
            refs[p.stem] = _load_keyframe_json(p)
        for p in sorted(ref_path.glob("*/truth.json")):
            refs[p.parent.name] = _load_keyframe_json(p)
        return refs
    try:
        data = json.loads(ref_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"references: cannot read {ref_path} ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("references: expected an object mapping case ids to keyframe JSON")
    refs = {}
    for cid, obj in data.items():
        try:
            refs[cid] = KeyframeSet.from_json(obj)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"references[{cid}]: {exc}") from None
    return refs


def cmd_evaluate(args) -> int:
    preds = _collect_predictions(Path(args.predictions))
    if not preds:
        raise ConfigError(f"predictions: no keyframe JSON files in {args.predictions}")
    refs = _collect_references(Path(args.references))
    missing = sorted(set(preds) - set(refs))
    if missing:
        raise ConfigError(f"references: no reference for case ids {', '.join(missing)}")
    ids = sorted(preds)
    pred_sets = [_load_keyframe_json(preds[c]) for c in ids]
    ref_sets = [refs[c] for c in ids]
    Ts = []
    for cid, p, r in zip(ids, pred_sets, ref_sets):
        T = r.T if r.T is not None else p.T
        if T is None:
            raise ConfigError(f"{cid}: sequence length T missing in prediction and reference")
        Ts.append(T)
    try:
        table = evaluate(pred_sets, ref_sets, Ts, ids)
    except ValueError as exc:
        raise ConfigError(f"evaluate: {exc}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    pooled = table.pooled
    if pooled is not None:
        print(f"all: {pooled['mean']:.2f} +- {pooled['sd']:.2f} (n={pooled['n']})")
    return EXIT_OK


def _parse_dims(text: str):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"dims: cannot parse {text!r}; use e.g. 64x64 or 16x64x64") from None
    if len(dims) not in (2, 3):
        raise ConfigError(f"dims: expected 2 or 3 axes, got {text!r}")
    return dims


def cmd_phantom(args) -> int:
    dims = _parse_dims(args.dims)
    view = args.view or ("sax" if len(dims) == 3 else "fourch")
    if view not in VIEW_DEFAULTS:
        raise ConfigError(f"view: unknown view {view!r}")
    spacing = (VIEW_DEFAULTS[view]["target_spacing"],) * len(dims)
    try:
        spec = PhantomSpec(dims=dims, T=args.T, profile=args.profile, noise_sigma=args.noise,
                           seed=args.seed, spacing=spacing)
    except ValueError as exc:
        raise ConfigError(f"phantom: {exc}") from None
    seq, fields, _ = generate(spec)
    out = Path(args.out)
    cvol.write_sequence(out, seq)
    _write_json(out / "truth.json", truth_json(spec))
    if args.emit_fields:
        cvol.write_fields(out / "fields", fields)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser, descriptor=True, registration=True):
    p.add_argument("--config", help="JSON run configuration (may carry a 'view' preset key)")
    p.add_argument("--view", choices=sorted(VIEW_DEFAULTS), help="parameter preset; default from dimensionality")
    p.add_argument("--seed", type=int)
    if descriptor:
        p.add_argument("--focus", help="mse | vol | explicit:X,Y[,Z] (also lv:/sept:)")
        p.add_argument("--t-norm", dest="t_norm", type=float, help="magnitude percentile threshold")
        p.add_argument("--t-delta-alpha", dest="t_delta_alpha", type=float)
        p.add_argument("--sigma", type=float, help="temporal Gaussian smoothing in frames")
    if registration:
        p.add_argument("--lambda", dest="lam", type=float, help="diffusion regularisation weight")
        p.add_argument("--threads", type=int, default=1)
    p.add_argument("--emit-intermediates", dest="emit_intermediates", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardiokey", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="images -> fields -> descriptor -> keyframes")
    p.add_argument("input", help="cvol image sequence")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("register", help="images -> displacement fields")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_common(p, descriptor=False)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("describe", help="precomputed fields -> descriptor -> keyframes")
    p.add_argument("fields", help="vector-field cvol")
    p.add_argument("--out", required=True)
    _add_common(p, registration=False)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("evaluate", help="cFD of predictions against references")
    p.add_argument("predictions", help="directory of keyframe JSON files")
    p.add_argument("references", help="JSON file mapping case id -> keyframes, or a directory")
    p.add_argument("--out", required=True, help="evaluation CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="write a synthetic phantom cvol plus truth.json")
    p.add_argument("--profile", choices=PROFILES, default="normal")
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--dims", default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="additive Gaussian noise std (intensity units)")
    p.add_argument("--view", choices=sorted(VIEW_DEFAULTS))
    p.add_argument("--emit-fields", dest="emit_fields", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("CARDIOKEY_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
        print("error: threads: must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (ConfigError, cvol.CvolFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateMaskError as exc:
        print(f"error: degenerate mask ({exc.stage} filter): {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
