"""Keyframe detection in cardiac cine sequences from dense inter-frame motion."""

from .core import (
    VIEW_DEFAULTS,
    DegenerateMaskError,
    DescriptorConfig,
    DisplacementFieldSequence,
    FocusPoint,
    ImageSequence,
    NumericalFailure,
    RegistrationConfig,
    resample,
    trilinear_sample,
    warp,
)
from .descriptor import MotionDescriptor, compute_descriptor
from .keyframes import KEYFRAMES, EvaluationTable, KeyframeSet, cfd, detect_keyframes, evaluate
from .phantom import PhantomSpec, generate
from .registration import register_pair, register_sequence, smoothness, ssim

__version__ = "0.1.0"

__all__ = [
    "VIEW_DEFAULTS", "DegenerateMaskError", "DescriptorConfig", "DisplacementFieldSequence",
    "FocusPoint", "ImageSequence", "NumericalFailure", "RegistrationConfig", "resample",
    "trilinear_sample", "warp", "MotionDescriptor", "compute_descriptor", "KEYFRAMES",
    "EvaluationTable", "KeyframeSet", "cfd", "detect_keyframes", "evaluate", "PhantomSpec",
    "generate", "register_pair", "register_sequence", "smoothness", "ssim",
]
