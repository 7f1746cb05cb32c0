"""Brachytherapy needle reconstruction from binary segmentation masks."""

from .core import (ClusterSet, NeedleCurve, PointCloud, Polyline, VolumeMeta, arc_length,
                   dilate_spherical, interpolate_polyline, mask_to_points, points_to_mask,
                   sample_equidistant)
from .errors import ConfigInfeasible, FormatError, InitializationError, InvalidInput, NeedleKitError
from .metrics import EvalReport, evaluate, match_needles, needle_errors
from .synth import ErrorProfile, Phantom, PhantomConfig, generate_phantom, inject_errors
from .techniques import ReconstructOptions, Reconstruction, Technique, reconstruct

__version__ = "0.1.0"

__all__ = [
    "ClusterSet", "ConfigInfeasible", "ErrorProfile", "EvalReport", "FormatError", "InitializationError",
    "InvalidInput", "NeedleCurve", "NeedleKitError", "Phantom", "PhantomConfig", "PointCloud", "Polyline",
    "ReconstructOptions", "Reconstruction", "Technique", "VolumeMeta", "arc_length",
    "dilate_spherical", "evaluate", "generate_phantom", "inject_errors", "interpolate_polyline", "mask_to_points", "match_needles",
    "needle_errors", "points_to_mask", "reconstruct", "sample_equidistant",
]
