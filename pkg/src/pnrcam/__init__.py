"""Photon-number-resolved single-pixel imaging with thermal light.

Simulates two-arm photon-number-resolving detection of a thermal field
reflected off a scene and projected onto random binary patterns, conditions
the counts by post-selection or photon subtraction, and reconstructs the
scene by total-variation compressive sensing.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataFormatError, DivergenceError, InfiniteSNRError,
                     NumericalError, PnrcamError, StarvedConditionError, TruncationError,
                     UndefinedStatisticError)
from .photon_model import (DetectorParams, JointPND, MarginalPND, g2_from_counts, g2_from_dist,
                           joint_pnd, marginal_a, marginal_b, noise_pnd, thermal_pn)
from .scene import (SceneImage, SensingMatrix, builtin_scene, load_matrix, load_scene,
                    make_pattern_set, pattern_means, save_matrix, save_scene)
from .sampler import AcquisitionConfig, EventLog, read_event_log, run_acquisition, write_event_log
from .conditioning import (ConditioningRule, MeasurementVector, condition_events,
                           conditional_histogram, snr_curve, snr_post, snr_sub)
from .tvmin import ReconstructionResult, SolverConfig, quality_metrics, reconstruct
from .pipeline import ExperimentConfig, ExperimentReport, load_config, run_experiment, sweep_snr

__all__ = [
    "__version__",
    "ConfigError",
    "DataFormatError",
    "DivergenceError",
    "InfiniteSNRError",
    "NumericalError",
    "PnrcamError",
    "StarvedConditionError",
    "TruncationError",
    "UndefinedStatisticError",
    "DetectorParams",
    "JointPND",
    "MarginalPND",
    "g2_from_counts",
    "g2_from_dist",
    "joint_pnd",
    "marginal_a",
    "marginal_b",
    "noise_pnd",
    "thermal_pn",
    "SceneImage",
    "SensingMatrix",
    "builtin_scene",
    "load_matrix",
    "load_scene",
    "make_pattern_set",
    "pattern_means",
    "save_matrix",
    "save_scene",
    "AcquisitionConfig",
    "EventLog",
    "read_event_log",
    "run_acquisition",
    "write_event_log",
    "ConditioningRule",
    "MeasurementVector",
    "condition_events",
    "conditional_histogram",
    "snr_curve",
    "snr_post",
    "snr_sub",
    "ReconstructionResult",
    "SolverConfig",
    "quality_metrics",
    "reconstruct",
    "ExperimentConfig",
    "ExperimentReport",
    "load_config",
    "run_experiment",
    "sweep_snr",
]
