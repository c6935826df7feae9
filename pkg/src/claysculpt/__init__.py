"""Clay sculpting with a parallel gripper: point-cloud tools, grasp dynamics and sampling-based planning."""

from .cloud import (PointCloud, RigidTransform, chamfer_distance, chamfer_mean,
                    farthest_point_sample, kmeans, nearest_neighbor)
from .dynamics import AnalyticDynamics, Constraints, GraspAction, GripperModel, apply_grasp
from .errors import (EmptyClayError, InvalidInputError, NoBaseError, NoSolutionError,
                     PipelineError, StallError)
from .planner import PlannerConfig, PlanStep, plan_step, run_sculpt_loop
from .preprocess import ClayShell, PreprocessConfig, RawScan, preprocess_pipeline
from .registration import RegistrationResult, calibrate, fuse_views, icp_refine, ransac_align, register
from .sampling import SamplerConfig, geometric_sample, random_sample
from .sim import SimEnvironment, make_initial_clay, make_target

__version__ = "0.1.0"

__all__ = [
    "AnalyticDynamics",
    "ClayShell",
    "Constraints",
    "EmptyClayError",
    "GraspAction",
    "GripperModel",
    "InvalidInputError",
    "NoBaseError",
    "NoSolutionError",
    "PipelineError",
    "PlanStep",
    "PlannerConfig",
    "PointCloud",
    "PreprocessConfig",
    "RawScan",
    "RegistrationResult",
    "RigidTransform",
    "SamplerConfig",
    "SimEnvironment",
    "StallError",
    "apply_grasp",
    "calibrate",
    "chamfer_distance",
    "chamfer_mean",
    "farthest_point_sample",
    "fuse_views",
    "geometric_sample",
    "icp_refine",
    "kmeans",
    "make_initial_clay",
    "make_target",
    "nearest_neighbor",
    "plan_step",
    "preprocess_pipeline",
    "random_sample",
    "ransac_align",
    "register",
    "run_sculpt_loop",
]
