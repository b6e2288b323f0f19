"""Multifocal tensor synchronization of camera poses."""
from .geometry import (apply_alignment, fit_frame_to_ground_truth, generate_cameras,
                       pose_errors)
from .multifocal import BlockTensor, build_block_tensor, build_from_canonical, canonical_tuples
from .sync_joint import JointConfig, run_joint
from .sync_quad import QuadSyncConfig, SolverDivergence, run_quadsync
from .distributed import ClusterPlan, run_distributed

__version__ = "0.1.0"

__all__ = [
    "BlockTensor",
    "ClusterPlan",
    "JointConfig",
    "QuadSyncConfig",
    "SolverDivergence",
    "apply_alignment",
    "build_block_tensor",
    "build_from_canonical",
    "canonical_tuples",
    "fit_frame_to_ground_truth",
    "generate_cameras",
    "pose_errors",
    "run_distributed",
    "run_joint",
    "run_quadsync",
]
