"""Pose and in-plane shift estimation for single-particle projections from
common lines, with a synthetic-data harness for checking it."""

from .commonline import CommonLineTable, DihedralTable, detect_common_lines, oracle_common_lines, vote_dihedrals
from .config import PipelineConfig, load_config, parse_config
from .evaluation import MetricReport, align_global, fsc, gridding_reconstruct, metrics
from .polarfft import PolarStack, phase_correct, polar_transform
from .poseopt import ObjectiveInputs, OptimizerConfig, PoseSet, assemble_rotations, estimate_poses
from .shiftfix import RefineConfig, ShiftEstimate, ShiftSystem, build_system, refine_shifts, solve_shifts
from .simdata import ProjectionStack, Volume, default_phantom, make_phantom, project, simulate

__version__ = "0.1.0"
