"""Stage functions shared by the CLI, the scripts and the tests.

Each stage takes a :class:`~clpose.config.PipelineConfig` and in-memory
inputs and returns in-memory outputs; file handling lives in :mod:`clpose.cli`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import shiftfix
from .commonline import CommonLineTable, DihedralTable, detect_common_lines, vote_dihedrals
from .config import PipelineConfig
from .evaluation import FscCurve, MetricReport, align_global, fsc, gridding_reconstruct, metrics
from .polarfft import PolarStack, phase_correct, polar_transform
from .poseopt import ObjectiveInputs, OptimizerConfig, OptTrace, assemble_rotations, estimate_poses
from .simdata import ProjectionStack, Volume, simulate


@dataclass
class PoseResult:
    rotations: np.ndarray
    cl: CommonLineTable
    dih: DihedralTable
    trace: OptTrace


def _as_float32(a):
    # stored artifacts are float32; computing on the same values keeps the
    # in-memory pipeline identical to a run from files
    return np.asarray(a, dtype=np.float32).astype(float)


def run_simulate(cfg: PipelineConfig) -> tuple[Volume, ProjectionStack]:
    seed = cfg.stage_seeds()["simulate"]
    vol, stack = simulate(cfg.n, cfg.side, seed, snr=cfg.snr, max_shift=cfg.max_shift,
                          threads=cfg.threads)
    vol.data = _as_float32(vol.data)
    stack.images = _as_float32(stack.images)
    stack.seed = cfg.seed
    stack.meta["stage_seed"] = seed
    return vol, stack


def polar(cfg: PipelineConfig, stack: ProjectionStack) -> PolarStack:
    return polar_transform(stack, cfg.n_theta, cfg.n_r, cfg.rmax, cfg.mask_radius)


def wants_shifts(cfg: PipelineConfig, stack: ProjectionStack) -> bool:
    if cfg.shifts != "auto":
        return cfg.shifts == "on"
    truth = stack.true_shifts
    return truth is None or cfg.max_shift > 0 or bool(np.any(truth != 0))


def run_shifts(cfg: PipelineConfig, stack: ProjectionStack):
    rc = shiftfix.RefineConfig(epsilon=cfg.epsilon, max_rounds=cfg.max_rounds, s_range=cfg.s_range,
                               s_step=cfg.s_step, min_ncc=cfg.min_ncc, detect_step=cfg.detect_step)
    return shiftfix.refine_shifts(polar(cfg, stack), None, rc)


def optimizer_config(cfg: PipelineConfig) -> OptimizerConfig:
    return OptimizerConfig(alpha=cfg.alpha, beta=cfg.beta, K_max=cfg.K_max, tol=cfg.tol,
                           patience=cfg.patience, decay_every=cfg.decay_every,
                           max_decays=cfg.max_decays, init_iters=cfg.init_iters,
                           restarts=cfg.restarts,
                           seed=cfg.stage_seeds()["poses"], loss=cfg.loss)


def run_poses(cfg: PipelineConfig, stack: ProjectionStack, shifts: Optional[np.ndarray] = None) -> PoseResult:
    pol = polar(cfg, stack)
    if shifts is not None:
        pol = phase_correct(pol, shifts)
    cl = detect_common_lines(pol)
    dih = vote_dihedrals(cl, cfg.T)
    pose, trace = estimate_poses(ObjectiveInputs.from_tables(dih, cl), optimizer_config(cfg))
    return PoseResult(assemble_rotations(pose), cl, dih, trace)


def run_evaluate(stack: ProjectionStack, rotations, shifts=None, n_theta: int = 180):
    """Aligned metrics against the stack's ground truth."""
    if stack.true_rotations is None:
        raise ValueError("stack carries no true rotations to evaluate against")
    al = align_global(rotations, stack.true_rotations)
    basis = None
    if shifts is not None and stack.true_shifts is not None:
        basis = shiftfix.observable_shift_basis(stack.true_rotations, n_theta)
    report = metrics(al.aligned, stack.true_rotations, shifts,
                     stack.true_shifts if shifts is not None else None, basis)
    return report, al


def run_fsc(vol: Volume, stack: ProjectionStack, aligned_rotations, shifts=None) -> tuple[FscCurve, Volume]:
    rec = gridding_reconstruct(stack, aligned_rotations, shifts)
    return fsc(vol, rec), rec
