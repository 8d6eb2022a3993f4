"""In-plane shift refinement from common lines.

Every image pair contributes one linear equation. Along its common line the
two original rays differ only by a phase ramp; the ramp's slope ``s*`` is
measured by a 1D search and tied to the per-image unknowns by the row
``[sin a, cos a, -sin b, -cos b]``. All rows form a sparse system solved in
the minimum-norm least-squares sense. Rounds alternate between correcting
the rays with the current estimate, re-detecting common lines and solving
again.

Layout of the unknown vector ``x`` (length ``2K``): image ``k`` (0-based)
owns entries ``2k, 2k+1``. They hold the pair used by
:func:`clpose.polarfft.correction_phase`, i.e. ``(-dy_k, -dx_k)`` for a
content displacement ``(dx_k, dy_k)``. Use :func:`to_system_layout` and
:func:`to_displacements` to convert.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .commonline import CommonLineTable, detect_common_lines, pair_agreement
from .polarfft import PolarStack, phase_correct

logger = logging.getLogger(__name__)

DEFAULT_S_STEP = 0.25
DEFAULT_RCOND = 0.05


def default_s_range(side: int) -> float:
    """Largest possible ``|s*|`` for shifts within ``side / 8`` per axis.

    ``s*`` is the difference of two shifts projected on unit directions, so
    it can reach ``2 sqrt(2) side / 8``.
    """
    return 2 * np.sqrt(2) * side / 8


def to_system_layout(shifts) -> np.ndarray:
    """``(K, 2)`` displacements ``(dx, dy)`` -> flat ``x`` of the shift system."""
    s = np.asarray(shifts, dtype=float).reshape(-1, 2)
    return np.column_stack([-s[:, 1], -s[:, 0]]).ravel()


def to_displacements(x) -> np.ndarray:
    """Inverse of :func:`to_system_layout`."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    return np.column_stack([-x[:, 1], -x[:, 0]])


@dataclass
class ShiftSystem:
    A: sparse.csr_matrix
    b: np.ndarray
    row_pairs: list
    alpha: np.ndarray  # radians, per row
    beta: np.ndarray

    def __post_init__(self):
        if self.A.shape[0] != len(self.b) or len(self.b) != len(self.row_pairs):
            raise ValueError("A, b and row_pairs disagree on the number of rows")
        if not np.all(np.isfinite(self.b)):
            raise ValueError("non-finite entries in b")

    @property
    def K(self) -> int:
        return self.A.shape[1] // 2

    def residual(self, x) -> float:
        return float(np.linalg.norm(self.A @ np.asarray(x, dtype=float) - self.b))


@dataclass
class ShiftEstimate:
    x: np.ndarray
    residual: float
    iteration: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        if not np.all(np.isfinite(self.x)):
            raise ValueError("shift estimate is not finite")
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")

    @property
    def displacements(self) -> np.ndarray:
        return to_displacements(self.x)


@dataclass
class RefineConfig:
    epsilon: float = 0.05  # px, max-abs change between rounds
    max_rounds: int = 10
    s_range: Optional[float] = None  # None: default_s_range(side)
    s_step: float = DEFAULT_S_STEP
    min_ncc: Optional[float] = None  # drop rows below this detection score
    rtol: float = 1e-3  # relative residual change counted as converged
    rcond: float = DEFAULT_RCOND
    # shift search inside common-line detection: round 1 spans the full
    # bound (None: default_s_range), later rounds only the residual
    detect_shift: Optional[float] = None
    detect_shift_after: float = 2.0
    detect_step: float = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if not self.s_step > 0:
            raise ValueError("s_step must be positive")


@dataclass
class RefineHistory:
    residual: list = field(default_factory=list)
    step: list = field(default_factory=list)  # max |x(t) - x(t-1)|
    agreement: list = field(default_factory=list)  # % of pairs within 1 ray of the previous round
    rows: list = field(default_factory=list)
    best_round: int = 0
    converged: bool = False
    flagged: bool = False  # hit max_rounds without meeting the stop rule

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "residual", "step_inf", "cl_agreement_pct", "rows"])
            for t in range(len(self.residual)):
                ag = self.agreement[t]
                w.writerow([t + 1, repr(self.residual[t]), repr(self.step[t]),
                            "" if ag is None else repr(ag), self.rows[t]])


def _unit(v):
    nrm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nrm <= 0):
        raise ValueError("zero-norm ray: shift is undefined")
    return v / nrm


def shift_scores(ray1, ray2, freqs, s) -> np.ndarray:
    """``Re <unit(ray1 * exp(-2 pi i s f)), unit(ray2)>`` for each ``s``."""
    r1, r2 = _unit(np.asarray(ray1)), _unit(np.asarray(ray2))
    E = np.exp(-2j * np.pi * np.outer(np.atleast_1d(s), freqs))
    return (E @ (r1 * r2.conj())).real


def _parabolic(scores, k, s, step):
    if k == 0 or k == len(scores) - 1:
        return s[k]
    y0, y1, y2 = scores[k - 1], scores[k], scores[k + 1]
    den = y0 - 2 * y1 + y2
    if den >= 0:
        return s[k]
    return s[k] + 0.5 * step * (y0 - y2) / den


def estimate_ray_shift(ray1, ray2, freqs, s_range: float, s_step: float = DEFAULT_S_STEP) -> float:
    """Phase-ramp slope ``s`` that best maps ``ray1`` onto ``ray2``.

    Grid search on ``[-s_range, s_range]`` then one parabolic step through the
    best grid point and its neighbours.
    """
    ray1, ray2 = np.asarray(ray1), np.asarray(ray2)
    if ray1.shape != ray2.shape:
        raise ValueError("rays must have the same length")
    if s_range < 1:
        raise ValueError("s_range must be at least 1 px")
    m = int(np.floor(s_range / s_step + 1e-9))
    s = np.arange(-m, m + 1) * s_step
    scores = shift_scores(ray1, ray2, freqs, s)
    k = int(np.argmax(scores))
    return float(_parabolic(scores, k, s, s_step))


def _batch_shifts(R1, R2, freqs, s_range, s_step):
    """Vectorized :func:`estimate_ray_shift` over rows of ``R1``, ``R2``."""
    m = int(np.floor(s_range / s_step + 1e-9))
    s = np.arange(-m, m + 1) * s_step
    P = _unit(R1) * _unit(R2).conj()
    E = np.exp(-2j * np.pi * np.outer(s, freqs))
    scores = (P @ E.T).real  # (pairs, n_s)
    k = np.argmax(scores, axis=1)
    return np.array([_parabolic(sc, kk, s, s_step) for sc, kk in zip(scores, k)])


def stencil_rows(pairs, alpha, beta, K: int) -> sparse.csr_matrix:
    """Rows ``[sin a, cos a, -sin b, -cos b]`` at columns ``2k1, 2k1+1, 2k2, 2k2+1``."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    M = len(pairs)
    data = np.column_stack([np.sin(alpha), np.cos(alpha), -np.sin(beta), -np.cos(beta)]).ravel()
    cols = np.column_stack([2 * pairs[:, 0], 2 * pairs[:, 0] + 1,
                            2 * pairs[:, 1], 2 * pairs[:, 1] + 1]).ravel()
    indptr = np.arange(0, 4 * M + 1, 4)
    # explicit zeros (e.g. sin 0) stay stored so every row keeps 4 slots
    return sparse.csr_matrix((data, cols, indptr), shape=(M, 2 * K))


def _full_ray(rays, c, n_theta):
    """Rays at 1-based indices ``c`` (array) from ``rays`` of shape (len(c), n_theta, n_r)."""
    idx = (c - 1) % n_theta
    out = rays[np.arange(len(c)), idx]
    return np.where((c > n_theta)[:, None], out.conj(), out)


def build_system(pol_original: PolarStack, pol_corrected: Optional[PolarStack],
                 cl: CommonLineTable, s_range: Optional[float] = None,
                 s_step: float = DEFAULT_S_STEP, min_ncc: Optional[float] = None) -> ShiftSystem:
    """One equation per usable unordered pair ``k1 < k2``.

    ``cl`` comes from the corrected stack, the rays from the original one.
    ``pol_corrected`` is only checked for shape agreement and may be None.
    """
    if pol_corrected is not None and pol_corrected.rays.shape != pol_original.rays.shape:
        raise ValueError("original and corrected stacks differ in shape")
    K, n_theta = pol_original.n, pol_original.n_theta
    if cl.cl_index.shape != (K, K) or cl.n_theta != n_theta:
        raise ValueError("common-line table does not match the polar stack")
    s_range = default_s_range(pol_original.side) if s_range is None else s_range
    k1, k2 = np.triu_indices(K, 1)
    keep = ~cl.degenerate_mask[k1, k2]
    if min_ncc is not None:
        keep &= cl.ncc[k1, k2] >= min_ncc
    k1, k2 = k1[keep], k2[keep]
    c1, c2 = cl.cl_index[k1, k2], cl.cl_index[k2, k1]
    alpha = np.pi * (c1 - 1) / n_theta
    beta = np.pi * (c2 - 1) / n_theta
    rays = pol_original.rays
    R1 = _full_ray(rays[k1], c1, n_theta)
    R2 = _full_ray(rays[k2], c2, n_theta)
    b = _batch_shifts(R1, R2, pol_original.freqs, s_range, s_step) if len(k1) else np.zeros(0)
    pairs = np.column_stack([k1, k2])
    A = stencil_rows(pairs, alpha, beta, K)
    return ShiftSystem(A, b, [tuple(map(int, p)) for p in pairs], alpha, beta)


def solve_shifts(system: ShiftSystem, iteration: int = 0, rcond: float = DEFAULT_RCOND) -> ShiftEstimate:
    """Minimum-norm least-squares solution; the unobservable modes come out zero.

    A common 3D translation of the particle leaves every equation unchanged,
    so ``A`` has a three-dimensional null space for exact line angles. On the
    ray grid those modes survive as singular values a few thousandths of the
    largest; ``rcond`` (relative) treats them as null instead of letting them
    amplify measurement error.
    """
    if system.A.shape[0] < 1:
        raise ValueError("shift system has no rows")
    x, *_ = np.linalg.lstsq(system.A.toarray(), system.b, rcond=rcond)
    return ShiftEstimate(x, system.residual(x), iteration)


def observable_basis(A, rtol: float = DEFAULT_RCOND) -> np.ndarray:
    """Orthonormal basis (columns) of the row space of ``A``."""
    A = A.toarray() if sparse.issparse(A) else np.asarray(A, dtype=float)
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size else 0
    return Vt[:rank].T


def refine_shifts(pol: PolarStack, x0: Optional[ShiftEstimate] = None,
                  cfg: Optional[RefineConfig] = None,
                  reference: Optional[CommonLineTable] = None):
    """Alternate correction, common-line detection and the global solve.

    Detection searches a relative shift along each candidate line (see
    :func:`clpose.commonline.detect_common_lines`); without it uncentred
    images rarely match in the first round.

    Stops when the estimate moves less than ``cfg.epsilon`` (max-abs, px) or
    the residual changes by less than ``cfg.rtol`` relative; otherwise runs
    ``cfg.max_rounds`` rounds and flags the history. The round with the lowest
    residual is returned, so it is never worse than round 1.

    ``reference`` (optional) replaces the previous round as the target of the
    per-round common-line agreement column.
    """
    cfg = cfg or RefineConfig()
    if pol.corrected:
        raise ValueError("refine_shifts expects the uncorrected polar stack")
    x = np.zeros(2 * pol.n) if x0 is None else np.asarray(x0.x, dtype=float).copy()
    if x.shape != (2 * pol.n,) or not np.all(np.isfinite(x)):
        raise ValueError("initial shifts must be a finite vector of length 2K")
    hist = RefineHistory()
    best: Optional[ShiftEstimate] = None
    prev_cl = reference
    for t in range(1, cfg.max_rounds + 1):
        corrected = phase_correct(pol, to_displacements(x))
        if t == 1:
            search = default_s_range(pol.side) if cfg.detect_shift is None else cfg.detect_shift
        else:
            search = cfg.detect_shift_after
        cl = detect_common_lines(corrected, search, cfg.detect_step)
        system = build_system(pol, corrected, cl, cfg.s_range, cfg.s_step, cfg.min_ncc)
        est = solve_shifts(system, t, cfg.rcond)
        step = float(np.abs(est.x - x).max())
        agree = None if prev_cl is None else 100.0 * float(pair_agreement(cl, prev_cl).mean())
        if reference is None:
            prev_cl = cl
        hist.residual.append(est.residual)
        hist.step.append(step)
        hist.agreement.append(agree)
        hist.rows.append(len(system.b))
        logger.info("shift round %d: residual %.4g, step %.3g px", t, est.residual, step)
        if best is None or est.residual < best.residual:
            best, hist.best_round = est, t
        x = est.x
        stalled = t > 1 and abs(hist.residual[-1] - hist.residual[-2]) <= cfg.rtol * hist.residual[-2]
        if step < cfg.epsilon or stalled:
            hist.converged = True
            break
    else:
        hist.flagged = True
        logger.warning("shift refinement did not converge in %d rounds", cfg.max_rounds)
    return best, hist


def observable_shift_basis(rotations, n_theta: int = 180) -> np.ndarray:
    """Orthonormal basis, in the flattened ``(dx1, dy1, ...)`` layout, of the
    shifts that common lines can determine for the given true rotations.

    Built from exact (unquantized) line angles, so the complement is exactly
    the common-3D-translation family plus any pair-degenerate modes.
    """
    from .commonline import oracle_common_lines

    R = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    K = len(R)
    cl = oracle_common_lines(R, n_theta)
    k1, k2 = np.triu_indices(K, 1)
    keep = ~cl.degenerate_mask[k1, k2]
    k1, k2 = k1[keep], k2[keep]
    A = stencil_rows(np.column_stack([k1, k2]), cl.angles[k1, k2], cl.angles[k2, k1], K)
    B = observable_basis(A, rtol=1e-9)
    return np.stack([to_displacements(v).ravel() for v in B.T], axis=1)
