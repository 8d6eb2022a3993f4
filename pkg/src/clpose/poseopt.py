"""Joint estimation of viewing directions ``D`` and in-plane x-axes ``Q``.

The objective is

    J(D, Q) = sum_{i != j} W_ij |d_i.d_j - cos Theta_ij|
            + sum_{i != j} W_ij |q_i.q_j - cos Phi_ij(D)|

with ``cos Phi_ij = A_ij + B_ij d_i.d_j``, ``A_ij = cos C_ij cos C_ji`` and
``B_ij = sin C_ij sin C_ji``. Rows of ``D`` and ``Q`` are unit vectors with
``d_i . q_i = 0``.

``loss="l2"`` swaps the absolute residuals for squared ones; it exists only
as an ablation baseline.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.spatial.transform import Rotation as _ScipyRotation

from .commonline import CommonLineTable, DihedralTable

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9


@dataclass
class PoseSet:
    D: np.ndarray
    Q: np.ndarray

    def violations(self) -> tuple[float, float]:
        """Max deviation of row norms from 1 and max ``|d_i . q_i|``."""
        nd = np.abs(np.linalg.norm(self.D, axis=1) - 1).max()
        nq = np.abs(np.linalg.norm(self.Q, axis=1) - 1).max()
        return float(max(nd, nq)), float(np.abs(np.einsum("ij,ij->i", self.D, self.Q)).max())

    def check(self, tol: float = FEAS_TOL) -> None:
        norm_err, orth_err = self.violations()
        if norm_err > tol or orth_err > tol:
            raise ValueError(f"pose constraints violated: norm {norm_err:.2e}, orthogonality {orth_err:.2e}")


@dataclass
class ObjectiveInputs:
    theta: np.ndarray
    W: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        W = np.array(self.W, dtype=float)
        np.fill_diagonal(W, 0.0)
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise ValueError("weights must be finite and nonnegative")
        self.W = W
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.C))):
            raise ValueError("non-finite dihedral or common-line angles")
        cC, sC = np.cos(self.C), np.sin(self.C)
        self.A = cC * cC.T
        self.B = sC * sC.T
        self.cos_theta = np.cos(self.theta)
        self.sinC_cosC = sC * cC.T  # signed; used only to pick the sign of D

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @classmethod
    def from_tables(cls, dih: DihedralTable, cl: CommonLineTable) -> "ObjectiveInputs":
        W = dih.W.copy()
        W[cl.degenerate_mask] = 0.0
        return cls(dih.theta, W, cl.C)

    def cos_phi(self, D: np.ndarray) -> np.ndarray:
        return self.A + self.B * (D @ D.T)


@dataclass
class OptimizerConfig:
    alpha: Optional[float] = None  # None: default_step()
    beta: Optional[float] = None
    K_max: int = 2000
    tol: float = 1e-7
    patience: int = 50
    decay_every: int = 200
    max_decays: int = 6  # step halvings allowed before a stalled run stops
    init_iters: int = 1500
    restarts: int = 4  # random starts per initialization step; the best is kept
    seed: int = 0
    loss: str = "l1"

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.K_max < 1:
            raise ValueError("K_max must be >= 1")
        if self.patience < 1 or self.decay_every < 1 or self.max_decays < 0:
            raise ValueError("patience and decay_every must be >= 1, max_decays >= 0")
        if self.loss not in ("l1", "l2"):
            raise ValueError("loss must be 'l1' or 'l2'")


@dataclass
class OptTrace:
    J: list = field(default_factory=list)
    best_J: list = field(default_factory=list)
    norm_violation: list = field(default_factory=list)
    orth_violation: list = field(default_factory=list)
    improved: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    rerandomized: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "J", "best_J", "max_violation", "alpha", "beta", "improved"])
            for k in range(len(self.J)):
                w.writerow([k, repr(self.J[k]), repr(self.best_J[k]),
                            repr(max(self.norm_violation[k], self.orth_violation[k])),
                            repr(self.alpha[k]), repr(self.beta[k]), int(self.improved[k])])


def _offdiag(M):
    M = M.copy()
    np.fill_diagonal(M, 0.0)
    return M


def _penalty(res, W, loss):
    r = W * res
    r = _offdiag(r)
    return np.abs(r).sum() if loss == "l1" else (r * r).sum()


def _dpenalty(res, W, loss):
    """Derivative of the entrywise penalty with respect to the residual, times W."""
    if loss == "l1":
        return _offdiag(W * np.sign(res))  # sign(0) = 0
    return _offdiag(2 * W * W * res)


def objective(D, Q, inputs: ObjectiveInputs, loss: str = "l1") -> float:
    D, Q = np.asarray(D, dtype=float), np.asarray(Q, dtype=float)
    G = D @ D.T
    j_d = _penalty(G - inputs.cos_theta, inputs.W, loss)
    j_q = _penalty(Q @ Q.T - inputs.A - inputs.B * G, inputs.W, loss)
    return float(j_d + j_q)


def objective_terms(D, Q, inputs: ObjectiveInputs, loss: str = "l1") -> tuple[float, float]:
    G = D @ D.T
    return (float(_penalty(G - inputs.cos_theta, inputs.W, loss)),
            float(_penalty(Q @ Q.T - inputs.A - inputs.B * G, inputs.W, loss)))


def gradients(D, Q, inputs: ObjectiveInputs, loss: str = "l1"):
    """Subgradients of ``J`` in the ambient space (no constraint projection).

    For the l1 loss these are ``2 (W o sign(R_D)) D - 2 (W o B o sign(R_Q)) D``
    and ``2 (W o sign(R_Q)) Q``.
    """
    G = D @ D.T
    SD = _dpenalty(G - inputs.cos_theta, inputs.W, loss)
    SQ = _dpenalty(Q @ Q.T - inputs.A - inputs.B * G, inputs.W, loss)
    gD = 2 * SD @ D - 2 * (inputs.B * SQ) @ D
    gQ = 2 * SQ @ Q
    return gD, gQ


def _normalize_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def random_unit_rows(n: int, rng) -> np.ndarray:
    return _normalize_rows(rng.standard_normal((n, 3)))


def project_row_pair(d, q, rng=None, which: str = "d"):
    """Orthogonalize ``d`` against unit ``q`` and normalize (``which="d"``);
    ``which="q"`` is the mirror step.

    Returns ``(d', q', rerandomized)``. A vector that vanishes after
    orthogonalization is redrawn from ``rng``.
    """
    d, q = np.asarray(d, dtype=float), np.asarray(q, dtype=float)
    move, fixed = (d, q) if which == "d" else (q, d)
    if np.linalg.norm(fixed) <= 1e-9:
        raise ValueError("cannot orthogonalize against a zero vector")
    fixed_u = fixed / np.linalg.norm(fixed)
    v = move - (move @ fixed_u) * fixed_u
    redrawn = False
    rng = np.random.default_rng(0) if rng is None else rng
    while np.linalg.norm(v) <= 1e-9:
        redrawn = True
        r = rng.standard_normal(3)
        v = r - (r @ fixed_u) * fixed_u
    v = v / np.linalg.norm(v)
    # second pass removes the residual component left by round-off
    v = v - (v @ fixed_u) * fixed_u
    v = v / np.linalg.norm(v)
    return (v, fixed, redrawn) if which == "d" else (fixed, v, redrawn)


def _project_rows(move, fixed, rng):
    """Vectorized :func:`project_row_pair` over all rows."""
    v = move - np.einsum("ij,ij->i", move, fixed)[:, None] * fixed
    bad = np.linalg.norm(v, axis=1) <= 1e-9
    count = 0
    for i in np.flatnonzero(bad):
        _, v[i], _ = project_row_pair(fixed[i], move[i], rng, which="q")
        count += 1
    v = _normalize_rows(v)
    v = v - np.einsum("ij,ij->i", v, fixed)[:, None] * fixed
    return _normalize_rows(v), count


STEP_SCALE = 0.01


def default_step(inputs: ObjectiveInputs) -> float:
    """``STEP_SCALE / (n * mean positive weight)``.

    A row of the subgradient has norm up to ``2 n`` times the typical weight,
    so this keeps a single step at a few hundredths of a radian.
    """
    w = inputs.W[inputs.W > 0]
    scale = w.mean() if w.size else 1.0
    return STEP_SCALE / (inputs.n * scale)


def _sphere_pgd(target, W, X0, step, iters, loss, decay_every=200, patience=50, tol=1e-7):
    """Projected subgradient descent of ``penalty(X X^T - target)`` over unit rows.

    The step halves after ``decay_every`` iterations without a new best, or
    when the best value gains less than ``tol`` over ``patience`` iterations
    (an l1 iterate can hover around a kink with rare tiny gains).
    """
    X = X0.copy()
    best, best_val = X.copy(), _penalty(X @ X.T - target, W, loss)
    history = [best_val]
    stall = 0
    for _ in range(iters):
        g = 2 * _dpenalty(X @ X.T - target, W, loss) @ X
        X = _normalize_rows(X - step * g)
        val = _penalty(X @ X.T - target, W, loss)
        if val < best_val:
            best, best_val, stall = X.copy(), val, 0
        else:
            stall += 1
            if stall >= decay_every:
                step *= 0.5
                stall = 0
        history.append(best_val)
        if len(history) > patience and history[-patience - 1] - best_val < tol:
            step *= 0.5
            history = [best_val]
            X = best.copy()
    return best


def init_D(inputs: ObjectiveInputs, cfg: OptimizerConfig, start: int = 0) -> np.ndarray:
    """Unit rows minimizing the dihedral term alone, from a seeded random start."""
    if inputs.n < 3:
        raise ValueError("need at least 3 projections")
    rng = np.random.default_rng([cfg.seed, 1, start])
    step = cfg.alpha or default_step(inputs)
    return _sphere_pgd(inputs.cos_theta, inputs.W, random_unit_rows(inputs.n, rng), step,
                       cfg.init_iters, cfg.loss, cfg.decay_every, cfg.patience, cfg.tol)


def init_Q(inputs: ObjectiveInputs, D0: np.ndarray, cfg: OptimizerConfig, start: int = 0) -> np.ndarray:
    """Unit rows minimizing the in-plane term with ``cos Phi`` frozen at ``D0``."""
    if not np.allclose(np.linalg.norm(D0, axis=1), 1.0, atol=1e-9):
        raise ValueError("D0 rows must be unit vectors")
    rng = np.random.default_rng([cfg.seed, 2, start])
    step = cfg.beta or default_step(inputs)
    return _sphere_pgd(inputs.cos_phi(D0), inputs.W, random_unit_rows(inputs.n, rng), step,
                       cfg.init_iters, cfg.loss, cfg.decay_every, cfg.patience, cfg.tol)


def _diag_norm(D, Q, R):
    return float(np.sum(np.einsum("ij,jk,ik->i", D, R, Q) ** 2))


def align_DQ(D0: np.ndarray, Q0: np.ndarray, grid_deg: float = 15.0):
    """Rotation ``R`` minimizing ``||diag(D0 R Q0^T)||^2``; returns ``(Q0 R^T, R)``.

    Coarse ZYZ Euler grid, then Nelder-Mead on the rotation vector from the
    best few grid points. Only proper rotations are searched: ``-R`` gives
    the same value, so the reflection branch never does better.
    """
    step = np.deg2rad(grid_deg)
    a = np.arange(0, 2 * np.pi, step)
    b = np.arange(0, np.pi + 1e-12, step)
    E = np.stack(np.meshgrid(a, b, a, indexing="ij"), -1).reshape(-1, 3)
    Rs = _ScipyRotation.from_euler("ZYZ", E).as_matrix()
    vals = np.sum(np.einsum("ij,rjk,ik->ri", D0, Rs, Q0) ** 2, axis=1)
    best_R, best_val = np.eye(3), _diag_norm(D0, Q0, np.eye(3))

    def f(rv):
        return _diag_norm(D0, Q0, _ScipyRotation.from_rotvec(rv).as_matrix())

    for idx in np.argsort(vals)[:4]:
        rv0 = _ScipyRotation.from_matrix(Rs[idx]).as_rotvec()
        res = optimize.minimize(f, rv0, method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 4000, "maxfev": 8000})
        if res.fun < best_val:
            best_val, best_R = res.fun, _ScipyRotation.from_rotvec(res.x).as_matrix()
    return Q0 @ best_R.T, best_R


def _orient_sign(D, Q, inputs: ObjectiveInputs):
    """Pick the sign of ``D`` that agrees with the signed common-line data.

    ``J`` only sees Gram matrices, so ``(D, Q)`` and ``(-D, Q)`` score the
    same, but only one of them reproduces ``sin C_ij cos C_ji``, i.e.
    ``(y_i . u)(q_j . u)`` with ``u`` the common-line direction.
    """
    n = len(D)
    u = np.cross(D[:, None, :], D[None, :, :])
    nu = np.linalg.norm(u, axis=-1)
    ok = (nu > 1e-6) & (inputs.W > 0)
    u = u / np.where(nu > 1e-6, nu, 1.0)[..., None]
    Y = np.cross(D, Q)
    pred = np.einsum("ik,ijk->ij", Y, u) * np.einsum("jk,ijk->ij", Q, u)
    score = np.sum((inputs.W * pred * inputs.sinC_cosC)[ok])
    return (D, Q) if score >= 0 else (-D, Q)


def coordinate_descent(D0, Q0, inputs: ObjectiveInputs, cfg: OptimizerConfig):
    """Alternating projected subgradient steps on ``D`` then ``Q``.

    Each D-step is followed by ``d_i <- normalize(d_i - (d_i.q_i) q_i)``, each
    Q-step by the mirror projection. Steps halve after ``decay_every``
    iterations without a new best. When the best objective improves by less
    than ``tol`` over ``patience`` iterations the steps are also halved and the
    window restarts; after ``max_decays`` such halvings the run stops. The
    best iterate is returned.
    """
    rng = np.random.default_rng([cfg.seed, 3])
    D, Q = np.array(D0, dtype=float), np.array(Q0, dtype=float)
    alpha = cfg.alpha or default_step(inputs)
    beta = cfg.beta or default_step(inputs)
    trace = OptTrace()
    best = (D.copy(), Q.copy())
    best_J = objective(D, Q, inputs, cfg.loss)
    history = [best_J]
    stall = decays = 0
    for k in range(cfg.K_max):
        gD, _ = gradients(D, Q, inputs, cfg.loss)
        if not np.all(np.isfinite(gD)):
            raise FloatingPointError(f"non-finite D gradient at iteration {k}")
        D, nbad = _project_rows(D - alpha * gD, Q, rng)
        _, gQ = gradients(D, Q, inputs, cfg.loss)
        if not np.all(np.isfinite(gQ)):
            raise FloatingPointError(f"non-finite Q gradient at iteration {k}")
        Q, nbad_q = _project_rows(Q - beta * gQ, D, rng)
        trace.rerandomized += nbad + nbad_q
        J = objective(D, Q, inputs, cfg.loss)
        improved = J < best_J
        if improved:
            best, best_J, stall = (D.copy(), Q.copy()), J, 0
        else:
            stall += 1
            if stall >= cfg.decay_every:
                alpha, beta, stall = alpha * 0.5, beta * 0.5, 0
        nv, ov = PoseSet(D, Q).violations()
        trace.J.append(J)
        trace.best_J.append(best_J)
        trace.norm_violation.append(nv)
        trace.orth_violation.append(ov)
        trace.improved.append(improved)
        trace.alpha.append(alpha)
        trace.beta.append(beta)
        history.append(best_J)
        if len(history) > cfg.patience and history[-cfg.patience - 1] - best_J < cfg.tol:
            if decays >= cfg.max_decays:
                break
            alpha, beta, decays, stall = alpha * 0.5, beta * 0.5, decays + 1, 0
            history = [best_J]
            D, Q = best[0].copy(), best[1].copy()
    return PoseSet(*best), trace


def best_start(make, score, restarts: int):
    """Lowest-scoring of ``make(0), ..., make(restarts - 1)``; ties keep the first."""
    best, best_val = None, np.inf
    for r in range(restarts):
        X = make(r)
        val = score(X)
        if val < best_val:
            best, best_val = X, val
    return best


def estimate_poses(inputs: ObjectiveInputs, cfg: Optional[OptimizerConfig] = None):
    """Full pose stage: both initializations, alignment, sign choice, descent.

    Each initialization step is run from ``cfg.restarts`` random starts and
    the start with the lowest value of its own term is kept.
    """
    cfg = cfg or OptimizerConfig()
    D0 = best_start(lambda r: init_D(inputs, cfg, r),
                    lambda D: _penalty(D @ D.T - inputs.cos_theta, inputs.W, cfg.loss), cfg.restarts)
    target = inputs.cos_phi(D0)
    # the in-plane term sees only Q Q^T, which the later alignment leaves unchanged
    Q0 = best_start(lambda r: init_Q(inputs, D0, cfg, r),
                    lambda Q: _penalty(Q @ Q.T - target, inputs.W, cfg.loss), cfg.restarts)
    Q1, _ = align_DQ(D0, Q0)
    # the alignment leaves d_i.q_i small, not zero; project once so the
    # descent starts feasible
    Q1, _ = _project_rows(Q1, D0, np.random.default_rng([cfg.seed, 4]))
    D0, Q1 = _orient_sign(D0, Q1, inputs)
    pose, trace = coordinate_descent(D0, Q1, inputs, cfg)
    pose = PoseSet(*_orient_sign(pose.D, pose.Q, inputs))
    return pose, trace


def assemble_rotations(pose: PoseSet) -> np.ndarray:
    """Rotations with columns ``(q, d x q, d)``."""
    pose.check(1e-6)
    D, Q = pose.D, pose.Q
    return np.stack([Q, np.cross(D, Q), D], axis=-1)


def decompose_rotations(R: np.ndarray) -> PoseSet:
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    return PoseSet(R[:, :, 2].copy(), R[:, :, 0].copy())
