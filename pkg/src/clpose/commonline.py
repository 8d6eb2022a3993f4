"""Common-line detection, the geometric common-line oracle, and dihedral
voting.

Indices are 1-based ray indices ``c in 1..2 n_theta`` with angle
``pi (c - 1) / n_theta``. For a pair ``(i, j)`` the entries ``c_ij`` and
``c_ji`` address the same lab-frame Fourier line as seen from images ``i``
and ``j``. The line has no preferred sign, so ``(c_ij + n_theta, c_ji + n_theta)``
(mod ``2 n_theta``) describes the same match. Everything downstream is
invariant to that flip.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .polarfft import PolarStack

DEFAULT_T = 60
FEASIBLE_EPS = 1e-6


@dataclass(frozen=True)
class CommonLineTable:
    cl_index: np.ndarray  # (n, n) int, 1-based; diagonal 0
    ncc: np.ndarray  # (n, n) best scores; symmetric
    n_theta: int
    angles: Optional[np.ndarray] = None  # exact angles, when known (oracle)
    degenerate: Optional[np.ndarray] = None  # (n, n) bool

    @property
    def n(self) -> int:
        return self.cl_index.shape[0]

    @property
    def C(self) -> np.ndarray:
        """Angles in ``[0, 2 pi)`` between each common line and the image x-axis."""
        if self.angles is not None:
            return self.angles
        C = np.pi * (self.cl_index - 1) / self.n_theta
        np.fill_diagonal(C, 0.0)
        return C

    @property
    def degenerate_mask(self) -> np.ndarray:
        if self.degenerate is None:
            return np.zeros((self.n, self.n), dtype=bool)
        return self.degenerate


@dataclass(frozen=True)
class DihedralTable:
    theta: np.ndarray  # (n, n) in [0, pi]
    W: np.ndarray  # (n, n) >= 0
    T: int
    n_votes: Optional[np.ndarray] = None  # feasible third images per pair

    @property
    def sigma(self) -> float:
        return np.pi / self.T


def _normalize_rays(rays: np.ndarray):
    """Mean-removed, unit-norm rays; also returns a mask of all-zero rays."""
    r = rays - rays.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    zero = norm[..., 0] < 1e-300
    r = np.where(norm > 1e-300, r / np.where(norm > 1e-300, norm, 1.0), 0.0)
    return r, zero


def detect_common_lines(pol: PolarStack, max_shift: float = 0.0,
                        shift_step: float = 1.0) -> CommonLineTable:
    """Best-NCC ray pair for every image pair.

    ``l1`` runs over the stored half-circle of image ``i`` and ``l2`` over the
    full circle of image ``j``; the score is the real part of the inner
    product of mean-removed, unit-norm rays.

    With ``max_shift > 0`` the ray of image ``i`` is also multiplied by
    ``exp(-2 pi i s f)`` for ``s`` on a grid of ``shift_step`` over
    ``[-max_shift, max_shift]`` (before mean removal and normalization) and
    each ray pair keeps its best ``s``. This
    is the phase ramp that a relative in-plane shift puts on a common line,
    so uncentred images still match.
    """
    n, n_theta, n_r = pol.rays.shape
    if n < 3:
        raise ValueError("common-line detection needs at least 3 projections")
    if max_shift < 0 or not shift_step > 0:
        raise ValueError("max_shift must be >= 0 and shift_step > 0")
    r, zero = _normalize_rays(pol.rays)
    dead = zero.all(axis=1)
    m = int(np.floor(max_shift / shift_step + 1e-9))
    ramps = np.exp(-2j * np.pi * np.outer(np.arange(-m, m + 1) * shift_step, pol.freqs))

    def stacked(x):  # Re<a, b> == real dot of [Re a, Im a] and [Re b, Im b]
        return np.concatenate([x.real, x.imag], axis=-1)

    full = stacked(np.concatenate([r, r.conj()], axis=1))  # (n, 2 n_theta, 2 n_r)

    cl = np.zeros((n, n), dtype=int)
    ncc = np.zeros((n, n))
    degenerate = np.zeros((n, n), dtype=bool)
    for i in range(n - 1):
        js = np.arange(i + 1, n)
        best = np.full(len(js), -np.inf)
        flat = np.zeros(len(js), dtype=int)
        for ramp in ramps:
            ri = r[i] if m == 0 else _normalize_rays(pol.rays[i] * ramp)[0]
            S = np.einsum("ar,jbr->jab", stacked(ri), full[js]).reshape(len(js), -1)
            k = S.argmax(axis=1)
            val = S[np.arange(len(js)), k]
            better = val > best
            best[better], flat[better] = val[better], k[better]
        l1, l2 = np.divmod(flat, 2 * n_theta)
        cl[i, js] = l1 + 1
        cl[js, i] = l2 + 1
        ncc[i, js] = ncc[js, i] = np.clip(best, -1.0, 1.0)
        bad = dead[i] | dead[js]
        degenerate[i, js] = degenerate[js, i] = bad
        ncc[i, js[bad]] = ncc[js[bad], i] = 0.0
    return CommonLineTable(cl, ncc, n_theta, degenerate=degenerate)


def oracle_common_lines(rotations: np.ndarray, n_theta: int, parallel_tol: float = 1e-9) -> CommonLineTable:
    """Common lines implied by known rotations (columns ``[q | y | d]``).

    For ``i < j`` the line direction is ``u = d_i x d_j / |d_i x d_j|`` and
    ``C_ij = atan2(u . y_i, u . q_i)``. Exact angles are kept in ``angles``;
    ``cl_index`` holds them rounded to the ray grid.
    """
    R = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    n = len(R)
    q, y, d = R[:, :, 0], R[:, :, 1], R[:, :, 2]
    C = np.zeros((n, n))
    degenerate = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if abs(d[i] @ d[j]) >= 1 - parallel_tol:
                degenerate[i, j] = degenerate[j, i] = True
                continue
            u = np.cross(d[i], d[j])
            u /= np.linalg.norm(u)
            C[i, j] = np.arctan2(u @ y[i], u @ q[i]) % (2 * np.pi)
            C[j, i] = np.arctan2(u @ y[j], u @ q[j]) % (2 * np.pi)
    idx = np.rint(C * n_theta / np.pi).astype(int) % (2 * n_theta) + 1
    np.fill_diagonal(idx, 0)
    idx[degenerate] = 0
    ncc = np.where(degenerate, 0.0, 1.0)
    np.fill_diagonal(ncc, 0.0)
    return CommonLineTable(idx, ncc, n_theta, angles=C, degenerate=degenerate)


def ray_distance(a, b, n_theta: int):
    """Circular distance in rays between 1-based indices."""
    diff = (np.asarray(a) - np.asarray(b)) % (2 * n_theta)
    return np.minimum(diff, 2 * n_theta - diff)


def pair_agreement(est: CommonLineTable, ref: CommonLineTable, tol: int = 1) -> np.ndarray:
    """Per-pair (i < j) flag: both indices within ``tol`` rays of ``ref``,
    allowing the joint half-turn flip of the pair."""
    nt = est.n_theta
    iu, ju = np.triu_indices(est.n, 1)
    a1, a2 = est.cl_index[iu, ju], est.cl_index[ju, iu]
    b1, b2 = ref.cl_index[iu, ju], ref.cl_index[ju, iu]
    direct = np.maximum(ray_distance(a1, b1, nt), ray_distance(a2, b2, nt))
    flipped = np.maximum(ray_distance(a1, b1 + nt, nt), ray_distance(a2, b2 + nt, nt))
    ok = np.minimum(direct, flipped) <= tol
    return ok & ~ref.degenerate_mask[iu, ju]


def triplet_dihedral_cosines(C: np.ndarray, valid: Optional[np.ndarray] = None):
    """Candidate ``cos theta_ij^(k)`` for all ordered triplets.

    ``g_i = C_ik - C_ij``, ``g_j = C_jk - C_ji``, ``g_k = C_kj - C_ki`` are
    signed angle differences, and

        cos theta = (cos g_k - cos g_i cos g_j) / (sin g_i sin g_j).

    With signed sines the value does not depend on which of the two
    equivalent directions each pair's common line was stored with.
    Returns ``(cos_theta, feasible)`` of shape ``(n, n, n)`` indexed ``[i, j, k]``.
    """
    n = C.shape[0]
    gi = C[:, None, :] - C[:, :, None]
    gj = C[None, :, :] - C.T[:, :, None]
    gk = C.T[None, :, :] - C.T[:, None, :]
    den = np.sin(gi) * np.sin(gj)
    num = np.cos(gk) - np.cos(gi) * np.cos(gj)
    ok = np.abs(den) >= FEASIBLE_EPS
    cos_t = np.where(ok, num / np.where(ok, den, 1.0), np.nan)
    ok &= np.abs(cos_t) <= 1.0
    idx = np.arange(n)
    distinct = (idx[:, None, None] != idx[None, :, None]) & (idx[:, None, None] != idx[None, None, :]) \
        & (idx[None, :, None] != idx[None, None, :])
    ok &= distinct
    if valid is not None:
        ok &= valid[:, :, None] & valid[:, None, :] & valid.T[None, :, :]
    return np.where(ok, cos_t, np.nan), ok


def _kernel_hist(votes, mask, t, sigma, norm):
    z = (votes[:, :, None] - t[None, None, :]) / sigma
    return (np.exp(-0.5 * z * z) * mask[:, :, None]).sum(axis=1) / (norm * sigma * np.sqrt(2 * np.pi))


def _refine_peaks(votes, mask, t0, sigma, half_width, iters=20):
    """Safeguarded Newton ascent of the kernel sum around each grid peak."""
    t = t0.copy()
    lo, hi = np.maximum(t0 - half_width, 0.0), np.minimum(t0 + half_width, np.pi)
    for _ in range(iters):
        z = (votes - t[:, None]) / sigma
        g = np.exp(-0.5 * z * z) * mask
        d1 = (g * z).sum(axis=1) / sigma
        d2 = (g * (z * z - 1)).sum(axis=1) / sigma**2
        step = np.where(d2 < 0, -d1 / np.where(d2 < 0, d2, -1.0), 0.0)
        t = np.clip(t + step, lo, hi)
        if np.max(np.abs(step)) < 1e-13:
            break
    return t


def vote_histogram(votes: np.ndarray, sigma: float, t: np.ndarray, norm: float) -> np.ndarray:
    """Kernel histogram ``(1/norm) sum_k N(votes_k - t; sigma)`` for one pair."""
    votes = np.asarray(votes, dtype=float)
    return _kernel_hist(votes[None], np.ones((1, votes.size)), np.asarray(t, dtype=float), sigma, norm)[0]


def vote_dihedrals(cl: CommonLineTable, T: int = DEFAULT_T, chunk: int = 4096) -> DihedralTable:
    """Dihedral angle per pair as the peak of a Gaussian-kernel vote histogram.

    Every third image ``k`` votes ``arccos`` of its triplet candidate; the
    histogram is searched on a ``pi / (4 T)`` grid over ``[0, pi]`` and the
    peak is then polished by Newton steps inside one grid cell. ``W`` is the
    peak height, normalised by ``n - 2``.
    """
    n = cl.n
    if n < 3:
        raise ValueError("voting needs at least 3 projections")
    if T < 18:
        raise ValueError("T must be >= 18")
    sigma = np.pi / T
    valid = ~cl.degenerate_mask
    np.fill_diagonal(valid, True)
    cos_t, ok = triplet_dihedral_cosines(cl.C, valid)
    votes_all = np.arccos(np.clip(np.nan_to_num(cos_t), -1.0, 1.0))

    iu, ju = np.triu_indices(n, 1)
    grid = np.linspace(0.0, np.pi, 4 * T + 1)
    theta = np.full((n, n), np.pi / 2)
    W = np.zeros((n, n))
    n_votes = np.zeros((n, n), dtype=int)
    for s in range(0, len(iu), chunk):
        a, b = iu[s:s + chunk], ju[s:s + chunk]
        votes = votes_all[a, b]
        mask = ok[a, b].astype(float)
        hist = _kernel_hist(votes, mask, grid, sigma, n - 2)
        t0 = grid[hist.argmax(axis=1)]
        t = _refine_peaks(votes, mask, t0, sigma, np.pi / (4 * T))
        z = (votes - t[:, None]) / sigma
        peak = (np.exp(-0.5 * z * z) * mask).sum(axis=1) / ((n - 2) * sigma * np.sqrt(2 * np.pi))
        worse = peak < hist.max(axis=1)
        t[worse], peak[worse] = t0[worse], hist.max(axis=1)[worse]
        cnt = mask.sum(axis=1).astype(int)
        none = cnt == 0
        t[none] = np.pi / 2
        peak[none] = 0.0
        theta[a, b] = theta[b, a] = t
        W[a, b] = W[b, a] = peak
        n_votes[a, b] = n_votes[b, a] = cnt
    np.fill_diagonal(theta, 0.0)
    np.fill_diagonal(W, 0.0)
    return DihedralTable(theta, W, T, n_votes)


def write_commonlines_csv(path, cl: CommonLineTable, dih: Optional[DihedralTable] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "c_ij", "c_ji", "ncc", "theta_ij", "W_ij"])
        for i in range(cl.n):
            for j in range(i + 1, cl.n):
                th = dih.theta[i, j] if dih is not None else ""
                wt = dih.W[i, j] if dih is not None else ""
                w.writerow([i, j, cl.cl_index[i, j], cl.cl_index[j, i], repr(float(cl.ncc[i, j])),
                            repr(float(th)) if th != "" else "", repr(float(wt)) if wt != "" else ""])
