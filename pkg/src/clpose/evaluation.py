"""Scoring against ground truth: global alignment with chirality, pose and
shift error metrics, FSC, and a gridding reconstructor for sanity volumes."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from .simdata import ProjectionStack, Volume, apply_shift

J_FLIP = np.diag([1.0, 1.0, -1.0])


@dataclass
class AlignmentResult:
    G: np.ndarray
    reflected: bool
    errors_deg: np.ndarray
    aligned: np.ndarray  # estimated rotations mapped onto the truth frame


@dataclass
class MetricReport:
    theta_mae: float
    phi_mae: float
    inplane_err_deg: float
    normal_err_deg: float
    euler_mse: tuple
    shift_rms_px: Optional[float] = None

    def as_row(self) -> dict:
        row = asdict(self)
        a, b, g = row.pop("euler_mse")
        row.update(euler_mse_alpha=a, euler_mse_beta=b, euler_mse_gamma=g)
        return row

    def write_csv(self, path) -> None:
        row = self.as_row()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(row))
            w.writerow(["" if v is None else repr(float(v)) for v in row.values()])

    def pretty(self) -> str:
        a, b, g = self.euler_mse
        lines = [
            f"theta_ij error (MAE, rad)    {self.theta_mae:.5f}",
            f"phi_ij error (MAE, rad)      {self.phi_mae:.5f}",
            f"in-plane rotation error (deg) {self.inplane_err_deg:.3f}",
            f"normal vector error (deg)     {self.normal_err_deg:.3f}",
            f"Euler ZYZ error (MSE)         alpha {a:.3g}  beta {b:.3g}  gamma {g:.3g}",
        ]
        if self.shift_rms_px is not None:
            lines.append(f"shift error (RMS, px)         {self.shift_rms_px:.3f}")
        return "\n".join(lines)


def rotation_angle_deg(Ra, Rb) -> np.ndarray:
    """Geodesic angle between rotations, degrees."""
    M = np.einsum("nji,njk->nik", np.asarray(Ra).reshape(-1, 3, 3), np.asarray(Rb).reshape(-1, 3, 3))
    c = (np.trace(M, axis1=1, axis2=2) - 1) / 2
    # atan2 form stays accurate near 0 where arccos loses half the digits
    w = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], -1)
    return np.rad2deg(np.arctan2(np.linalg.norm(w, axis=-1) / 2, c))


def _procrustes(est, truth):
    """Proper ``G`` minimizing ``sum ||G est_i - truth_i||_F^2``."""
    M = np.einsum("nij,nkj->ik", truth, est)
    U, _, Vt = np.linalg.svd(M)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ S @ Vt


def align_global(est, truth) -> AlignmentResult:
    """Best global rotation, trying ``est`` and its mirror ``J est J``."""
    est = np.asarray(est, dtype=float).reshape(-1, 3, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3, 3)
    if len(est) != len(truth) or len(est) < 2:
        raise ValueError("need two equal-length rotation lists of length >= 2")
    best = None
    for reflected in (False, True):
        cand = J_FLIP @ est @ J_FLIP if reflected else est
        G = _procrustes(cand, truth)
        aligned = G @ cand
        cost = float(np.sum((aligned - truth) ** 2))
        if best is None or cost < best[0] - 1e-12:
            best = (cost, G, reflected, aligned)
    _, G, reflected, aligned = best
    return AlignmentResult(G, reflected, rotation_angle_deg(aligned, truth), aligned)


def _pair_angles(V):
    iu = np.triu_indices(len(V), 1)
    return np.arccos(np.clip((V @ V.T)[iu], -1.0, 1.0))


def _min_rotation(a, b):
    """Rotation taking unit vector ``a`` to unit vector ``b`` along the great circle."""
    v = np.cross(a, b)
    s, c = np.linalg.norm(v), float(a @ b)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        perp = np.eye(3)[np.argmin(np.abs(a))]
        axis = np.cross(a, perp)
        return _ScipyRotation.from_rotvec(np.pi * axis / np.linalg.norm(axis)).as_matrix()
    return _ScipyRotation.from_rotvec(v / s * np.arctan2(s, c)).as_matrix()


def inplane_errors_deg(est, truth) -> np.ndarray:
    """Residual in-plane rotation after bringing each estimated ``d`` onto the true one."""
    out = np.empty(len(est))
    for i, (Re, Rt) in enumerate(zip(est, truth)):
        M = _min_rotation(Re[:, 2], Rt[:, 2])
        q = M @ Re[:, 0]
        qt, d = Rt[:, 0], Rt[:, 2]
        out[i] = abs(np.degrees(np.arctan2(np.cross(qt, q) @ d, qt @ q)))
    return out


def _wrap(a):
    return -((-a + np.pi) % (2 * np.pi) - np.pi)  # (-pi, pi]


def euler_zyz(R) -> np.ndarray:
    return _ScipyRotation.from_matrix(np.asarray(R).reshape(-1, 3, 3)).as_euler("ZYZ")


def metrics(est, truth, est_shifts=None, true_shifts=None, shift_basis=None) -> MetricReport:
    """Error report for already-aligned rotations.

    ``shift_basis`` (orthonormal columns spanning the observable shift
    subspace, in the flattened ``(dx1, dy1, ...)`` layout) restricts the shift
    RMS to the part that common lines can determine.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3, 3)
    De, Dt = est[:, :, 2], truth[:, :, 2]
    Qe, Qt = est[:, :, 0], truth[:, :, 0]
    theta_mae = float(np.mean(np.abs(_pair_angles(De) - _pair_angles(Dt))))
    phi_mae = float(np.mean(np.abs(_pair_angles(Qe) - _pair_angles(Qt))))
    normal = np.degrees(np.arctan2(np.linalg.norm(np.cross(De, Dt), axis=1), np.einsum("ij,ij->i", De, Dt)))
    inplane = inplane_errors_deg(est, truth)
    de = _wrap(euler_zyz(est) - euler_zyz(truth))
    euler_mse = tuple(float(v) for v in np.mean(de**2, axis=0))
    shift_rms = None
    if est_shifts is not None and true_shifts is not None:
        diff = (np.asarray(est_shifts, dtype=float) - np.asarray(true_shifts, dtype=float)).ravel()
        if shift_basis is not None:
            diff = shift_basis @ (shift_basis.T @ diff)
        shift_rms = float(np.sqrt(np.mean(diff.reshape(-1, 2) ** 2) * 2)) if diff.size else 0.0
    return MetricReport(theta_mae, phi_mae, float(inplane.mean()), float(normal.mean()),
                        euler_mse, shift_rms)


@dataclass
class FscCurve:
    freqs: np.ndarray  # shell centres, cycles/voxel
    fsc: np.ndarray
    empty: np.ndarray  # shells without any Fourier sample

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency", "fsc"])
            for f, c in zip(self.freqs, self.fsc):
                w.writerow([repr(float(f)), repr(float(c))])

    def resolution_ok(self, threshold: float, up_to: float) -> bool:
        sel = self.freqs <= up_to + 1e-12
        return bool(np.all(self.fsc[sel] >= threshold))


def fsc(v1, v2, n_shells: Optional[int] = None) -> FscCurve:
    """Fourier shell correlation on one-voxel-wide shells."""
    a = v1.data if isinstance(v1, Volume) else np.asarray(v1, dtype=float)
    b = v2.data if isinstance(v2, Volume) else np.asarray(v2, dtype=float)
    if a.shape != b.shape:
        raise ValueError("volumes must have the same shape")
    side = a.shape[0]
    n_shells = side // 2 if n_shells is None else n_shells
    F1, F2 = np.fft.fftn(a), np.fft.fftn(b)
    k = np.fft.fftfreq(side) * side
    r = np.sqrt(k[:, None, None] ** 2 + k[None, :, None] ** 2 + k[None, None, :] ** 2)
    shell = np.rint(r).astype(int).ravel()
    keep = shell < n_shells
    shell = shell[keep]
    cross = np.bincount(shell, (F1 * F2.conj()).real.ravel()[keep], minlength=n_shells)
    p1 = np.bincount(shell, (np.abs(F1) ** 2).ravel()[keep], minlength=n_shells)
    p2 = np.bincount(shell, (np.abs(F2) ** 2).ravel()[keep], minlength=n_shells)
    den = np.sqrt(p1 * p2)
    empty = den <= 0
    curve = np.where(empty, 0.0, cross / np.where(empty, 1.0, den))
    return FscCurve(np.arange(n_shells) / side, np.clip(curve, -1.0, 1.0), empty)


def gridding_reconstruct(stack, poses, shifts=None, pad: int = 2) -> Volume:
    """Central-slice insertion with nearest-neighbour gridding.

    Each image is shift-corrected, zero-padded by ``pad`` and transformed;
    its Fourier samples land on the nearest voxel of a ``pad * side`` cube,
    every voxel keeps the mean of what it received, and the inverse transform
    is cropped back to ``side``. Contributions are summed in a canonical order
    (sorted by voxel and value), so the result does not depend on the order
    of the projections.
    """
    images = stack.images if isinstance(stack, ProjectionStack) else np.asarray(stack, dtype=float)
    poses = np.asarray(poses, dtype=float).reshape(-1, 3, 3)
    n, side = images.shape[0], images.shape[1]
    if n < 10:
        raise ValueError("gridding reconstruction needs at least 10 projections")
    P = pad * side
    lo = (P - side) // 2
    k = np.fft.fftfreq(P) * P  # frequency index on the padded grid
    kx, ky = np.meshgrid(k, k)  # [row, col] -> (ky, kx)
    keep = np.sqrt(kx**2 + ky**2) <= P // 2 - 1
    kx, ky = kx[keep], ky[keep]
    vox_list, val_list = [], []
    for i in range(n):
        img = images[i]
        if shifts is not None:
            dx, dy = np.asarray(shifts, dtype=float).reshape(-1, 2)[i]
            img = apply_shift(img, -dx, -dy, check_bound=False)
        padded = np.zeros((P, P))
        padded[lo:lo + side, lo:lo + side] = img
        # origin of the image grid sits at index side//2 -> P//2 after padding
        F = np.fft.fft2(np.fft.ifftshift(padded))[keep]
        q, y, _ = poses[i].T
        K = kx[:, None] * q + ky[:, None] * y  # lab frequency (x, y, z) in padded units
        idx = np.rint(K).astype(int) % P
        vox_list.append((idx[:, 2] * P + idx[:, 1]) * P + idx[:, 0])  # (z, y, x) flat
        val_list.append(F)
    vox = np.concatenate(vox_list)
    val = np.concatenate(val_list)
    order = np.lexsort((val.imag, val.real, vox))
    vox, val = vox[order], val[order]
    sums_re = np.bincount(vox, val.real, minlength=P**3)
    sums_im = np.bincount(vox, val.imag, minlength=P**3)
    counts = np.bincount(vox, minlength=P**3)
    grid = np.where(counts > 0, (sums_re + 1j * sums_im) / np.maximum(counts, 1), 0.0).reshape(P, P, P)
    vol = np.fft.fftshift(np.fft.ifftn(grid).real)
    return Volume(vol[lo:lo + side, lo:lo + side, lo:lo + side])
