"""Polar Fourier rays of projection images.

Ray ``l`` (0-based here, ``l + 1`` in the 1-based indices used by the common
line tables) points along ``theta_l = pi * l / n_theta`` measured from the
image x-axis towards the image y-axis. Its samples are the 2D Fourier integral

    F(f, theta) = sum_{u, v} h(v, u) exp(-2 pi i f (u cos theta + v sin theta))

at the radial frequencies ``freqs`` (cycles/pixel). Rays over ``[pi, 2 pi)``
are the complex conjugates of the stored half (real images).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .simdata import ProjectionStack, grid_coords

DEFAULT_N_THETA = 180
DEFAULT_RMAX = 0.35


@dataclass(frozen=True)
class PolarStack:
    rays: np.ndarray  # (n, n_theta, n_r) complex
    freqs: np.ndarray  # (n_r,) cycles/pixel, strictly increasing, no DC
    side: int
    rmax: float = DEFAULT_RMAX
    corrected: bool = False

    @property
    def n(self) -> int:
        return self.rays.shape[0]

    @property
    def n_theta(self) -> int:
        return self.rays.shape[1]

    @property
    def n_r(self) -> int:
        return self.rays.shape[2]

    @property
    def thetas(self) -> np.ndarray:
        return np.pi * np.arange(self.n_theta) / self.n_theta

    def full_rays(self) -> np.ndarray:
        """All ``2 n_theta`` rays per image, conjugate half appended."""
        return np.concatenate([self.rays, self.rays.conj()], axis=1)


def frequency_grid(side: int, n_r: int, rmax: float = DEFAULT_RMAX) -> np.ndarray:
    """``n_r`` uniform radial frequencies on ``[2/side, rmax]``."""
    fmin = 2.0 / side
    if not fmin < rmax <= 0.5:
        raise ValueError(f"rmax must lie in ({fmin}, 0.5]")
    return np.linspace(fmin, rmax, n_r)


def support_mask(side: int, radius: float, edge: float = 0.05) -> np.ndarray:
    """Disk of ``radius`` (fraction of ``side``) with a raised-cosine edge of
    width ``edge``; 1 inside, 0 beyond ``radius + edge``."""
    if not 0 < radius <= 0.5:
        raise ValueError("mask radius must lie in (0, 0.5]")
    c = grid_coords(side)
    r = np.hypot(c[:, None], c[None, :]) / side
    t = np.clip((r - radius) / edge, 0.0, 1.0)
    return 0.5 * (1 + np.cos(np.pi * t))


def polar_transform(stack, n_theta: int = DEFAULT_N_THETA, n_r: int | None = None,
                    rmax: float = DEFAULT_RMAX, mask_radius: float | None = None) -> PolarStack:
    """Direct (non-uniform) Fourier sums of every image on a polar grid.

    The kernel separates into x and y factors, so each image costs one
    ``side x side`` by ``side x M`` product plus a row reduction. With
    ``mask_radius`` set, images are first multiplied by :func:`support_mask`,
    which removes the noise outside the particle at no cost to the signal as
    long as the (shifted) particle fits inside the disk.
    """
    images = stack.images if isinstance(stack, ProjectionStack) else np.asarray(stack, dtype=float)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"images must be square, got shape {images.shape[1:]}")
    if n_theta % 2 or n_theta < 2:
        raise ValueError("n_theta must be even")
    side = images.shape[1]
    n_r = side // 2 if n_r is None else n_r
    if n_r < 2:
        raise ValueError("n_r must be >= 2")
    freqs = frequency_grid(side, n_r, rmax)
    if mask_radius is not None:
        images = images * support_mask(side, mask_radius)
    thetas = np.pi * np.arange(n_theta) / n_theta
    kx = (freqs[None, :] * np.cos(thetas)[:, None]).ravel()
    ky = (freqs[None, :] * np.sin(thetas)[:, None]).ravel()
    c = grid_coords(side)
    ex = np.exp(-2j * np.pi * np.outer(c, kx))  # (side_u, M)
    ey = np.exp(-2j * np.pi * np.outer(c, ky))  # (side_v, M)
    rays = np.empty((images.shape[0], n_theta * n_r), dtype=complex)
    for i, img in enumerate(images):
        rays[i] = np.einsum("vm,vm->m", ey, img @ ex)
    return PolarStack(rays.reshape(-1, n_theta, n_r), freqs, side, rmax)


def correction_phase(pol: PolarStack, shifts: np.ndarray) -> np.ndarray:
    """Unit-modulus factors that undo content displacements ``shifts`` (n x 2).

    The factor has the form ``exp(-2 pi i f (a sin theta + b cos theta))``
    with the per-image pair ``(a, b) = (-dy, -dx)``: the pair orders the
    row-axis component first and holds the recentering correction rather
    than the displacement. :func:`clpose.shiftfix.to_system_layout` uses the
    same pair as unknowns of the shift system.
    """
    shifts = np.asarray(shifts, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(shifts)):
        raise ValueError("shifts must be finite")
    a, b = -shifts[:, 1], -shifts[:, 0]
    th = pol.thetas
    proj = a[:, None] * np.sin(th)[None, :] + b[:, None] * np.cos(th)[None, :]  # (n, n_theta)
    return np.exp(-2j * np.pi * proj[:, :, None] * pol.freqs[None, None, :])


def phase_correct(pol: PolarStack, shifts: np.ndarray) -> PolarStack:
    """New stack with current shift estimates removed; ``pol`` is untouched."""
    shifts = np.asarray(shifts, dtype=float).reshape(-1, 2)
    if len(shifts) != pol.n:
        raise ValueError("one shift per image required")
    return replace(pol, rays=pol.rays * correction_phase(pol, shifts), corrected=True)


def extract_ray(pol: PolarStack, k: int, c: int) -> np.ndarray:
    """Ray ``c`` (1-based, ``1..2 n_theta``) of image ``k`` (0-based)."""
    if not 1 <= c <= 2 * pol.n_theta:
        raise IndexError(f"ray index {c} outside 1..{2 * pol.n_theta}")
    if c <= pol.n_theta:
        return pol.rays[k, c - 1].copy()
    return pol.rays[k, c - pol.n_theta - 1].conj()


def ray_angle(c, n_theta: int):
    """Angle in radians of 1-based ray index ``c`` (conjugate half adds pi)."""
    return np.pi * (np.asarray(c) - 1) / n_theta


def save_polar(path, pol: PolarStack) -> None:
    """Debug dump: ``CPP1`` header then complex64 rays. Not a stable format."""
    import struct

    header = struct.pack("<4s3I", b"CPP1", pol.n, pol.n_theta, pol.n_r).ljust(64, b"\0")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pol.freqs.astype("<f4").tobytes())
        fh.write(pol.rays.astype("<c8").tobytes())
