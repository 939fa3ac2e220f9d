"""Rotations, projections and equirectangular sampling on the unit sphere.

Conventions used throughout the package:

* right-handed rotations (counter-clockwise looking down the axis toward the origin);
* y is up; the polar angle ``phi`` is measured from +y and the azimuth ``theta``
  from +x toward +z, so ``d = (sin(phi) cos(theta), cos(phi), sin(phi) sin(theta))``;
* equirectangular pixel ``(row, col)`` has its centre at
  ``phi = pi (row + 0.5) / H`` and ``theta = 2 pi (col + 0.5) / W``.

Direction arrays are batch-first, shape ``(..., 3)``.
"""

from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-6

E_X = np.array([1.0, 0.0, 0.0])
E_Y = np.array([0.0, 1.0, 0.0])
E_Z = np.array([0.0, 0.0, 1.0])


def _check_unit(v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ValueError(f"{name} must have a trailing dimension of 3, got shape {v.shape}")
    n = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} must be unit length (|{name}| = {np.max(np.abs(n - 1.0)) + 1:.8g})")
    return v


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a right-handed turn of ``angle`` radians."""
    k = _check_unit(axis, "axis")
    kx, ky, kz = k
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    c, s = np.cos(angle), np.sin(angle)
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def rotation_y(angle: float) -> np.ndarray:
    return rotation_about_axis(E_Y, angle)


def is_rotation(R, tol: float = UNIT_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape not in ((3, 3), (2, 2)):
        return False
    eye = np.eye(R.shape[0])
    return bool(np.allclose(R.T @ R, eye, atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (QR of a Gaussian matrix with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotation_a_to_ex(a) -> np.ndarray:
    """Minimal-angle rotation taking the unit vector ``a`` onto e_x.

    For ``a = -e_x`` the axis is undefined; a half turn about e_y is used.
    """
    a = _check_unit(a, "a")
    axis = np.cross(a, E_X)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, E_X))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return rotation_about_axis(E_Y, np.pi)
    return rotation_about_axis(axis / s, np.arctan2(s, c))


def scalar_projection(b, a) -> np.ndarray:
    """Component of ``b`` along ``a`` (unchanged by rotations about ``a``)."""
    a = _check_unit(a, "a")
    return np.sum(np.asarray(b, dtype=np.float64) * a, axis=-1)


def vector_rejection_2d(b, a) -> np.ndarray:
    """2D coordinates of ``b`` in the plane orthogonal to ``a``.

    Rows two and three of ``rotation_a_to_ex(a) @ b``.
    """
    R = rotation_a_to_ex(a)
    return (np.asarray(b, dtype=np.float64) @ R.T)[..., 1:]


def spherical_to_direction(phi, theta) -> np.ndarray:
    phi, theta = np.broadcast_arrays(np.asarray(phi, dtype=np.float64), np.asarray(theta, dtype=np.float64))
    sp = np.sin(phi)
    return np.stack([sp * np.cos(theta), np.cos(phi), sp * np.sin(theta)], axis=-1)


def direction_to_spherical(d) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    phi = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    theta = np.mod(np.arctan2(d[..., 2], d[..., 0]), 2.0 * np.pi)
    return phi, theta


def polar_from_uniform(u) -> np.ndarray:
    """Inverse CDF of the polar density sin(phi)/2 on [0, pi]."""
    return np.arccos(np.clip(1.0 - 2.0 * np.asarray(u, dtype=np.float64), -1.0, 1.0))


def sample_directions(count: int, rng) -> np.ndarray:
    """``count`` directions uniform in solid angle, shape ``(count, 3)``.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(rng)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    phi = polar_from_uniform(rng.uniform(0.0, 1.0, size=count))
    return spherical_to_direction(phi, theta)


def pixel_to_direction(row, col, H: int, W: int) -> np.ndarray:
    phi = np.pi * (np.asarray(row, dtype=np.float64) + 0.5) / H
    theta = 2.0 * np.pi * (np.asarray(col, dtype=np.float64) + 0.5) / W
    return spherical_to_direction(phi, theta)


def direction_to_pixel(d, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (row, col) coordinates; integers at pixel centres."""
    phi, theta = direction_to_spherical(d)
    return phi * H / np.pi - 0.5, theta * W / (2.0 * np.pi) - 0.5


def equirect_directions(H: int, W: int) -> np.ndarray:
    """Pixel-centre directions of an H x W equirectangular grid, shape ``(H, W, 3)``."""
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return pixel_to_direction(rows, cols, H, W)


def pixel_solid_angles(H: int, W: int) -> np.ndarray:
    """Exact solid angle of every pixel of an equirectangular grid, shape ``(H, W)``.

    Each row spans the band between its polar edges, so the weights sum to 4 pi.
    """
    edges = np.cos(np.pi * np.arange(H + 1) / H)
    band = (2.0 * np.pi / W) * (edges[:-1] - edges[1:])
    return np.repeat(band[:, None], W, axis=1)


def fejer_weights(H: int) -> np.ndarray:
    """Fejer first-rule weights for the pixel-centre rows, integrating over cos(phi) in [-1, 1].

    The rows of an equirectangular grid sit exactly on this rule's nodes, so
    polynomials in cos(phi) of degree below H integrate without error.
    """
    phi = np.pi * (np.arange(H) + 0.5) / H
    k = np.arange(1, H // 2 + 1)
    series = (np.cos(2.0 * np.outer(phi, k)) / (4.0 * k * k - 1.0)).sum(axis=1)
    return (2.0 / H) * (1.0 - 2.0 * series)


def quadrature_weights(H: int, W: int) -> np.ndarray:
    """Per-pixel weights for integrating over the sphere, shape ``(H, W)``, summing to 4 pi.

    Exact for band-limited signals of degree below H (rows) and W/2 (azimuth).
    """
    return np.repeat((2.0 * np.pi / W) * fejer_weights(H)[:, None], W, axis=1)
