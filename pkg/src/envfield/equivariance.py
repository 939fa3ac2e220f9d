"""Rotation-invariant inputs for the spherical field.

A latent code ``Z`` is an ordered list of N 3D vectors stored as a ``(..., 3, N)``
tensor, so a rotation acts on it from the left.  Each mode turns a direction and
a latent into features that a joint rotation of both cannot change:

``so3``   any rotation; features ``Z^T d`` and ``VN-In(Z)``.
``so2``   rotations about an axis ``a`` (default +y); see :func:`so2_invariant_inputs`.
``none``  no invariance (ablation); raw ``d`` and raw ``Z``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch

from . import geometry

MODES = ("so2", "so3", "none")


class InvariantInputs(NamedTuple):
    dir_features: torch.Tensor  # (..., F)
    cond_features: torch.Tensor  # (..., 3, N)


def dir_feature_size(mode: str, n_latent: int) -> int:
    return {"so3": n_latent, "so2": n_latent + 2, "none": 3}[mode]


def vn_invariant(Z: torch.Tensor, W_f: torch.Tensor) -> torch.Tensor:
    """Vector-neuron invariant layer with one learned linear frame.

    ``F = Z W_f`` is an m x m frame built from the m x N code; ``F^T Z`` is then
    unchanged by any orthogonal ``Q`` acting as ``Z -> Q Z``.  Quadratic in Z.
    """
    frame = Z @ W_f
    return frame.transpose(-1, -2) @ Z


def so3_invariant_inputs(d: torch.Tensor, Z: torch.Tensor, W_f: torch.Tensor) -> InvariantInputs:
    dir_features = (d.unsqueeze(-2) @ Z).squeeze(-2)
    return InvariantInputs(dir_features, vn_invariant(Z, W_f))


def planar_frame(axis=geometry.E_Y, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(3, 3)`` rotation taking ``axis`` onto e_x, as a tensor."""
    return torch.as_tensor(geometry.rotation_a_to_ex(axis), dtype=dtype, device=device)


def so2_direction_features(d: torch.Tensor, Z: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
    """(proj_a d, <d_perp, Z_perp> per column, |d_perp|), length N + 2."""
    d_local = d @ frame.T
    Z_perp = (frame @ Z)[..., 1:, :]
    d_axial, d_perp = d_local[..., :1], d_local[..., 1:]
    inner = (d_perp.unsqueeze(-2) @ Z_perp).squeeze(-2)
    # clamp keeps the derivative of sqrt finite when d is parallel to the axis
    perp_norm = torch.sqrt(torch.clamp(d_perp.square().sum(-1, keepdim=True), min=1e-12))
    return torch.cat([d_axial, inner, perp_norm], dim=-1)


def so2_conditioning(Z: torch.Tensor, W_f2: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
    """proj_a Z (1 x N) stacked on VN-In of the planar part (2 x N)."""
    Z_local = frame @ Z
    return torch.cat([Z_local[..., :1, :], vn_invariant(Z_local[..., 1:, :], W_f2)], dim=-2)


def so2_invariant_inputs(
    d: torch.Tensor, Z: torch.Tensor, W_f2: torch.Tensor, frame: torch.Tensor | None = None
) -> InvariantInputs:
    """Features invariant to rotations about the axis that ``frame`` maps to e_x (default +y)."""
    if frame is None:
        frame = planar_frame(dtype=d.dtype, device=d.device)
    return InvariantInputs(so2_direction_features(d, Z, frame), so2_conditioning(Z, W_f2, frame))


def raw_inputs(d: torch.Tensor, Z: torch.Tensor) -> InvariantInputs:
    return InvariantInputs(d, Z)


def invariant_inputs(mode: str, d: torch.Tensor, Z: torch.Tensor, W_f: torch.Tensor | None, frame=None) -> InvariantInputs:
    if mode == "so3":
        return so3_invariant_inputs(d, Z, W_f)
    if mode == "so2":
        return so2_invariant_inputs(d, Z, W_f, frame)
    if mode == "none":
        return raw_inputs(d, Z)
    raise ValueError(f"unknown equivariance mode {mode!r}; expected one of {MODES}")


def rotate_latent(Z, R):
    """Left action ``R Z`` of a rotation on every latent column."""
    R_np = R.detach().cpu().numpy() if isinstance(R, torch.Tensor) else np.asarray(R)
    if not geometry.is_rotation(R_np, tol=1e-5):
        raise ValueError("R is not a rotation matrix (needs R^T R = I and det R = +1)")
    if isinstance(Z, torch.Tensor):
        return torch.as_tensor(R_np, dtype=Z.dtype, device=Z.device) @ Z
    return R_np @ np.asarray(Z)


def vec(Z):
    """Column-major flattening: ``(..., 3, N) -> (..., 3N)`` as [z_1; z_2; ...; z_N]."""
    return Z.swapaxes(-1, -2).reshape(*Z.shape[:-2], -1)


def unvec(v, n_latent: int | None = None):
    """Inverse of :func:`vec`: ``(..., 3N) -> (..., 3, N)``."""
    n = v.shape[-1] // 3 if n_latent is None else n_latent
    if v.shape[-1] != 3 * n:
        raise ValueError(f"flat latent of length {v.shape[-1]} is not 3 x {n}")
    return v.reshape(*v.shape[:-1], n, 3).swapaxes(-1, -2)
