"""Test-time latent fitting, exposure alignment, interpolation and rotation recovery."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from . import geometry, hdr_io
from .equivariance import unvec
from .field import SphericalField
from .losses import LossWeights, test_loss


@dataclass
class FitConfig:
    steps: int = 2500
    lr_start: float = 1e-1
    lr_end: float = 1e-7
    rho: float = 1.0
    gamma: float = 1.0
    batch_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_end < self.lr_start:
            raise ValueError(f"need 0 < lr_end < lr_start, got {self.lr_end} and {self.lr_start}")
        if self.steps < 1:
            raise ValueError("steps must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.rho, self.gamma, 0.0)

    def lr(self, step: int) -> float:
        """Exponential decay: ``lr_start`` at step 0, ``lr_end`` at ``steps``."""
        return self.lr_start * (self.lr_end / self.lr_start) ** (step / self.steps)


@dataclass
class FitResult:
    Z: torch.Tensor  # (3, N), detached
    history: list

    def losses(self) -> np.ndarray:
        return np.array([h["total"] for h in self.history])


def fit_latent(model: SphericalField, image: hdr_io.EnvironmentImage, config: FitConfig | None = None, mask=None) -> FitResult:
    """Optimise a single code against ``image`` with the decoder frozen.

    ``mask`` (H x W bool, True = observed) overrides ``image.mask``.  Only
    observed directions are sampled, so hidden regions are filled in by the
    learned prior.
    """
    config = config or FitConfig()
    if mask is not None:
        image = image.with_mask(mask)
    if image.mask is not None and not image.mask.any():
        raise ValueError("mask hides every pixel; nothing to fit")
    rng = np.random.default_rng(config.seed)
    dtype = next(model.parameters()).dtype
    was_training = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    Z = torch.zeros(3, model.n_latent, dtype=dtype, requires_grad=True)
    opt = torch.optim.Adam([Z], lr=config.lr_start)
    pixels = image.pixels.astype(np.float64)
    history = []
    try:
        for step in range(config.steps):
            lr = config.lr(step)
            for g in opt.param_groups:
                g["lr"] = lr
            d = hdr_io.sample_observed_directions(image, config.batch_size, rng)
            target = torch.from_numpy(hdr_io.log_radiance(hdr_io.bilinear_lookup(pixels, d, image.mask))).to(dtype)
            pred = model(torch.from_numpy(d).to(dtype), Z)
            terms = test_loss(pred, target, config.weights)
            if not torch.isfinite(terms["total"]):
                raise FloatingPointError(f"fitting loss became non-finite at step {step}")
            opt.zero_grad(set_to_none=True)
            terms["total"].backward()
            opt.step()
            history.append({"step": step, "lr": lr, **{k: float(v.detach()) for k, v in terms.items()}})
    finally:
        for p, flag in zip(model.parameters(), was_training):
            p.requires_grad_(flag)
    return FitResult(Z.detach().clone(), history)


def optimal_scale(pred_log, target_log, mask=None) -> float:
    """Least-squares log offset ``b`` so that ``pred_log + b`` best matches ``target_log``.

    ``mask`` selects observed samples along the leading axes (e.g. an H x W
    mask for H x W x 3 images).
    """
    diff = np.asarray(target_log, dtype=np.float64) - np.asarray(pred_log, dtype=np.float64)
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    if diff.size == 0:
        raise ValueError("optimal_scale needs at least one observed sample")
    return float(diff.mean())


def interpolate(Z_a, Z_b, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * Z_a + t * Z_b


def sample_prior(n_latent: int, rng, dtype=torch.float32) -> torch.Tensor:
    """One code with ``vec(Z) ~ N(0, I)``."""
    rng = np.random.default_rng(rng)
    return unvec(torch.as_tensor(rng.standard_normal(3 * n_latent), dtype=dtype), n_latent)


class Alignment(NamedTuple):
    M: np.ndarray  # least-squares 3 x 3 map, M @ Z_unrot ~ Z_rot
    R: np.ndarray  # nearest rotation to M
    E: float  # relative Frobenius residual of R
    rank_deficient: bool  # True when Z_unrot has rank < 3 and M came from a pseudo-inverse


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ S @ Vt


def rotation_alignment(Z_unrot, Z_rot) -> Alignment:
    """Recover the rotation taking one latent code onto another.

    Both codes are 3 x N and rotations act from the left, so the linear map is
    placed on the left as well.
    """
    A = np.asarray(Z_unrot.detach() if isinstance(Z_unrot, torch.Tensor) else Z_unrot, dtype=np.float64)
    B = np.asarray(Z_rot.detach() if isinstance(Z_rot, torch.Tensor) else Z_rot, dtype=np.float64)
    if A.shape != B.shape or A.shape[0] != 3:
        raise ValueError(f"codes must both be 3 x N, got {A.shape} and {B.shape}")
    rank_deficient = np.linalg.matrix_rank(A) < 3
    M = B @ np.linalg.pinv(A)
    R = nearest_rotation(M)
    norm = np.linalg.norm(B)
    E = float(np.linalg.norm(R @ A - B) / norm) if norm > 0 else float(np.linalg.norm(R @ A - B))
    return Alignment(M, R, E, bool(rank_deficient))


def ground_truth_discrepancy(R_true: np.ndarray, Z_unrot, Z_rot) -> float:
    """``||R_true Z_unrot - Z_rot|| / ||Z_rot||``: how far a fit is from exact equivariance."""
    A = np.asarray(Z_unrot, dtype=np.float64)
    B = np.asarray(Z_rot, dtype=np.float64)
    return float(np.linalg.norm(R_true @ A - B) / np.linalg.norm(B))


def max_radiance_direction(log_image: np.ndarray) -> np.ndarray:
    lum = log_image.mean(axis=-1)
    r, c = np.unravel_index(np.argmax(lum), lum.shape)
    return geometry.pixel_to_direction(r, c, *lum.shape)
