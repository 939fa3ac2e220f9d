"""Training, fitting and inverse-rendering objectives.

Predictions and targets are log-radiance tensors of shape ``(P, 3)`` unless
stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    rho: float = 1.0  # scale-invariant (or MSE) term
    gamma: float = 1.0  # cosine term
    beta: float = 1e-6  # KLD (or prior) term

    def __post_init__(self):
        for name in ("rho", "gamma", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")


TRAIN_WEIGHTS = LossWeights(1.0, 1.0, 1e-6)
FIT_WEIGHTS = LossWeights(1.0, 1.0, 0.0)
INVERSE_WEIGHTS = LossWeights(1e2, 1.0, 1e-3)


def scale_invariant_loss(pred: torch.Tensor, target: torch.Tensor, groups: torch.Tensor | None = None) -> torch.Tensor:
    """Population variance of the residuals ``pred - target`` over all channel-samples.

    Adding any constant to every log value (a global exposure change) leaves it
    unchanged.  With ``groups`` (one integer per row) the variance is taken
    within each group and pooled, weighted by group size, so each group may
    carry its own exposure.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError("scale-invariant loss of an empty batch")
    r = pred - target
    if groups is None:
        M = r.numel()
        return r.square().sum() / M - r.sum().square() / M**2
    r = r.reshape(r.shape[0], -1)
    G = int(groups.max()) + 1
    per_row = r.shape[1]
    sums = torch.zeros(G, dtype=r.dtype, device=r.device).index_add(0, groups, r.sum(1))
    counts = torch.zeros(G, dtype=r.dtype, device=r.device).index_add(
        0, groups, torch.full((r.shape[0],), float(per_row), dtype=r.dtype, device=r.device)
    )
    present = counts > 0
    between = (sums[present].square() / counts[present]).sum()
    return (r.square().sum() - between) / r.numel()


def cosine_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """One minus the mean cosine similarity of per-sample RGB vectors."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    pn = pred.norm(dim=-1).clamp_min(NORM_FLOOR)
    tn = target.norm(dim=-1).clamp_min(NORM_FLOOR)
    cos = (pred * target).sum(-1) / (pn * tn)
    return 1.0 - cos.mean()


def kld_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL divergence to N(0, I): summed over the K codes, averaged over the D dims."""
    mu = mu.reshape(-1, mu.shape[-1])
    logvar = logvar.reshape(-1, logvar.shape[-1])
    per_code = (1.0 + logvar - mu.square() - logvar.exp()).mean(dim=-1)
    return -0.5 * per_code.sum()


def prior_loss(Z: torch.Tensor) -> torch.Tensor:
    """Mean over codes of the squared Frobenius norm; ``Z`` is ``(3, N)`` or ``(K, 3, N)``."""
    if Z.dim() == 2:
        Z = Z.unsqueeze(0)
    return Z.square().sum(dim=(-2, -1)).mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (pred - target).square().mean()


def train_loss(pred, target, mu, logvar, weights: LossWeights = TRAIN_WEIGHTS, groups=None) -> dict[str, torch.Tensor]:
    terms = {
        "scale_inv": scale_invariant_loss(pred, target, groups),
        "cosine": cosine_loss(pred, target),
        "kld": kld_loss(mu, logvar),
    }
    terms["total"] = weights.rho * terms["scale_inv"] + weights.gamma * terms["cosine"] + weights.beta * terms["kld"]
    return terms


def test_loss(pred, target, weights: LossWeights = FIT_WEIGHTS) -> dict[str, torch.Tensor]:
    terms = {"scale_inv": scale_invariant_loss(pred, target), "cosine": cosine_loss(pred, target)}
    terms["total"] = weights.rho * terms["scale_inv"] + weights.gamma * terms["cosine"]
    return terms


def inverse_loss(render, target, Z=None, weights: LossWeights = INVERSE_WEIGHTS) -> dict[str, torch.Tensor]:
    """Linear-space MSE + cosine over rendered pixels ``(P, 3)``, plus the latent prior."""
    terms = {"mse": mse_loss(render, target), "cosine": cosine_loss(render, target)}
    terms["prior"] = prior_loss(Z) if Z is not None else render.new_zeros(())
    terms["total"] = weights.rho * terms["mse"] + weights.gamma * terms["cosine"] + weights.beta * terms["prior"]
    return terms


# pytest would otherwise try to collect test_loss as a test when imported into a test module
test_loss.__test__ = False
