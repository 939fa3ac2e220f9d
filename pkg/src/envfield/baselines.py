"""Spherical-harmonic and spherical-Gaussian environment representations.

Both use the package's y-up convention: the SH polar axis is +y and azimuth
is measured from +x towards +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry, hdr_io

MAX_SH_ORDER = 9


def sh_count(l_max: int) -> int:
    return (l_max + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * (l + 1) + m


def _legendre_table(x: np.ndarray, l_max: int) -> dict:
    """Associated Legendre P_l^m(x) for 0 <= m <= l <= l_max, without the Condon-Shortley phase."""
    P = {}
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.ones_like(x)
    for m in range(l_max + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * s
        P[m, m] = pmm
        if m < l_max:
            P[m + 1, m] = x * (2 * m + 1) * pmm
        for l in range(m + 2, l_max + 1):
            P[l, m] = ((2 * l - 1) * x * P[l - 1, m] - (l + m - 1) * P[l - 2, m]) / (l - m)
    return P


def sh_basis(d, l_max: int) -> np.ndarray:
    """Real orthonormal spherical harmonics at unit directions ``d`` (..., 3) -> (..., (l_max+1)^2).

    Ordered by ``l`` then ``m = -l..l``; ``m > 0`` carries cos(m t) and ``m < 0``
    carries sin(|m| t).
    """
    if not 0 <= l_max <= MAX_SH_ORDER:
        raise ValueError(f"SH order must be in [0, {MAX_SH_ORDER}], got {l_max}")
    d = np.asarray(d, dtype=np.float64)
    x = np.clip(d[..., 1], -1.0, 1.0)
    theta = np.arctan2(d[..., 2], d[..., 0])
    P = _legendre_table(x, l_max)
    out = np.empty(d.shape[:-1] + (sh_count(l_max),))
    for l in range(l_max + 1):
        for m in range(l + 1):
            K = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
            if m == 0:
                out[..., sh_index(l, 0)] = K * P[l, 0]
            else:
                out[..., sh_index(l, m)] = math.sqrt(2) * K * P[l, m] * np.cos(m * theta)
                out[..., sh_index(l, -m)] = math.sqrt(2) * K * P[l, m] * np.sin(m * theta)
    return out


@dataclass
class SHCoefficients:
    order: int
    coeffs: np.ndarray  # ((order+1)^2, 3)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (sh_count(self.order), 3):
            raise ValueError(f"order {self.order} needs {sh_count(self.order)} x 3 coefficients, got {self.coeffs.shape}")

    @property
    def dimension(self) -> int:
        return self.coeffs.size

    def tensors(self, prefix: str = "sh.") -> dict[str, np.ndarray]:
        return {prefix + "coeffs": self.coeffs}


def sh_order_for_dimension(D: int) -> int:
    """Order whose 3 (l+1)^2 coefficients match a latent size D (27 -> 2, 108 -> 5, ...)."""
    l = math.isqrt(D // 3) - 1
    if D % 3 or 3 * sh_count(l) != D:
        raise ValueError(f"D={D} is not 3 (l+1)^2 for any SH order")
    return l


def fit_sh(image, l_max: int) -> SHCoefficients:
    """Discrete projection onto the basis with exact spherical quadrature weights."""
    pixels = image.pixels if isinstance(image, hdr_io.EnvironmentImage) else np.asarray(image)
    H, W = pixels.shape[:2]
    Y = sh_basis(geometry.equirect_directions(H, W), l_max)  # (H, W, B)
    w = geometry.quadrature_weights(H, W)[..., None]
    coeffs = np.einsum("hwb,hwc->bc", Y * w, pixels.astype(np.float64))
    return SHCoefficients(l_max, coeffs)


def evaluate_sh(coeffs, d) -> np.ndarray | torch.Tensor:
    """Truncated series at directions ``d`` (..., 3).

    Accepts an :class:`SHCoefficients` or a raw ``(B, 3)`` array or tensor;
    a tensor input keeps the result differentiable in the coefficients.
    """
    if isinstance(coeffs, SHCoefficients):
        coeffs = coeffs.coeffs
    l_max = math.isqrt(coeffs.shape[0]) - 1
    Y = sh_basis(d, l_max)
    if isinstance(coeffs, torch.Tensor):
        return torch.as_tensor(Y, dtype=coeffs.dtype) @ coeffs
    return Y @ np.asarray(coeffs)


def render_sh(coeffs, H: int, W: int) -> np.ndarray:
    return evaluate_sh(coeffs, geometry.equirect_directions(H, W))


# -- spherical Gaussians -----------------------------------------------------


@dataclass
class SGLobes:
    amplitude: np.ndarray  # (K, 3), non-negative
    axis: np.ndarray  # (K, 3), unit
    sharpness: np.ndarray  # (K,), non-negative

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64).reshape(-1, 3)
        self.axis = np.asarray(self.axis, dtype=np.float64).reshape(-1, 3)
        self.sharpness = np.asarray(self.sharpness, dtype=np.float64).reshape(-1)
        if not len(self.amplitude) == len(self.axis) == len(self.sharpness):
            raise ValueError("amplitude, axis and sharpness need one entry per lobe")
        if np.any(self.sharpness < 0):
            raise ValueError("lobe sharpness must be non-negative")
        if not np.allclose(np.linalg.norm(self.axis, axis=-1), 1.0, atol=1e-6):
            raise ValueError("lobe axes must be unit vectors")

    @property
    def count(self) -> int:
        return len(self.sharpness)

    @property
    def dimension(self) -> int:
        return 6 * self.count

    def rotated(self, R: np.ndarray) -> "SGLobes":
        return SGLobes(self.amplitude, self.axis @ np.asarray(R).T, self.sharpness)

    def tensors(self, prefix: str = "sg.") -> dict[str, np.ndarray]:
        return {prefix + "amplitude": self.amplitude, prefix + "axis": self.axis, prefix + "sharpness": self.sharpness}


def sg_lobes_for_dimension(D: int) -> int:
    return math.ceil(D / 6)


def evaluate_sg(lobes: SGLobes, d) -> np.ndarray:
    """``sum_k a_k exp(lambda_k (d . mu_k - 1))`` at directions ``d`` (..., 3)."""
    d = np.asarray(d, dtype=np.float64)
    cos = d @ lobes.axis.T  # (..., K)
    return np.exp(lobes.sharpness * (cos - 1.0)) @ lobes.amplitude


def _evaluate_sg_torch(log_amp, axis, log_sharp, d):
    lam = log_sharp.exp()
    return torch.exp(lam * (d @ axis.T - 1.0)) @ log_amp.exp()


def fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    y = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - y * y)
    t = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(t), y, r * np.sin(t)], axis=-1)


def fit_sg(image, lobes: int, steps: int = 500, lr: float = 5e-2, init_sharpness: float = 10.0):
    """Fit ``lobes`` spherical Gaussians by Adam on solid-angle-weighted log-space MSE.

    Returns ``(SGLobes, losses)``.  Amplitudes and sharpness are optimised in log
    form to stay non-negative; axes are renormalised after every step.
    """
    pixels = image.pixels if isinstance(image, hdr_io.EnvironmentImage) else np.asarray(image)
    H, W = pixels.shape[:2]
    d = torch.from_numpy(geometry.equirect_directions(H, W).reshape(-1, 3))
    target = torch.from_numpy(hdr_io.log_radiance(pixels.astype(np.float64)).reshape(-1, 3))
    w = torch.from_numpy(geometry.pixel_solid_angles(H, W).reshape(-1, 1) / (4 * math.pi))
    mean = np.maximum(pixels.reshape(-1, 3).astype(np.float64).mean(0), hdr_io.LOG_FLOOR)
    log_amp = torch.tensor(np.log(np.tile(mean, (lobes, 1))), requires_grad=True)
    axis = torch.tensor(fibonacci_sphere(lobes), requires_grad=True)
    log_sharp = torch.full((lobes,), math.log(init_sharpness), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([log_amp, axis, log_sharp], lr=lr)
    losses = []
    for _ in range(steps):
        pred = torch.log(_evaluate_sg_torch(log_amp, axis, log_sharp, d).clamp_min(hdr_io.LOG_FLOOR))
        loss = ((pred - target).square() * w).sum() / 3
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            axis /= axis.norm(dim=-1, keepdim=True)
        losses.append(float(loss.detach()))
    fitted = SGLobes(log_amp.detach().exp().numpy(), axis.detach().numpy(), log_sharp.detach().exp().numpy())
    return fitted, np.array(losses)


def render_sg(lobes: SGLobes, H: int, W: int) -> np.ndarray:
    return evaluate_sg(lobes, geometry.equirect_directions(H, W))
