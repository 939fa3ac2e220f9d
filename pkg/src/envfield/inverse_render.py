"""Differentiable normalised Blinn-Phong environment shading and inverse lighting.

The environment is integrated by direct summation over the pixel centres of
an H x 2H equirectangular grid.  Because shading is linear in the radiance, a
:class:`Renderer` precomputes two transport matrices (diffuse and specular)
mapping grid radiance to visible-pixel colour; a render is then two matmuls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import baselines, geometry
from .field import SphericalField
from .losses import INVERSE_WEIGHTS, LossWeights, inverse_loss


@dataclass(frozen=True)
class Material:
    kd: tuple = (0.8, 0.8, 0.8)
    ks: float = 0.0
    n: float = 32.0

    def __post_init__(self):
        kd = np.asarray(self.kd, dtype=np.float64)
        if kd.shape != (3,) or np.any(kd < 0) or np.any(kd > 1):
            raise ValueError(f"kd must be an RGB triple in [0, 1], got {self.kd}")
        if not 0.0 <= self.ks <= 1.0:
            raise ValueError(f"ks must lie in [0, 1], got {self.ks}")
        if self.n <= 0:
            raise ValueError(f"shininess must be positive, got {self.n}")

    @property
    def zeta(self) -> float:
        """Energy normalisation of the specular lobe, derived from ``n`` on every access."""
        return blinn_phong_zeta(self.n)


def blinn_phong_zeta(n: float) -> float:
    return (n + 2.0) / (4.0 * math.pi * (2.0 - math.exp(-n / 2.0)))


def sphere_geometry(resolution: int = 128):
    """Normals and visibility of a unit sphere seen orthographically along -z.

    Row 0 is the top of the image (y = +1); the camera looks from +z, so the
    view vector towards the camera is +z everywhere.
    """
    c = -1.0 + (2.0 * np.arange(resolution) + 1.0) / resolution
    x, y = np.meshgrid(c, -c)
    r2 = x * x + y * y
    visible = r2 < 1.0
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    normals = np.stack([x, y, z], axis=-1)
    normals[~visible] = 0.0
    return normals, visible


VIEW = np.array([0.0, 0.0, 1.0])


def _transport_rows(normals: np.ndarray, view: np.ndarray, dirs: np.ndarray, weights: np.ndarray, n: float):
    """Diffuse and specular kernels for unit ``normals`` (P, 3) against grid ``dirs`` (K, 3)."""
    cos = normals @ dirs.T
    front = cos > 0.0
    diffuse = np.where(front, cos, 0.0) * weights / math.pi
    half = dirs + view
    half = half / np.maximum(np.linalg.norm(half, axis=-1, keepdims=True), 1e-12)
    ndoth = np.clip(normals @ half.T, 0.0, None)
    specular = np.where(front, ndoth**n, 0.0) * weights
    return diffuse, specular


def shade(normal, view, env_sampler, material: Material, env_height: int = 64):
    """Outgoing linear RGB at one surface point.

    ``env_sampler`` maps grid directions ``(K, 3)`` to radiance ``(K, 3)`` (numpy
    or torch); the result has the same type.
    """
    dirs = geometry.equirect_directions(env_height, 2 * env_height).reshape(-1, 3)
    w = geometry.pixel_solid_angles(env_height, 2 * env_height).reshape(-1)
    normal = np.asarray(normal, dtype=np.float64).reshape(1, 3)
    diffuse, specular = _transport_rows(normal, np.asarray(view, dtype=np.float64), dirs, w, material.n)
    L = env_sampler(dirs)
    kd = np.asarray(material.kd)
    if isinstance(L, torch.Tensor):
        D = torch.as_tensor(diffuse[0], dtype=L.dtype)
        S = torch.as_tensor(specular[0], dtype=L.dtype)
        return torch.as_tensor(kd, dtype=L.dtype) * (D @ L) + material.ks * material.zeta * (S @ L)
    return kd * (diffuse[0] @ L) + material.ks * material.zeta * (specular[0] @ L)


class Renderer:
    """Fixed sphere, camera and material; renders any environment on the H x 2H grid."""

    def __init__(self, material: Material, resolution: int = 128, env_height: int = 64,
                 dtype=torch.float32, chunk: int = 1024):
        self.material = material
        self.resolution = resolution
        self.env_height = env_height
        self.dtype = dtype
        normals, self.visible = sphere_geometry(resolution)
        self.normals = normals[self.visible]
        self.directions = geometry.equirect_directions(env_height, 2 * env_height).reshape(-1, 3)
        weights = geometry.pixel_solid_angles(env_height, 2 * env_height).reshape(-1)
        np_dtype = np.float64 if dtype == torch.float64 else np.float32
        P, K = len(self.normals), len(self.directions)
        diffuse = np.empty((P, K), dtype=np_dtype)
        specular = np.empty((P, K), dtype=np_dtype)
        for i in range(0, P, chunk):
            d, s = _transport_rows(self.normals[i : i + chunk], VIEW, self.directions, weights, material.n)
            diffuse[i : i + chunk] = d
            specular[i : i + chunk] = s
        self.diffuse = torch.from_numpy(diffuse)
        self.specular = torch.from_numpy(specular)
        self.kd = torch.tensor(material.kd, dtype=dtype)

    @property
    def pixel_count(self) -> int:
        return len(self.normals)

    def render_pixels(self, radiance: torch.Tensor) -> torch.Tensor:
        """Visible-pixel colours ``(P, 3)`` from grid radiance ``(K, 3)``."""
        radiance = torch.as_tensor(radiance, dtype=self.dtype)
        out = self.kd * (self.diffuse @ radiance)
        if self.material.ks > 0:
            out = out + self.material.ks * self.material.zeta * (self.specular @ radiance)
        return out

    def to_image(self, pixels: torch.Tensor) -> np.ndarray:
        img = np.zeros((self.resolution, self.resolution, 3))
        img[self.visible] = pixels.detach().double().cpu().numpy()
        return img

    def render(self, radiance) -> np.ndarray:
        """Full ``resolution^2`` image with a black background."""
        with torch.no_grad():
            return self.to_image(self.render_pixels(radiance))

    # environment sources, all returning (K, 3) radiance on the grid

    def grid_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.directions).to(self.dtype)

    def neural_radiance(self, model: SphericalField, Z: torch.Tensor, exposure=1.0) -> torch.Tensor:
        p_dtype = next(model.parameters()).dtype
        log_L = model(torch.from_numpy(self.directions).to(p_dtype), Z.to(p_dtype))
        return torch.exp(log_L).to(self.dtype) * exposure

    def sh_radiance(self, coeffs, exposure=1.0) -> torch.Tensor:
        if isinstance(coeffs, baselines.SHCoefficients):
            coeffs = coeffs.coeffs
        coeffs = torch.as_tensor(coeffs)
        return baselines.evaluate_sh(coeffs.to(self.dtype), self.directions) * exposure

    def sg_radiance(self, lobes: baselines.SGLobes) -> torch.Tensor:
        return torch.as_tensor(baselines.evaluate_sg(lobes, self.directions), dtype=self.dtype)

    def raster_radiance(self, pixels: np.ndarray) -> torch.Tensor:
        from .hdr_io import bilinear_lookup

        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.shape[:2] == (self.env_height, 2 * self.env_height):
            flat = pixels.reshape(-1, 3)
        else:
            flat = bilinear_lookup(pixels, self.directions)
        return torch.as_tensor(flat, dtype=self.dtype)


@dataclass
class InverseConfig:
    steps: int = 200
    lr: float = 1e-2
    rho: float = INVERSE_WEIGHTS.rho
    gamma: float = INVERSE_WEIGHTS.gamma
    beta: float = INVERSE_WEIGHTS.beta

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.rho, self.gamma, self.beta)


@dataclass
class InversionResult:
    params: torch.Tensor  # latent (3, N) or SH coefficients (B, 3)
    exposure: float
    history: list = field(default_factory=list)
    render: torch.Tensor | None = None  # final visible-pixel render


def _target_pixels(target, renderer: Renderer) -> torch.Tensor:
    target = torch.as_tensor(np.asarray(target) if not isinstance(target, torch.Tensor) else target)
    if target.shape[:2] == (renderer.resolution, renderer.resolution):
        target = target[torch.from_numpy(renderer.visible)]
    if target.shape != (renderer.pixel_count, 3):
        raise ValueError(f"target must be a {renderer.resolution}^2 image or ({renderer.pixel_count}, 3) pixels")
    return target.to(renderer.dtype)


def _optimise(render_fn, params: torch.Tensor, prior_target, target, config: InverseConfig):
    log_exposure = torch.zeros((), dtype=params.dtype, requires_grad=True)
    opt = torch.optim.Adam([params, log_exposure], lr=config.lr)
    history = []
    for step in range(config.steps):
        render = render_fn(params, log_exposure.exp())
        terms = inverse_loss(render, target, prior_target(params), config.weights)
        if not torch.isfinite(terms["total"]):
            raise FloatingPointError(f"inversion loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        terms["total"].backward()
        opt.step()
        history.append({"step": step, **{k: float(v.detach()) for k, v in terms.items()}})
    with torch.no_grad():
        final = render_fn(params, log_exposure.exp())
    return InversionResult(params.detach().clone(), float(log_exposure.detach().exp()), history, final)


def invert_lighting(target, renderer: Renderer, model: SphericalField, config: InverseConfig | None = None) -> InversionResult:
    """Recover a latent code and an exposure scale whose rendering matches ``target``.

    The decoder stays frozen; Adam runs over (Z, log exposure) from Z = 0 and
    exposure 1.
    """
    config = config or InverseConfig()
    target = _target_pixels(target, renderer)
    p_dtype = next(model.parameters()).dtype
    Z = torch.zeros(3, model.n_latent, dtype=p_dtype, requires_grad=True)
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        return _optimise(
            lambda Z, exposure: renderer.render_pixels(renderer.neural_radiance(model, Z, exposure)),
            Z, lambda Z: Z, target, config,
        )
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)


def invert_lighting_sh(target, renderer: Renderer, order: int = 2, config: InverseConfig | None = None) -> InversionResult:
    """SH counterpart of :func:`invert_lighting` with the same optimiser and image losses.

    Coefficients start at a unit constant environment (the analogue of the
    neural mean environment) and carry no prior term.
    """
    config = config or InverseConfig()
    target = _target_pixels(target, renderer)
    coeffs = torch.zeros(baselines.sh_count(order), 3, dtype=renderer.dtype)
    coeffs[0] = 2.0 * math.sqrt(math.pi)
    coeffs.requires_grad_(True)
    Y = torch.as_tensor(baselines.sh_basis(renderer.directions, order), dtype=renderer.dtype)
    return _optimise(lambda c, exposure: renderer.render_pixels((Y @ c) * exposure), coeffs, lambda c: None, target, config)
