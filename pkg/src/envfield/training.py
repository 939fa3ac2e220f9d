"""Variational auto-decoder training of the field and the per-image latent bank."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import hdr_io
from .equivariance import unvec
from .field import FieldConfig, SphericalField
from .losses import LossWeights, train_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training loss became {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 50_000
    warmup: int = 500
    lr0: float = 1e-3
    alpha: float = 0.05
    batch_size: int = 4096
    codes_per_batch: int = 0  # 0: every image in every batch
    rho: float = 1.0
    gamma: float = 1.0
    beta: float = 1e-6
    seed: int = 0
    hflip: bool = True
    az_rotations: int = 0  # extra copies rotated by multiples of 2 pi / az_rotations
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    log_every: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup < self.steps:
            raise ValueError(f"warmup ({self.warmup}) must be below steps ({self.steps})")
        if self.batch_size < max(self.codes_per_batch, 1):
            raise ValueError("batch_size must be at least codes_per_batch")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.rho, self.gamma, self.beta)

    def to_header(self) -> dict[str, str]:
        return {f"train.{k}": str(v) for k, v in asdict(self).items()}


def lr_schedule(step: int, lr0: float = 1e-3, warmup: int = 500, max_steps: int = 50_000, alpha: float = 0.05) -> float:
    """Linear warm-up then cosine decay to ``alpha * lr0`` at ``max_steps``."""
    if step <= warmup:
        return lr0 * step / warmup
    progress = (step - warmup) / (max_steps - warmup)
    return lr0 * (alpha + (1 - alpha) / 2 * (math.cos(math.pi * progress) + 1))


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor, n_latent: int | None = None) -> torch.Tensor:
    """``mu + exp(logvar / 2) * eps`` reshaped column-major to ``(..., 3, N)``."""
    return unvec(mu + torch.exp(0.5 * logvar) * eps, n_latent)


class LatentBank(nn.Module):
    """Mean and log-variance of the latent distribution of every training image."""

    def __init__(self, n_images: int, n_latent: int, generator: torch.Generator | None = None):
        super().__init__()
        D = 3 * n_latent
        self.n_latent = n_latent
        self.mu = nn.Parameter(torch.randn(n_images, D, generator=generator))
        self.logvar = nn.Parameter(torch.randn(n_images, D, generator=generator) - 5.0)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def mean_latent(self, i: int) -> torch.Tensor:
        return unvec(self.mu[i].detach(), self.n_latent)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"latent_bank.mu": self.mu.detach().cpu().numpy(), "latent_bank.logvar": self.logvar.detach().cpu().numpy()}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], n_latent: int) -> "LatentBank":
        mu = tensors["latent_bank.mu"]
        bank = cls(mu.shape[0], n_latent)
        with torch.no_grad():
            bank.mu.copy_(torch.from_numpy(mu))
            bank.logvar.copy_(torch.from_numpy(tensors["latent_bank.logvar"]))
        return bank


@dataclass
class TrainResult:
    model: SphericalField
    bank: LatentBank
    history: list[dict] = field(default_factory=list)
    images: list = field(default_factory=list)  # the augmented training set, aligned with the bank
    seconds: float = 0.0

    def loss_column(self, key: str) -> np.ndarray:
        return np.array([h[key] for h in self.history])


HISTORY_KEYS = ("step", "lr", "total", "scale_inv", "cosine", "kld")


def expand_dataset(images, config: TrainConfig) -> list:
    out = list(images)
    if config.az_rotations > 0:
        rotated = []
        for img in out:
            for j in range(1, config.az_rotations):
                k = int(round(j * img.width / config.az_rotations))
                rotated.append(hdr_io.az_rotate(img, k))
        out += rotated
    if config.hflip:
        out += [hdr_io.hflip(img) for img in out]
    return out


def train(images, config: TrainConfig, field_config: FieldConfig, model: SphericalField | None = None) -> TrainResult:
    """Jointly optimise decoder weights and the latent bank with Adam.

    Deterministic for a fixed ``config.seed`` on a single thread.
    """
    if len(images) == 0:
        raise ValueError("training needs at least one image")
    data = expand_dataset(images, config)
    torch_gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = SphericalField(field_config, seed=config.seed)
    bank = LatentBank(len(data), field_config.n_latent, generator=torch_gen)
    params = list(model.parameters()) + list(bank.parameters())
    opt = torch.optim.Adam(params, lr=0.0, betas=tuple(config.adam_betas), eps=config.adam_eps)
    dtype = next(model.parameters()).dtype
    weights = config.weights
    K = config.codes_per_batch or len(data)
    history = []
    t0 = time.perf_counter()

    for step in range(1, config.steps + 1):
        lr = lr_schedule(step, config.lr0, config.warmup, config.steps, config.alpha)
        for g in opt.param_groups:
            g["lr"] = lr
        codes = np.arange(len(data)) if K >= len(data) else np.sort(rng.choice(len(data), K, replace=False))
        batch = hdr_io.sample_training_batch([data[i] for i in codes], config.batch_size, rng)
        index = torch.from_numpy(batch.image_index)
        d = torch.from_numpy(batch.directions).to(dtype)
        target = torch.from_numpy(batch.log_colors).to(dtype)

        code_idx = torch.from_numpy(codes)
        mu, logvar = bank.mu[code_idx], bank.logvar[code_idx]
        eps = torch.randn(mu.shape, generator=torch_gen, dtype=mu.dtype)
        Z = reparameterize(mu, logvar, eps, field_config.n_latent).to(dtype)
        pred = model(d, Z, index)
        terms = train_loss(pred, target, mu, logvar, weights, groups=index)
        loss = terms["total"]
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, float(loss.detach()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"step": step, "lr": lr, **{k: float(v.detach()) for k, v in terms.items()}})
        if config.log_every and step % config.log_every == 0:
            log.info("step %d lr %.3g loss %.5f scale_inv %.5f cos %.5f kld %.3f", step, lr,
                     history[-1]["total"], history[-1]["scale_inv"], history[-1]["cosine"], history[-1]["kld"])
    return TrainResult(model, bank, history, data, time.perf_counter() - t0)


def write_history_csv(history, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_KEYS)
        for h in history:
            w.writerow([h["step"]] + [repr(float(h[k])) for k in HISTORY_KEYS[1:]])


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.array([values.mean()])
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def config_from_header(header: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        raw = header.get(f"train.{f.name}")
        if raw is None:
            continue
        if f.type in ("bool", bool):
            kwargs[f.name] = raw == "True"
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.name == "adam_betas":
            kwargs[f.name] = tuple(float(x) for x in raw.strip("()").split(","))
    return TrainConfig(**kwargs)
