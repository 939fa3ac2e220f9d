"""Conditional spherical neural field with a cross-attention transformer decoder.

The query is a single token built from the positionally encoded invariant
direction features; the keys/values are the N latent columns (after the
invariant transform) lifted to ``hidden`` features plus a learned per-channel
embedding.  Each layer applies multi-head attention with the projected query
added back, followed by a layer-normalised feed-forward block.  The output is a
log-radiance RGB triple.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint, equivariance

LOG_FLOOR = math.log(1e-8)


@dataclass
class FieldConfig:
    n_latent: int = 9
    heads: int = 8
    layers: int = 6
    hidden: int = 128
    pe_frequencies: int = 8
    mode: str = "so2"
    output_activation: str = "identity"  # or "softplus-shift"
    ffn_residual: str = "normalized"  # "normalized": LN(x) + FFN(LN(x)); "input": x + FFN(LN(x))
    ffn_hidden: int = 0  # 0 means "same as hidden"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.mode not in equivariance.MODES:
            raise ValueError(f"unknown equivariance mode {self.mode!r}")
        if self.output_activation not in ("identity", "softplus-shift"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.ffn_residual not in ("normalized", "input"):
            raise ValueError(f"unknown ffn residual {self.ffn_residual!r}")
        if self.n_latent < 1 or self.layers < 1 or self.pe_frequencies < 1:
            raise ValueError("n_latent, layers and pe_frequencies must be positive")

    @property
    def latent_dim(self) -> int:
        return 3 * self.n_latent

    def to_header(self) -> dict[str, str]:
        return {f"field.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "FieldConfig":
        kwargs = {}
        for f in fields(cls):
            key = f"field.{f.name}"
            if key in header:
                kwargs[f.name] = int(header[key]) if f.type in ("int", int) else header[key]
        return cls(**kwargs)


def positional_encode(x: torch.Tensor, n_frequencies: int) -> torch.Tensor:
    """Per element: sin(2^k pi x), cos(2^k pi x) for k < L, interleaved."""
    freqs = math.pi * 2.0 ** torch.arange(n_frequencies, dtype=x.dtype, device=x.device)
    arg = x.unsqueeze(-1) * freqs
    enc = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)
    return enc.reshape(*x.shape[:-1], x.shape[-1] * 2 * n_frequencies)


class SampleGroups:
    """Padded per-code layout of samples, so attention is one batched matmul.

    Sample ``p`` belongs to code ``index[p]`` and sits at slot ``slot[p]`` of
    that code's row in a ``(B, P_max, ...)`` tensor.
    """

    def __init__(self, index: torch.Tensor, n_codes: int):
        counts = torch.bincount(index, minlength=n_codes)
        order = torch.argsort(index, stable=True)
        starts = torch.cumsum(counts, 0) - counts
        self.index = index
        self.slot = torch.empty_like(index)
        self.slot[order] = torch.arange(len(index), device=index.device) - starts[index[order]]
        self.n_codes = n_codes
        self.width = int(counts.max()) if len(index) else 0

    def pad(self, x: torch.Tensor) -> torch.Tensor:
        out = x.new_zeros(self.n_codes, self.width, *x.shape[1:])
        return out.index_put((self.index, self.slot), x)

    def unpad(self, x: torch.Tensor) -> torch.Tensor:
        return x[self.index, self.slot]


class DecoderLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn_hidden: int, ffn_residual: str):
        super().__init__()
        self.heads = heads
        self.ffn_residual = ffn_residual
        self.W_q = nn.Linear(hidden, hidden)
        self.W_k = nn.Linear(hidden, hidden)
        self.W_v = nn.Linear(hidden, hidden)
        self.W_o = nn.Linear(hidden, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.W_1 = nn.Linear(hidden, ffn_hidden)
        self.W_2 = nn.Linear(ffn_hidden, hidden)

    def attend(self, h: torch.Tensor, tokens: torch.Tensor, groups: "SampleGroups | None") -> torch.Tensor:
        P, hidden = h.shape
        dh = hidden // self.heads
        Q = self.W_q(h)
        K = self.W_k(tokens).unflatten(-1, (self.heads, dh)).transpose(-2, -3)  # (B, heads, N, dh)
        V = self.W_v(tokens).unflatten(-1, (self.heads, dh)).transpose(-2, -3)
        q = Q.view(P, self.heads, dh)
        if groups is None:
            q = q.transpose(0, 1).unsqueeze(0)  # (1, heads, P, dh)
        else:
            q = groups.pad(q).transpose(1, 2)  # (B, heads, P_max, dh)
        weights = torch.softmax(q @ K.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (weights @ V).transpose(1, 2)  # (B, P or P_max, heads, dh)
        out = out[0] if groups is None else groups.unpad(out)
        return self.W_o(out.reshape(P, hidden)) + Q

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x)
        skip = y if self.ffn_residual == "normalized" else x
        return skip + self.W_2(F.relu(self.W_1(y)))

    def forward(self, h, tokens, groups):
        return self.feed_forward(self.attend(h, tokens, groups))


class SphericalField(nn.Module):
    """f(d, Z) -> log RGB radiance."""

    def __init__(self, config: FieldConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        if seed is None:
            self._build(config)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self._build(config)

    def _build(self, c: FieldConfig) -> None:
        n = c.n_latent
        if c.mode == "so3":
            self.W_f = nn.Parameter(torch.randn(n, 3) / math.sqrt(n))
        elif c.mode == "so2":
            self.W_f = nn.Parameter(torch.randn(n, 2) / math.sqrt(n))
        else:
            self.register_parameter("W_f", None)
        self.register_buffer("frame", equivariance.planar_frame(), persistent=False)
        pe_dim = equivariance.dir_feature_size(c.mode, n) * 2 * c.pe_frequencies
        self.query_proj = nn.Linear(pe_dim, c.hidden)
        self.token_proj = nn.Linear(3, c.hidden)
        self.channel_embedding = nn.Parameter(0.02 * torch.randn(n, c.hidden))
        self.layers = nn.ModuleList(
            DecoderLayer(c.hidden, c.heads, c.ffn_hidden or c.hidden, c.ffn_residual) for _ in range(c.layers)
        )
        self.out_proj = nn.Linear(c.hidden, 3)

    @property
    def n_latent(self) -> int:
        return self.config.n_latent

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"parameter {name!r} contains NaN or Inf")

    def direction_features(self, d: torch.Tensor, Z: torch.Tensor) -> torch.Tensor:
        mode = self.config.mode
        if mode == "so3":
            return (d.unsqueeze(-2) @ Z).squeeze(-2)
        if mode == "so2":
            return equivariance.so2_direction_features(d, Z, self.frame.to(d.dtype))
        return d

    def conditioning(self, Z: torch.Tensor) -> torch.Tensor:
        mode = self.config.mode
        if mode == "so3":
            return equivariance.vn_invariant(Z, self.W_f)
        if mode == "so2":
            return equivariance.so2_conditioning(Z, self.W_f, self.frame.to(Z.dtype))
        return Z

    def forward(self, d: torch.Tensor, Z: torch.Tensor, index: torch.Tensor | None = None) -> torch.Tensor:
        """Evaluate at directions ``d`` of shape ``(P, 3)``.

        ``Z`` is either one code ``(3, N)`` shared by all directions, or a stack
        ``(B, 3, N)`` with ``index`` (P,) choosing the code of each direction;
        without ``index`` a stack must have B == P.
        """
        if Z.dim() == 2:
            Z = Z.unsqueeze(0)
        if index is None and Z.shape[0] != 1:
            if Z.shape[0] != d.shape[0]:
                raise ValueError(f"{Z.shape[0]} latents for {d.shape[0]} directions")
            index = torch.arange(d.shape[0], device=d.device)
        Z_each = Z[index] if index is not None else Z
        groups = None if index is None else SampleGroups(index, Z.shape[0])
        feats = self.direction_features(d, Z_each)
        h = self.query_proj(positional_encode(feats, self.config.pe_frequencies))
        cond = self.conditioning(Z)
        tokens = self.token_proj(cond.transpose(-1, -2)) + self.channel_embedding
        for layer in self.layers:
            h = layer(h, tokens, groups)
        out = self.out_proj(h)
        if self.config.output_activation == "softplus-shift":
            out = F.softplus(out - LOG_FLOOR) + LOG_FLOOR
        return out


def _as_tensor(x, model: nn.Module) -> torch.Tensor:
    p = next(model.parameters())
    return torch.as_tensor(x, dtype=p.dtype, device=p.device)


def field_forward(model: SphericalField, d, Z) -> torch.Tensor:
    """Log RGB at one direction ``(3,)`` or many ``(P, 3)`` for one code ``(3, N)``."""
    model.check_finite()
    d = _as_tensor(d, model)
    Z = _as_tensor(Z, model)
    if Z.shape != (3, model.n_latent):
        raise ValueError(f"latent must be 3 x {model.n_latent}, got {tuple(Z.shape)}")
    single = d.dim() == 1
    out = model(d.reshape(-1, 3), Z)
    return out[0] if single else out


def field_forward_batch(model: SphericalField, D, Z_per_sample) -> torch.Tensor:
    """Vectorised evaluation: ``D`` (P, 3) with one code per sample ``(P, 3, N)``."""
    model.check_finite()
    D = _as_tensor(D, model)
    Z = _as_tensor(Z_per_sample, model)
    if D.dim() != 2 or D.shape[1] != 3:
        raise ValueError(f"directions must be P x 3, got {tuple(D.shape)}")
    if Z.shape != (D.shape[0], 3, model.n_latent):
        raise ValueError(f"expected latents of shape {(D.shape[0], 3, model.n_latent)}, got {tuple(Z.shape)}")
    return model(D, Z)


def gradient(loss: torch.Tensor, wrt, retain_graph: bool = False):
    """Reverse-mode gradient of a scalar ``loss``.

    ``wrt`` is a tensor, a sequence of tensors, or a module (all its parameters).
    Inputs that the loss does not depend on receive zero gradients.
    """
    if isinstance(wrt, nn.Module):
        targets = list(wrt.parameters())
    elif isinstance(wrt, torch.Tensor):
        targets = [wrt]
    else:
        targets = list(wrt)
    if loss.numel() != 1:
        raise ValueError("gradient() needs a scalar loss")
    for t in targets:
        if not t.requires_grad:
            raise RuntimeError("cannot differentiate with respect to a tensor that does not require grad")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from the recorded computation")
    grads = torch.autograd.grad(loss, targets, retain_graph=retain_graph, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, targets)]
    return grads[0] if isinstance(wrt, torch.Tensor) else grads


def decode_log_image(model: SphericalField, Z, H: int, W: int, chunk: int = 8192) -> np.ndarray:
    """Log radiance over the pixel centres of an H x W equirectangular grid."""
    from .geometry import equirect_directions

    dirs = equirect_directions(H, W).reshape(-1, 3)
    Z = _as_tensor(Z, model)
    out = []
    with torch.no_grad():
        for i in range(0, len(dirs), chunk):
            out.append(model(_as_tensor(dirs[i : i + chunk], model), Z).double().cpu().numpy())
    return np.concatenate(out).reshape(H, W, 3)


def decode_image(model: SphericalField, Z, H: int, W: int) -> np.ndarray:
    return np.exp(decode_log_image(model, Z, H, W))


def model_tensors(model: SphericalField, prefix: str = "model.") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_model(path, model: SphericalField, header=None, tensors=None) -> None:
    hdr = {"kind": "spherical-field", **model.config.to_header(), "parameter_count": model.parameter_count()}
    hdr.update(header or {})
    checkpoint.save_checkpoint(path, hdr, {**model_tensors(model), **(tensors or {})})


def load_model(path) -> tuple[SphericalField, dict[str, str], dict[str, np.ndarray]]:
    header, tensors = checkpoint.load_checkpoint(path)
    if header.get("kind") != "spherical-field":
        raise checkpoint.CheckpointError(f"{path}: checkpoint does not contain a field model")
    model = SphericalField(FieldConfig.from_header(header))
    state = {k[len("model.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, header, tensors
