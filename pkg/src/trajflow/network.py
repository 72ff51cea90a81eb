"""Context encoder and factorized K-shot motion decoder.

``MotionDenoiser`` maps ``(Y_t, C, t)`` to ``K`` scene-level waypoint predictions
plus one logit per prediction. With ``time_conditioned=False`` the same module is
the one-step student generator fed with a noise tensor instead of ``Y_t``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .core import N_FEATURES, ConfigurationError

# The fused inference kernel differs numerically from the autograd path; keep one path so
# no-grad and grad-enabled evaluations of the same input agree.
torch.backends.mha.set_fastpath_enabled(False)


@dataclass
class NetworkConfig:
    T_p: int
    T_f: int
    n_agent_types: int = 1
    K: int = 20
    d_model: int = 128
    d_ff: int = 512
    n_heads: int = 8
    n_enc_layers: int = 4
    n_dec_blocks: int = 4
    dropout: float = 0.1
    mask_k: float = 20.0
    mask_m: float = 0.5
    head_init_scale: float = 1e-2

    def validate(self) -> None:
        errors = []
        if self.d_model % self.n_heads:
            errors.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.dropout < 1:
            errors.append(f"dropout={self.dropout} outside [0, 1)")
        if self.K < 1:
            errors.append(f"K={self.K} must be >= 1")
        if self.T_p < 1 or self.T_f < 1 or self.n_agent_types < 1:
            errors.append("T_p, T_f and n_agent_types must be >= 1")
        if errors:
            raise ConfigurationError("; ".join(errors))

    def to_dict(self) -> dict:
        return asdict(self)


class PredictionSet(NamedTuple):
    waypoints: torch.Tensor  # (..., K, A, 2*T_f), normalized displacement space
    logits: torch.Tensor  # (..., K)


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer sinusoidal encoding with geometric frequency spacing."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=positions.dtype) / half)
    angles = positions[..., None] * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        enc = nn.functional.pad(enc, (0, 1))
    return enc


def mask_threshold(t, k: float = 20.0, m: float = 0.5):
    """Logistic masking probability ``1 / (1 + exp(-k (t - m)))``."""
    if torch.is_tensor(t):
        return torch.sigmoid(k * (t - m))
    z = -k * (t - m)
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def draw_noise_mask(t: torch.Tensor, k: float, m: float,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """One Bernoulli draw per scene: True where the noise embedding is zeroed."""
    u = torch.rand(t.shape, generator=generator, dtype=t.dtype)
    return u < mask_threshold(t, k, m)


def _mlp(d_in: int, d_model: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_model), nn.GELU(), nn.Linear(d_model, d_model))


def _layer(cfg: NetworkConfig) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout,
                                      activation="gelu", batch_first=True, norm_first=True)


class ContextEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.input_mlp = _mlp(N_FEATURES * cfg.T_p, cfg.d_model)
        self.type_embedding = nn.Embedding(cfg.n_agent_types, cfg.d_model)
        self.layers = nn.ModuleList(_layer(cfg) for _ in range(cfg.n_enc_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def embed(self, context: torch.Tensor, type_ids: torch.Tensor) -> torch.Tensor:
        return self.input_mlp(context) + self.type_embedding(type_ids)

    def forward(self, context: torch.Tensor, type_ids: torch.Tensor) -> torch.Tensor:
        """(B, A, 6*T_p) context and (B, A) type ids -> (B, A, d_model)."""
        h = self.embed(context, type_ids)
        for layer in self.layers:
            h = layer(h)
        return self.norm(h)


class FlowTimeEmbedding(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.proj(sinusoid(1000.0 * t, self.d_model))


class FactorizedBlock(nn.Module):
    """Self-attention across the K predictions, then across agents."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.over_k = _layer(cfg)
        self.over_agents = _layer(cfg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, K, A, d = x.shape
        x = self.over_k(x.transpose(1, 2).reshape(B * A, K, d))
        x = x.reshape(B, A, K, d).transpose(1, 2)
        x = self.over_agents(x.reshape(B * K, A, d))
        return x.reshape(B, K, A, d)


class MotionDenoiser(nn.Module):
    def __init__(self, cfg: NetworkConfig, time_conditioned: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.time_conditioned = time_conditioned
        d = cfg.d_model
        self.encoder = ContextEncoder(cfg)
        self.noise_mlp = _mlp(2 * cfg.T_f, d)
        if time_conditioned:
            self.time_embedding = FlowTimeEmbedding(d)
        self.blocks = nn.ModuleList(FactorizedBlock(cfg) for _ in range(cfg.n_dec_blocks))
        self.norm = nn.LayerNorm(d)
        self.waypoint_head = nn.Linear(d, 2 * cfg.T_f)
        self.logit_head = nn.Linear(d, 1)
        with torch.no_grad():
            self.waypoint_head.weight.mul_(cfg.head_init_scale)
            self.waypoint_head.bias.mul_(cfg.head_init_scale)
        self.nfe = 0

    def forward(self, y: torch.Tensor, context: torch.Tensor, type_ids: torch.Tensor,
                t: torch.Tensor | None = None, noise_mask: torch.Tensor | None = None
                ) -> PredictionSet:
        """
        y: (B, K, A, 2*T_f) noisy trajectories (teacher) or latent noise (student).
        context: (B, A, 6*T_p); type_ids: (B, A) long; t: (B,) flow times.
        noise_mask: optional (B,) bool, True zeroes that scene's noise embedding.
        """
        self.nfe += 1
        B, K, A, _ = y.shape
        d = self.cfg.d_model
        h_enc = self.encoder(context, type_ids)
        x = self.noise_mlp(y)
        if noise_mask is not None:
            x = x * (~noise_mask).to(x.dtype)[:, None, None, None]
        x = x + h_enc[:, None]
        if self.time_conditioned:
            if t is None:
                raise ValueError("teacher forward requires flow time t")
            x = x + self.time_embedding(t.to(x.dtype))[:, None, None, :]
        x = x + sinusoid(torch.arange(A, dtype=x.dtype), d)[None, None]
        x = x + sinusoid(torch.arange(K, dtype=x.dtype), d)[None, :, None]
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        waypoints = self.waypoint_head(x)
        logits = self.logit_head(x).squeeze(-1).mean(dim=-1)
        return PredictionSet(waypoints, logits)


def forward_teacher(model: MotionDenoiser, y_t, context, type_ids, t, mode: str = "eval",
                    generator: torch.Generator | None = None, mask: bool = True) -> PredictionSet:
    """Teacher forward pass; ``mode="train"`` enables dropout and flow-time masking."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not torch.isfinite(y_t).all():
        raise ValueError("non-finite noisy trajectories")
    model.train(mode == "train")
    noise_mask = None
    if mode == "train" and mask:
        noise_mask = draw_noise_mask(t, model.cfg.mask_k, model.cfg.mask_m, generator)
    return model(y_t, context, type_ids, t, noise_mask)


def forward_student(model: MotionDenoiser, z, context, type_ids, mode: str = "eval") -> PredictionSet:
    if model.time_conditioned:
        raise ValueError("student generator must be built with time_conditioned=False")
    model.train(mode == "train")
    return model(z, context, type_ids)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
