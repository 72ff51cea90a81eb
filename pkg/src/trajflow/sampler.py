"""Euler integration of the denoising ODE driven by the K-shot data predictions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .batching import SceneTensors
from .core import ConfigurationError, Normalizer, Scene, denormalize_future, tied_noise
from .network import MotionDenoiser, PredictionSet


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    T: int = 100
    p: float = 5.0
    continuous: bool = False  # linear first branch that meets the second at n = T/2

    def validate(self) -> None:
        errors = []
        if not 1 <= self.T <= 500:
            errors.append(f"T={self.T} must lie in [1, 500]")
        if self.p < 1:
            errors.append(f"p={self.p} must be >= 1")
        if errors:
            raise ConfigurationError("; ".join(errors))


def time_map(n: int, config: SamplerConfig) -> float:
    """Flow time at sampling iteration ``n``: slow start, then a power-law sweep to 1."""
    config.validate()
    T = config.T
    if not 0 <= n <= T:
        raise ValueError(f"step {n} outside [0, {T}]")
    if n == 0:
        return 0.0
    if n == T:
        return 1.0
    half = T / 2
    if n <= half:
        return n / 250.0 if config.continuous else n / 1000.0
    start = T / 500
    return start + (1.0 - start) * (n - half) ** config.p / half ** config.p


def time_grid(config: SamplerConfig) -> list[float]:
    return [time_map(n, config) for n in range(config.T + 1)]


def kshot_vector_field(waypoints, y_t, t: float):
    """v_i = (S_i - Y_t,i) / (1 - t) for every prediction i."""
    if t >= 1:
        raise ValueError(f"vector field undefined at t={t} >= 1")
    return (waypoints - y_t) / (1.0 - t)


Denoiser = Callable[[torch.Tensor, float], PredictionSet]


def ode_sample(denoise: Denoiser, y0: torch.Tensor, config: SamplerConfig) -> PredictionSet:
    """Integrate from ``y0`` at t=0 to t=1 with ``config.T`` Euler steps.

    The step that reaches t=1 returns the data prediction itself, which is what
    ``Y + (1 - t) * (S - Y) / (1 - t)`` equals algebraically.
    """
    grid = time_grid(config)
    y = y0
    pred = None
    for n in range(config.T):
        t_now, t_next = grid[n], grid[n + 1]
        pred = denoise(y, t_now)
        if t_next == 1.0:
            y = pred.waypoints
        else:
            y = y + (t_next - t_now) * kshot_vector_field(pred.waypoints, y, t_now)
        if not torch.isfinite(y).all():
            raise SamplingError(f"non-finite state after step {n} (t={t_next})")
    return PredictionSet(y, pred.logits)


def network_denoiser(model: MotionDenoiser, batch: SceneTensors) -> Denoiser:
    def denoise(y: torch.Tensor, t: float) -> PredictionSet:
        t_vec = torch.full((y.shape[0],), t, dtype=y.dtype)
        return model(y, batch.context, batch.type_ids, t_vec)
    return denoise


@torch.no_grad()
def sample(model: MotionDenoiser, batch: SceneTensors, config: SamplerConfig,
           generator: torch.Generator | None = None, K: int | None = None) -> PredictionSet:
    """Teacher ODE sampling for a batch of same-size scenes, in normalized space."""
    config.validate()
    model.eval()
    K = model.cfg.K if K is None else K
    B, A, _ = batch.context.shape
    y0 = tied_noise(K, A, model.cfg.T_f, generator, batch=B, dtype=batch.context.dtype)
    return ode_sample(network_denoiser(model, batch), y0, config)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def to_absolute(waypoints, scene: Scene, normalizer: Normalizer) -> np.ndarray:
    """(K, A, 2*T_f) normalized -> (K, A, T_f, 2) absolute."""
    return denormalize_future(np.asarray(waypoints, dtype=np.float64), scene, normalizer)


def write_sample_dump(records: Sequence[dict], path) -> None:
    """Records: {"scene_id", "predictions": (K, A, T_f, 2), "probs": (K,)}."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"scene_id": r["scene_id"],
                                 "predictions": np.asarray(r["predictions"]).tolist(),
                                 "probs": np.asarray(r["probs"]).tolist()}) + "\n")


def read_sample_dump(path) -> Iterator[dict]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                yield {"scene_id": r["scene_id"],
                       "predictions": np.asarray(r["predictions"], dtype=np.float64),
                       "probs": np.asarray(r["probs"], dtype=np.float64)}
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad sample record ({exc})") from exc
