"""Flow-matching training of the K-shot denoiser."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .batching import SceneTensors, epoch_batches
from .core import ConfigurationError, interpolate, tied_noise
from .network import MotionDenoiser, PredictionSet, forward_teacher


class TrainingError(RuntimeError):
    pass


@dataclass
class TimeSchedule:
    mu_t: float = -0.5
    sigma_t: float = 1.5

    def validate(self) -> None:
        if not self.sigma_t > 0:
            raise ConfigurationError(f"sigma_t must be > 0, got {self.sigma_t}")


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    max_steps: int = 2000
    seed: int = 0
    mask: bool = True
    grad_clip: float = 1.0
    lr_min_ratio: float = 0.1  # cosine decay floor, as a fraction of learning_rate
    log_every: int = 50

    def validate(self) -> None:
        errors = [f"{name} must be > 0" for name in ("batch_size", "learning_rate", "max_steps")
                  if not getattr(self, name) > 0]
        if self.weight_decay < 0:
            errors.append("weight_decay must be >= 0")
        if errors:
            raise ConfigurationError("; ".join(errors))


def logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


def sample_time(schedule: TimeSchedule, generator: torch.Generator | None = None,
                n: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Logit-normal flow times: ``sigmoid(kappa)`` with ``kappa ~ N(mu_t, sigma_t^2)``."""
    shape = () if n is None else (n,)
    kappa = schedule.mu_t + schedule.sigma_t * torch.randn(shape, generator=generator,
                                                            dtype=torch.float64)
    # keep t strictly inside (0, 1) even in float32
    eps = torch.finfo(dtype).eps
    return torch.sigmoid(kappa).clamp(eps, 1 - eps).to(dtype)


def closest_index(waypoints: torch.Tensor, y1: torch.Tensor) -> torch.Tensor:
    """argmin_j ||S_j - Y1||^2; waypoints (..., K, A, D), y1 (..., A, D). Ties -> lowest j."""
    dist = (waypoints - y1.unsqueeze(-3)).pow(2).flatten(-2).sum(-1)
    return dist.argmin(dim=-1)


def fm_loss(pred: PredictionSet, y1: torch.Tensor, reduce: bool = True):
    """Winner-take-all regression plus cross-entropy on the selected index.

    Returns ``(loss, regression, ce, j_star)``. ``j_star`` is computed without
    gradient; the ``(1 - t)^-2`` weight of the data-space objective is omitted.
    """
    if not (torch.isfinite(pred.waypoints).all() and torch.isfinite(pred.logits).all()
            and torch.isfinite(y1).all()):
        raise TrainingError("non-finite input to fm_loss")
    with torch.no_grad():
        j_star = closest_index(pred.waypoints, y1)
    batch_shape = pred.logits.shape[:-1]
    S = pred.waypoints.reshape(-1, *pred.waypoints.shape[-3:])
    chosen = S[torch.arange(S.shape[0]), j_star.reshape(-1)].reshape(*batch_shape, *S.shape[-2:])
    regression = (chosen - y1).pow(2).flatten(-2).sum(-1)
    ce = F.cross_entropy(pred.logits.reshape(-1, pred.logits.shape[-1]), j_star.reshape(-1),
                         reduction="none").reshape(batch_shape)
    loss = regression + ce
    if reduce:
        return loss.mean(), regression.mean(), ce.mean(), j_star
    return loss, regression, ce, j_star


def loss_equivalence_check(v, y0, y1, t: float, relative: bool = False) -> float:
    """|velocity-space loss - rearranged data-space loss| on the exact interpolant."""
    y_t = interpolate(y0, y1, t)
    velocity_form = ((v - (y1 - y0)) ** 2).sum()
    data_form = (((y_t + (1 - t) * v - y1) / (1 - t)) ** 2).sum()
    residual = float(abs(velocity_form - data_form))
    if relative:
        return residual / max(float(velocity_form), 1e-300)
    return residual


def make_optimizer(model, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay)


def cosine_lr(step: int, config: TrainConfig) -> float:
    frac = min(step / max(config.max_steps, 1), 1.0)
    floor = config.lr_min_ratio
    return config.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def train_step(model: MotionDenoiser, optimizer: torch.optim.Optimizer, batch: SceneTensors,
               schedule: TimeSchedule, config: TrainConfig,
               generator: torch.Generator | None = None) -> dict:
    """One optimizer update on a batch of same-size scenes."""
    B, A, D = batch.y1.shape
    K = model.cfg.K
    dtype = batch.y1.dtype
    y0 = tied_noise(K, A, D // 2, generator, batch=B, dtype=dtype)
    y1 = batch.y1[:, None].expand(B, K, A, D)
    t = sample_time(schedule, generator, n=B, dtype=dtype)
    y_t = interpolate(y0, y1, t[:, None, None, None])
    pred = forward_teacher(model, y_t, batch.context, batch.type_ids, t, mode="train",
                           generator=generator, mask=config.mask)
    loss, regression, ce, _ = fm_loss(pred, batch.y1)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return {"loss": loss.item(), "regression": regression.item(), "ce": ce.item(),
            "t_mean": t.mean().item()}


def train_teacher(model: MotionDenoiser, groups: dict[int, SceneTensors], schedule: TimeSchedule,
                  config: TrainConfig, log: Callable[[dict], None] | None = None,
                  callback: Callable[[int], None] | None = None) -> list[dict]:
    """Run ``config.max_steps`` updates; returns the per-step records.

    ``groups`` maps agent count to the stacked tensors of all training scenes of that size.
    """
    config.validate()
    schedule.validate()
    torch.manual_seed(config.seed)  # dropout draws from the global generator
    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    index = {A: list(range(len(t))) for A, t in groups.items()}
    history, queue = [], []
    start = time.perf_counter()
    for step in range(config.max_steps):
        if not queue:
            queue = epoch_batches(index, config.batch_size, rng)
        A, idx = queue.pop()
        for group in optimizer.param_groups:
            group["lr"] = cosine_lr(step, config)
        record = {"step": step, **train_step(model, optimizer, groups[A].select(idx), schedule,
                                             config, generator)}
        history.append(record)
        if log is not None and (step % config.log_every == 0 or step == config.max_steps - 1):
            log({**record, "wallclock_s": round(time.perf_counter() - start, 3)})
        if callback is not None:
            callback(step)
    model.eval()
    return history


def jsonl_logger(path) -> Callable[[dict], None]:
    def log(record: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return log


def config_dict(*configs) -> dict:
    return {type(c).__name__: asdict(c) for c in configs}
