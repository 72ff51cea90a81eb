"""One-step student trained by nearest-candidate (IMLE) matching against cached teacher samples."""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .batching import SceneTensors, epoch_batches
from .core import ConfigurationError
from .network import MotionDenoiser, PredictionSet, forward_student
from .teacher import TrainConfig, TrainingError, cosine_lr, make_optimizer


class DatasetError(KeyError):
    pass


@dataclass
class DistillConfig:
    m: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    max_steps: int = 2000
    seed: int = 0
    grad_clip: float = 1.0
    lr_min_ratio: float = 0.1
    log_every: int = 50
    teacher_samples: str | None = None

    def validate(self) -> None:
        errors = []
        if self.m < 1:
            errors.append(f"m={self.m} must be >= 1")
        errors += [f"{name} must be > 0" for name in ("batch_size", "learning_rate", "max_steps")
                   if not getattr(self, name) > 0]
        if errors:
            raise ConfigurationError("; ".join(errors))

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           weight_decay=self.weight_decay, max_steps=self.max_steps,
                           seed=self.seed, mask=False, grad_clip=self.grad_clip,
                           lr_min_ratio=self.lr_min_ratio)


def pairwise_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Frobenius distances between components: (..., K, A, D) x (..., K', A, D) -> (..., K, K')."""
    diff = a.unsqueeze(-3) - b.unsqueeze(-4)
    return torch.linalg.vector_norm(diff.flatten(-2), dim=-1)


def chamfer(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Bidirectional nearest-component distance between two K-sets, divided by K."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    dist = pairwise_distances(a, b)
    K = a.shape[-3]
    return (dist.min(dim=-1).values.sum(-1) + dist.min(dim=-2).values.sum(-1)) / K


def student_noise(B: int, m: int, K: int, A: int, T_f: int,
                  generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(B, m, K, A, 2 * T_f, generator=generator, dtype=dtype)


def imle_select(model: MotionDenoiser, batch: SceneTensors, target: torch.Tensor, m: int,
                generator: torch.Generator | None = None):
    """Draw ``m`` candidates per scene and return ``(z_pi, pi, chamfer_pi)``.

    target: (B, K, A, D) teacher samples in normalized space.
    """
    B, K, A, D = target.shape
    z = student_noise(B, m, K, A, D // 2, generator, target.dtype)
    model.eval()
    with torch.no_grad():
        ctx = batch.context[:, None].expand(B, m, *batch.context.shape[1:]).flatten(0, 1)
        ids = batch.type_ids[:, None].expand(B, m, A).flatten(0, 1)
        gamma = model(z.flatten(0, 1), ctx, ids).waypoints.reshape(B, m, K, A, D)
        dist = chamfer(target[:, None].expand_as(gamma), gamma)
    pi = dist.argmin(dim=1)
    return z[torch.arange(B), pi], pi, dist[torch.arange(B), pi]


def distill_step(model: MotionDenoiser, optimizer: torch.optim.Optimizer, batch: SceneTensors,
                 target: torch.Tensor, config: DistillConfig,
                 generator: torch.Generator | None = None) -> dict:
    """Select the nearest of ``m`` candidates per scene, then descend on its Chamfer loss only."""
    z_pi, pi, _ = imle_select(model, batch, target, config.m, generator)
    # same (dropout-free) network as the selection pass, so the update sees Gamma_pi itself
    pred = forward_student(model, z_pi, batch.context, batch.type_ids, mode="eval")
    loss = chamfer(target, pred.waypoints).mean()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return {"loss": loss.item(), "pi": pi.tolist()}


def train_student(model: MotionDenoiser, groups: dict[int, SceneTensors],
                  targets: dict[int, torch.Tensor], config: DistillConfig,
                  log: Callable[[dict], None] | None = None,
                  callback: Callable[[int], None] | None = None) -> list[dict]:
    """``targets[A]`` holds the normalized teacher samples aligned with ``groups[A]``."""
    config.validate()
    train_cfg = config.as_train_config()
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, train_cfg)
    index = {A: list(range(len(t))) for A, t in groups.items()}
    history, queue = [], []
    pi_counts: Counter = Counter()
    epoch = 0
    start = time.perf_counter()
    for step in range(config.max_steps):
        if not queue:
            if pi_counts and log is not None:
                log({"epoch": epoch, "pi_histogram": [pi_counts.get(j, 0) for j in range(config.m)],
                     "wallclock_s": round(time.perf_counter() - start, 3)})
                epoch += 1
            pi_counts = Counter()
            queue = epoch_batches(index, config.batch_size, rng)
        A, idx = queue.pop()
        for group in optimizer.param_groups:
            group["lr"] = cosine_lr(step, train_cfg)
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        out = distill_step(model, optimizer, groups[A].select(idx), targets[A][idx_t], config,
                           generator)
        pi_counts.update(out.pop("pi"))
        record = {"step": step, **out}
        history.append(record)
        if log is not None and (step % config.log_every == 0 or step == config.max_steps - 1):
            log({**record, "wallclock_s": round(time.perf_counter() - start, 3)})
        if callback is not None:
            callback(step)
    model.eval()
    return history


@torch.no_grad()
def student_sample(model: MotionDenoiser, batch: SceneTensors, K: int | None = None,
                   generator: torch.Generator | None = None,
                   z: torch.Tensor | None = None) -> PredictionSet:
    """One network evaluation on fresh latent noise; normalized space, uniform probabilities."""
    K = model.cfg.K if K is None else K
    B, A, _ = batch.context.shape
    if z is None:
        z = torch.randn(B, K, A, 2 * model.cfg.T_f, generator=generator, dtype=batch.context.dtype)
    pred = forward_student(model, z, batch.context, batch.type_ids, mode="eval")
    return PredictionSet(pred.waypoints, torch.zeros_like(pred.logits))


@torch.no_grad()
def mean_chamfer(model: MotionDenoiser, batch: SceneTensors, target: torch.Tensor,
                 generator: torch.Generator | None = None) -> float:
    """Average Chamfer distance from fresh student samples to the teacher samples."""
    pred = student_sample(model, batch, target.shape[1], generator)
    return chamfer(target, pred.waypoints).mean().item()
