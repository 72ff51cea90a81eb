"""Best-of-K displacement metrics and evaluation reports."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Scene


def _displacements(preds: np.ndarray, gt: np.ndarray, horizon: int) -> np.ndarray:
    """(K, A, T_f, 2) vs (A, T_f, 2) -> (K, A, horizon) Euclidean errors."""
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim != 4 or preds.shape[1:] != gt.shape or preds.shape[-1] != 2:
        raise ValueError(f"shape mismatch: preds {preds.shape}, gt {gt.shape}")
    if not 1 <= horizon <= gt.shape[1]:
        raise ValueError(f"horizon {horizon} outside [1, {gt.shape[1]}]")
    return np.linalg.norm(preds[:, :, :horizon] - gt[None, :, :horizon], axis=-1)


def min_ade(preds, gt, horizon: int | None = None) -> float:
    """Per-agent best-of-K average displacement, averaged over agents."""
    horizon = np.shape(gt)[1] if horizon is None else horizon
    err = _displacements(preds, gt, horizon).mean(axis=-1)  # (K, A)
    return float(err.min(axis=0).mean())


def min_fde(preds, gt, horizon: int | None = None) -> float:
    horizon = np.shape(gt)[1] if horizon is None else horizon
    err = _displacements(preds, gt, horizon)[..., -1]
    return float(err.min(axis=0).mean())


def joint_ade_fde(preds, gt, horizon: int | None = None) -> tuple[float, float]:
    """Scene-level best-of-K: one prediction index shared by all agents."""
    horizon = np.shape(gt)[1] if horizon is None else horizon
    err = _displacements(preds, gt, horizon)
    jade = err.mean(axis=-1).mean(axis=-1).min()
    jfde = err[..., -1].mean(axis=-1).min()
    return float(jade), float(jfde)


@dataclass
class EvalReport:
    horizons: list[int]
    min_ade: list[float]
    min_fde: list[float]
    jade: list[float]
    jfde: list[float]
    n_scenes: int
    nfe: int
    K: int
    dt: float | None = None
    wallclock_ms_per_scene: float | None = field(default=None, compare=False)

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wallclock_ms_per_scene")
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def table(self) -> str:
        """Plain-text table: one row per horizon, minADE/minFDE and JADE/JFDE columns."""
        lines = [f"{'Time':>12} | {f'min{self.K}ADE/FDE':>18} | {f'min{self.K}JADE/JFDE':>20}",
                 "-" * 58]
        for i, h in enumerate(self.horizons):
            label = f"{h * self.dt:.1f}s" if self.dt else f"{h} fr"
            if i == len(self.horizons) - 1:
                label = f"Total ({label})"
            lines.append(f"{label:>12} | {self.min_ade[i]:8.3f}/{self.min_fde[i]:<9.3f} | "
                         f"{self.jade[i]:9.3f}/{self.jfde[i]:<10.3f}")
        lines.append(f"scenes={self.n_scenes}  NFE={self.nfe}")
        return "\n".join(lines) + "\n"


def horizons_from_seconds(seconds: Sequence[float], dt: float, T_f: int) -> list[int]:
    frames = [int(round(s / dt)) for s in seconds]
    return [f for f in frames if 1 <= f <= T_f]


def default_horizons(T_f: int, n: int = 4) -> list[int]:
    """``n`` evenly spaced horizons ending at ``T_f``."""
    return sorted({max(1, int(round(T_f * (i + 1) / n))) for i in range(n)})


def evaluate(predict: Callable[[Sequence[Scene]], tuple[list[np.ndarray], int]],
             scenes: Sequence[Scene], horizons: Sequence[int]) -> EvalReport:
    """Score a sampler on ``scenes``.

    ``predict`` returns per-scene (K, A, T_f, 2) absolute predictions and the
    number of network evaluations one sample needed.
    """
    if not scenes:
        raise ValueError("cannot evaluate an empty split")
    start = time.perf_counter()
    preds, nfe = predict(scenes)
    elapsed = time.perf_counter() - start
    horizons = list(horizons)
    acc = np.zeros((4, len(horizons)))
    for p, scene in zip(preds, scenes):
        gt = scene.future
        for j, h in enumerate(horizons):
            acc[0, j] += min_ade(p, gt, h)
            acc[1, j] += min_fde(p, gt, h)
            acc[2:, j] += joint_ade_fde(p, gt, h)
    acc /= len(scenes)
    return EvalReport(horizons, *(acc[i].tolist() for i in range(4)), n_scenes=len(scenes),
                      nfe=int(nfe), K=int(np.shape(preds[0])[0]), dt=scenes[0].dt,
                      wallclock_ms_per_scene=1000 * elapsed / len(scenes))
