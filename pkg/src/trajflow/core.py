"""Scene containers, context features, normalization and flow-time primitives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

N_FEATURES = 6  # abs xy, xy relative to last observed frame, velocity xy


class SceneValidationError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class AgentRecord:
    agent_id: str
    agent_type: str
    past: np.ndarray  # (T_p, 2)
    future: np.ndarray  # (T_f, 2)

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)


@dataclass
class Scene:
    scene_id: str
    dt: float
    agents: list[AgentRecord] = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def T_p(self) -> int:
        return self.agents[0].past.shape[0]

    @property
    def T_f(self) -> int:
        return self.agents[0].future.shape[0]

    @property
    def past(self) -> np.ndarray:
        """(A, T_p, 2) array of observed positions."""
        return np.stack([a.past for a in self.agents])

    @property
    def future(self) -> np.ndarray:
        """(A, T_f, 2) array of ground-truth positions."""
        return np.stack([a.future for a in self.agents])

    @property
    def last_observed(self) -> np.ndarray:
        return np.stack([a.past[-1] for a in self.agents])

    @property
    def agent_types(self) -> list[str]:
        return [a.agent_type for a in self.agents]

    def validate(self, T_p: int | None = None, T_f: int | None = None,
                 agent_types: Sequence[str] | None = None) -> None:
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise SceneValidationError(f"scene {self.scene_id!r}: dt must be positive, got {self.dt}")
        if not self.agents:
            raise SceneValidationError(f"scene {self.scene_id!r}: no agents")
        T_p = self.T_p if T_p is None else T_p
        T_f = self.T_f if T_f is None else T_f
        if T_p < 1 or T_f < 1:
            raise SceneValidationError(f"scene {self.scene_id!r}: empty past or future")
        for agent in self.agents:
            if agent.past.shape != (T_p, 2):
                raise SceneValidationError(
                    f"scene {self.scene_id!r}, agent {agent.agent_id!r}: past has shape "
                    f"{agent.past.shape}, expected ({T_p}, 2)")
            if agent.future.shape != (T_f, 2):
                raise SceneValidationError(
                    f"scene {self.scene_id!r}, agent {agent.agent_id!r}: future has shape "
                    f"{agent.future.shape}, expected ({T_f}, 2)")
            if not (np.isfinite(agent.past).all() and np.isfinite(agent.future).all()):
                raise SceneValidationError(
                    f"scene {self.scene_id!r}, agent {agent.agent_id!r}: non-finite coordinates")
            if agent_types is not None and agent.agent_type not in agent_types:
                raise SceneValidationError(
                    f"scene {self.scene_id!r}, agent {agent.agent_id!r}: unknown agent type "
                    f"{agent.agent_type!r}")


@dataclass(frozen=True)
class Normalizer:
    """Per-axis min-max statistics of future displacements from the last observed position."""
    min_disp: tuple[float, float]
    max_disp: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "min_disp", tuple(float(v) for v in self.min_disp))
        object.__setattr__(self, "max_disp", tuple(float(v) for v in self.max_disp))

    def check(self) -> None:
        lo, hi = np.asarray(self.min_disp), np.asarray(self.max_disp)
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()) or np.any(hi <= lo):
            raise ConfigurationError(
                f"degenerate normalizer: min_disp={self.min_disp}, max_disp={self.max_disp}")

    def to_dict(self) -> dict:
        return {"min_disp": list(self.min_disp), "max_disp": list(self.max_disp)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(d["min_disp"]), tuple(d["max_disp"]))


def build_context(scene: Scene) -> np.ndarray:
    """Return the (A, 6 * T_p) context matrix.

    Each row concatenates, frame by frame, ``[abs_x, abs_y, rel_x, rel_y, vel_x, vel_y]``.
    Relative coordinates are taken w.r.t. the last observed frame; velocities are
    backward differences divided by ``dt`` with the earliest frame set to zero.
    """
    scene.validate()
    past = scene.past
    rel = past - past[:, -1:, :]
    vel = np.zeros_like(past)
    vel[:, 1:] = (past[:, 1:] - past[:, :-1]) / scene.dt
    feats = np.concatenate([past, rel, vel], axis=-1)  # (A, T_p, 6)
    return feats.reshape(past.shape[0], -1)


def normalize_future(future: np.ndarray, scene: Scene, norm: Normalizer) -> np.ndarray:
    """Map absolute (A, T_f, 2) future coordinates to the (A, 2*T_f) normalized space.

    No clipping: out-of-range displacements map outside [-1, 1].
    """
    norm.check()
    future = np.asarray(future, dtype=np.float64)
    lo, hi = np.asarray(norm.min_disp), np.asarray(norm.max_disp)
    rel = future - scene.last_observed[:, None, :]
    out = 2.0 * (rel - lo) / (hi - lo) - 1.0
    return out.reshape(future.shape[0], -1)


def denormalize_future(normalized: np.ndarray, scene: Scene, norm: Normalizer) -> np.ndarray:
    """Inverse of :func:`normalize_future`; accepts any leading batch dims before (A, 2*T_f)."""
    norm.check()
    normalized = np.asarray(normalized, dtype=np.float64)
    lo, hi = np.asarray(norm.min_disp), np.asarray(norm.max_disp)
    shaped = normalized.reshape(*normalized.shape[:-1], -1, 2)
    rel = (shaped + 1.0) * (hi - lo) / 2.0 + lo
    return rel + scene.last_observed[:, None, :]


def interpolate(y0, y1, t):
    """Linear probability path ``(1 - t) * y0 + t * y1``."""
    if tuple(y0.shape) != tuple(y1.shape):
        raise ValueError(f"shape mismatch: {tuple(y0.shape)} vs {tuple(y1.shape)}")
    if isinstance(t, (int, float)):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {t}")
        if t == 0:
            return y0.clone() if torch.is_tensor(y0) else np.array(y0, copy=True)
        if t == 1:
            return y1.clone() if torch.is_tensor(y1) else np.array(y1, copy=True)
    return (1 - t) * y0 + t * y1


def tied_noise(K: int, A: int, T_f: int, generator: torch.Generator | None = None,
               batch: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """One standard-normal (A, 2*T_f) draw repeated K times along a new leading axis.

    With ``batch`` set, returns (batch, K, A, 2*T_f) with an independent draw per batch row.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    lead = () if batch is None else (batch,)
    base = torch.randn(*lead, 1, A, 2 * T_f, generator=generator, dtype=dtype)
    return base.expand(*lead, K, A, 2 * T_f).clone()


def derive_seed(root: int, name: str) -> int:
    """Deterministic per-subsystem seed from one root seed."""
    key = int.from_bytes(name.encode(), "little") % (2**63)
    return int(np.random.SeedSequence([root, key]).generate_state(1, dtype=np.uint64)[0] % (2**63))
