"""Scene JSON-lines files, dataset manifests and the synthetic multi-modal generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import AgentRecord, ConfigurationError, Normalizer, Scene, SceneValidationError


class SceneFileError(ValueError):
    """Raised for malformed scene files; the message carries the offending line number."""


def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "agents": [
            {"id": a.agent_id, "type": a.agent_type,
             "past": a.past.tolist(), "future": a.future.tolist()}
            for a in scene.agents
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    agents = [
        AgentRecord(str(a["id"]), str(a["type"]),
                    np.asarray(a["past"], dtype=np.float64).reshape(-1, 2),
                    np.asarray(a["future"], dtype=np.float64).reshape(-1, 2))
        for a in d["agents"]
    ]
    return Scene(str(d["scene_id"]), float(d["dt"]), agents)


def read_scenes(path, T_p: int | None = None, T_f: int | None = None,
                agent_types: Sequence[str] | None = None) -> Iterator[Scene]:
    """Yield scenes from a JSON-lines file in file order.

    When ``T_p``/``T_f`` are not given they are taken from the first scene and
    enforced on the rest of the file.
    """
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFileError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                scene = scene_from_dict(record)
            except (KeyError, TypeError, ValueError) as exc:
                raise SceneFileError(f"{path}:{lineno}: bad scene record ({exc})") from exc
            try:
                scene.validate(T_p, T_f, agent_types)
            except SceneValidationError as exc:
                raise SceneFileError(f"{path}:{lineno}: {exc}") from exc
            T_p, T_f = scene.T_p, scene.T_f
            yield scene


def write_scenes(scenes: Iterable[Scene], path) -> None:
    # json emits repr() floats, which round-trip exactly
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene)) + "\n")


def fit_normalizer(scenes: Iterable[Scene]) -> Normalizer:
    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for scene in scenes:
        rel = scene.future - scene.last_observed[:, None, :]
        lo = np.minimum(lo, rel.reshape(-1, 2).min(axis=0))
        hi = np.maximum(hi, rel.reshape(-1, 2).max(axis=0))
    if not np.isfinite(lo).all():
        raise ConfigurationError("cannot fit a normalizer on an empty scene collection")
    return Normalizer(tuple(lo), tuple(hi))


@dataclass
class DatasetManifest:
    name: str
    T_p: int
    T_f: int
    dt: float
    agent_types: list[str]
    splits: dict[str, str]
    normalizer: Normalizer
    root: Path = field(default=Path("."), compare=False, repr=False)

    def split_path(self, split: str) -> Path:
        if split not in self.splits:
            raise KeyError(f"manifest {self.name!r} has no split {split!r}; "
                           f"available: {sorted(self.splits)}")
        p = Path(self.splits[split])
        return p if p.is_absolute() else self.root / p

    def load_split(self, split: str) -> list[Scene]:
        return list(read_scenes(self.split_path(split), self.T_p, self.T_f, self.agent_types))

    def to_dict(self) -> dict:
        return {"name": self.name, "T_p": self.T_p, "T_f": self.T_f, "dt": self.dt,
                "agent_types": list(self.agent_types), "splits": dict(self.splits),
                "normalizer": self.normalizer.to_dict()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        manifest = cls(d["name"], int(d["T_p"]), int(d["T_f"]), float(d["dt"]),
                       list(d["agent_types"]), dict(d["splits"]),
                       Normalizer.from_dict(d["normalizer"]), root=path.parent)
        for split in manifest.splits:
            if not manifest.split_path(split).exists():
                raise FileNotFoundError(f"split {split!r} missing: {manifest.split_path(split)}")
        return manifest


@dataclass
class SyntheticConfig:
    """Straight walkers that may turn toward one of ``G`` goals once the past window ends.

    ``coupled`` draws one goal choice per scene that every agent follows, so the
    scene has exactly ``G`` joint modes instead of ``G ** A``.
    """
    A: int = 2
    G: int = 2
    goal_separation: float = 10.0
    speed: float = 1.0
    noise_sigma: float = 0.1
    mode_switch_prob: float = 0.5
    seed: int = 0
    T_p: int = 8
    T_f: int = 12
    dt: float = 0.4
    extent: float = 10.0
    coupled: bool = False
    agent_type: str = "pedestrian"

    def validate(self) -> None:
        errors = []
        if self.A < 1:
            errors.append("A must be >= 1")
        if self.G < 1:
            errors.append("G must be >= 1")
        if not self.goal_separation > 0:
            errors.append("goal_separation must be > 0")
        if self.noise_sigma < 0:
            errors.append("noise_sigma must be >= 0")
        if not 0 <= self.mode_switch_prob <= 1:
            errors.append("mode_switch_prob must lie in [0, 1]")
        if self.T_p < 2 or self.T_f < 1:
            errors.append("need T_p >= 2 and T_f >= 1")
        if not self.dt > 0:
            errors.append("dt must be > 0")
        if errors:
            raise ConfigurationError("; ".join(errors))


def _goals(cont: np.ndarray, heading: np.ndarray, G: int, radius: float) -> np.ndarray:
    """Candidate goals on a circle around the constant-velocity continuation point."""
    if G == 1:
        return cont[None]
    base = math.atan2(heading[1], heading[0]) + math.pi / 2
    angles = base + 2 * math.pi * np.arange(G) / G
    return cont + radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def generate_synthetic(config: SyntheticConfig, n_scenes: int,
                       return_switches: bool = False):
    """Generate ``n_scenes`` scenes; pure function of ``(config, n_scenes)``.

    Each agent walks in a straight line at ``speed`` over the past window; the
    future heads linearly (uniform spacing) from the last observed position to a
    goal. The initial goal index is uniform over the ``G`` candidates and is
    resampled among the *other* candidates with probability ``mode_switch_prob``
    at the past/future boundary. For ``G == 1`` the only goal is the straight-line
    continuation point.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    radius = config.goal_separation / 2
    T_p, T_f, dt = config.T_p, config.T_f, config.dt
    past_steps = np.arange(-(T_p - 1), 1)[:, None]
    fut_frac = (np.arange(1, T_f + 1) / T_f)[:, None]
    scenes, switches = [], []
    for s in range(n_scenes):
        shared_goal = shared_switch = None
        if config.coupled:
            shared_goal = int(rng.integers(config.G))
            shared_switch = bool(rng.random() < config.mode_switch_prob)
        agents = []
        for a in range(config.A):
            last = rng.uniform(-config.extent, config.extent, size=2)
            theta = rng.uniform(0, 2 * math.pi)
            heading = np.array([math.cos(theta), math.sin(theta)])
            vel = config.speed * heading
            past = last + past_steps * dt * vel
            cont = last + T_f * dt * vel
            goals = _goals(cont, heading, config.G, radius)
            if config.coupled:
                goal_idx, switch = shared_goal, shared_switch
            else:
                goal_idx = int(rng.integers(config.G))
                switch = bool(rng.random() < config.mode_switch_prob)
            if switch and config.G > 1:
                others = [g for g in range(config.G) if g != goal_idx]
                goal_idx = others[int(rng.integers(len(others)))]
            else:
                switch = False
            future = last + fut_frac * (goals[goal_idx] - last)
            if config.noise_sigma > 0:
                past = past + rng.normal(0.0, config.noise_sigma, size=past.shape)
                future = future + rng.normal(0.0, config.noise_sigma, size=future.shape)
            agents.append(AgentRecord(f"a{a}", config.agent_type, past, future))
            switches.append(switch)
        scenes.append(Scene(f"syn-{config.seed}-{s:06d}", dt, agents))
    if return_switches:
        return scenes, np.asarray(switches)
    return scenes

