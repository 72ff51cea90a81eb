"""Stacking scenes into tensors; scenes are grouped by agent count so no padding is needed."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import Normalizer, Scene, build_context, normalize_future


@dataclass
class SceneTensors:
    context: torch.Tensor  # (B, A, 6*T_p)
    type_ids: torch.Tensor  # (B, A) long
    y1: torch.Tensor | None  # (B, A, 2*T_f) normalized futures

    def __len__(self) -> int:
        return self.context.shape[0]

    def select(self, idx) -> "SceneTensors":
        idx = torch.as_tensor(idx, dtype=torch.long)
        y1 = None if self.y1 is None else self.y1[idx]
        return SceneTensors(self.context[idx], self.type_ids[idx], y1)


def type_lookup(agent_types: Sequence[str]) -> dict[str, int]:
    return {name: i for i, name in enumerate(agent_types)}


def stack_scenes(scenes: Sequence[Scene], normalizer: Normalizer | None,
                 agent_types: Sequence[str], dtype=torch.float32,
                 with_future: bool = True) -> SceneTensors:
    """All scenes must share the same agent count."""
    lookup = type_lookup(agent_types)
    n_agents = {s.n_agents for s in scenes}
    if len(n_agents) != 1:
        raise ValueError(f"scenes in one batch must share agent count, got {sorted(n_agents)}")
    try:
        type_ids = [[lookup[t] for t in s.agent_types] for s in scenes]
    except KeyError as exc:
        raise ValueError(f"unknown agent type {exc.args[0]!r}; declared: {list(agent_types)}") from None
    context = np.stack([build_context(s) for s in scenes])
    y1 = None
    if with_future and normalizer is not None:
        y1 = torch.as_tensor(np.stack([normalize_future(s.future, s, normalizer) for s in scenes]),
                             dtype=dtype)
    return SceneTensors(torch.as_tensor(context, dtype=dtype),
                        torch.as_tensor(type_ids, dtype=torch.long), y1)


def group_by_agent_count(scenes: Sequence[Scene]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(scenes):
        groups[s.n_agents].append(i)
    return dict(sorted(groups.items()))


def epoch_batches(groups: dict[int, list[int]], batch_size: int,
                  rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """Shuffled (agent_count, positions-within-group) batches covering every scene once."""
    batches = []
    for A, members in groups.items():
        order = rng.permutation(len(members))
        for start in range(0, len(order), batch_size):
            batches.append((A, order[start:start + batch_size]))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]

