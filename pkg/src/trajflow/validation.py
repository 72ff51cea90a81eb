"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .core import Scene, SceneValidationError
from .student import DatasetError


def check_scenes(scenes, T_p: int | None = None, T_f: int | None = None,
                 agent_types: Sequence[str] | None = None, allow_empty: bool = False) -> list[Scene]:
    """Materialize ``scenes`` and validate every one against common T_p/T_f."""
    if isinstance(scenes, Scene):
        scenes = [scenes]
    scenes = list(scenes)
    if not scenes and not allow_empty:
        raise SceneValidationError("expected at least one scene")
    for scene in scenes:
        if not isinstance(scene, Scene):
            raise TypeError(f"expected Scene, got {type(scene).__name__}")
        scene.validate(T_p, T_f, agent_types)
        T_p, T_f = scene.T_p, scene.T_f
    return scenes


def check_teacher_samples(scenes: Sequence[Scene], samples, K: int | None = None) -> list[np.ndarray]:
    """Align teacher samples with ``scenes``.

    ``samples`` is either a sequence parallel to ``scenes`` or a mapping from
    scene id to a (K, A, T_f, 2) array (e.g. a loaded sample dump).
    """
    if isinstance(samples, Mapping):
        missing = [s.scene_id for s in scenes if s.scene_id not in samples]
        if missing:
            raise DatasetError(f"no teacher sample for {len(missing)} scene(s), "
                               f"first: {missing[0]!r}")
        samples = [samples[s.scene_id] for s in scenes]
    samples = [np.asarray(x, dtype=np.float64) for x in samples]
    if len(samples) != len(scenes):
        raise DatasetError(f"{len(samples)} teacher samples for {len(scenes)} scenes")
    for scene, x in zip(scenes, samples):
        expected = (K if K is not None else x.shape[0], scene.n_agents, scene.T_f, 2)
        if x.shape != expected:
            raise DatasetError(f"teacher sample for {scene.scene_id!r} has shape {x.shape}, "
                               f"expected {expected}")
    return samples
