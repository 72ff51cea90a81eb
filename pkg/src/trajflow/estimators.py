"""scikit-learn style front ends for the flow teacher and the one-step student.

Both estimators take a list of :class:`~trajflow.core.Scene` as ``X``. The
targets live inside the scenes (``Scene.future``), so ``y`` is ignored by the
teacher; the student's ``y`` is the teacher's sample set.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .batching import SceneTensors, group_by_agent_count, stack_scenes
from .checkpoint import Checkpoint, config_hash
from .core import Normalizer, Scene, derive_seed, normalize_future
from .dataio import fit_normalizer
from .metrics import min_ade
from .network import MotionDenoiser, NetworkConfig, PredictionSet
from .sampler import SamplerConfig, sample, softmax, to_absolute
from .student import DistillConfig, mean_chamfer, student_sample, train_student
from .teacher import TimeSchedule, TrainConfig, train_teacher
from .validation import check_scenes, check_teacher_samples

_NETWORK_PARAMS = ("d_model", "d_ff", "n_heads", "n_enc_layers", "n_dec_blocks", "dropout",
                   "mask_k", "mask_m")


class _ForecasterBase(BaseEstimator):
    time_conditioned = True

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(T_p=self.T_p_, T_f=self.T_f_, n_agent_types=len(self.agent_types_),
                             K=self.n_predictions,
                             **{name: getattr(self, name) for name in _NETWORK_PARAMS})

    def _prepare(self, scenes: list[Scene]) -> None:
        self.T_p_, self.T_f_ = scenes[0].T_p, scenes[0].T_f
        self.agent_types_ = (list(self.agent_types) if self.agent_types is not None
                             else sorted({t for s in scenes for t in s.agent_types}))
        self.normalizer_ = self.normalizer if self.normalizer is not None else fit_normalizer(scenes)
        self.normalizer_.check()

    def _check_input(self, scenes) -> list[Scene]:
        check_is_fitted(self, "model_")
        return check_scenes(scenes, self.T_p_, self.T_f_, self.agent_types_)

    def _stack(self, scenes: Sequence[Scene], with_future: bool = True) -> SceneTensors:
        return stack_scenes(scenes, self.normalizer_, self.agent_types_, with_future=with_future)

    def _grouped(self, scenes: list[Scene]) -> dict[int, tuple[list[int], SceneTensors]]:
        return {A: (idx, self._stack([scenes[i] for i in idx]))
                for A, idx in group_by_agent_count(scenes).items()}

    def _run(self, scenes: list[Scene], fn: Callable[[SceneTensors], PredictionSet],
             chunk: int | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Apply ``fn`` to same-size chunks; return per-scene absolute predictions and probs."""
        chunk = chunk or self.predict_batch_size
        preds: list = [None] * len(scenes)
        probs: list = [None] * len(scenes)
        for A, idx in group_by_agent_count(scenes).items():
            for start in range(0, len(idx), chunk):
                part = idx[start:start + chunk]
                out = fn(self._stack([scenes[i] for i in part], with_future=False))
                waypoints = out.waypoints.double().numpy()
                p = softmax(out.logits.double().numpy())
                for j, i in enumerate(part):
                    preds[i] = to_absolute(waypoints[j], scenes[i], self.normalizer_)
                    probs[i] = p[j]
        return preds, probs

    def predict(self, X) -> list[np.ndarray]:
        """Per-scene (K, A, T_f, 2) absolute predictions."""
        return self.sample(X)[0]

    def predict_proba(self, X) -> np.ndarray:
        """(n_scenes, K) softmax probabilities of the K predictions."""
        return np.stack(self.sample(X)[1])

    def score(self, X, y=None) -> float:
        """Negative mean min-K ADE over the full horizon (higher is better)."""
        scenes = self._check_input(X)
        preds = self.predict(scenes)
        return -float(np.mean([min_ade(p, s.future) for p, s in zip(preds, scenes)]))

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        check_is_fitted(self, "model_")
        params = {k: v for k, v in self.get_params().items() if k not in ("normalizer", "warm_start")}
        return Checkpoint.from_model(self.kind, self.model_, self.normalizer_, self.agent_types_,
                                     config_hash(params), extra)

    def _load(self, ckpt: Checkpoint) -> None:
        cfg = ckpt.network
        self.T_p_, self.T_f_ = cfg.T_p, cfg.T_f
        self.agent_types_ = list(ckpt.agent_types)
        self.normalizer_ = ckpt.normalizer
        self.model_ = ckpt.build_model()


class FlowForecaster(_ForecasterBase):
    """K-shot conditional flow-matching forecaster sampled with a denoising ODE.

    Parameters mirror the network, training and sampling configuration; see
    :class:`NetworkConfig`, :class:`TrainConfig` and :class:`SamplerConfig`.
    """
    kind = "teacher"

    def __init__(self, n_predictions=20, d_model=128, d_ff=512, n_heads=8, n_enc_layers=4,
                 n_dec_blocks=4, dropout=0.1, mask=True, mask_k=20.0, mask_m=0.5, mu_t=-0.5,
                 sigma_t=1.5, batch_size=64, learning_rate=1e-3, weight_decay=0.01,
                 max_steps=2000, sampling_steps=100, time_power=5.0, continuous_time_map=False,
                 agent_types=None, normalizer=None, predict_batch_size=256, seed=0):
        self.n_predictions = n_predictions
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.n_enc_layers = n_enc_layers
        self.n_dec_blocks = n_dec_blocks
        self.dropout = dropout
        self.mask = mask
        self.mask_k = mask_k
        self.mask_m = mask_m
        self.mu_t = mu_t
        self.sigma_t = sigma_t
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_steps = max_steps
        self.sampling_steps = sampling_steps
        self.time_power = time_power
        self.continuous_time_map = continuous_time_map
        self.agent_types = agent_types
        self.normalizer = normalizer
        self.predict_batch_size = predict_batch_size
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           weight_decay=self.weight_decay, max_steps=self.max_steps,
                           seed=derive_seed(self.seed, "teacher-train"), mask=self.mask)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(T=self.sampling_steps, p=self.time_power,
                             continuous=self.continuous_time_map)

    def fit(self, X, y=None, log=None, callback=None):
        scenes = check_scenes(X, agent_types=self.agent_types)
        self._prepare(scenes)
        self.sampler_config().validate()
        torch.manual_seed(derive_seed(self.seed, "teacher-init"))
        self.model_ = MotionDenoiser(self.network_config(), time_conditioned=True)
        groups = {A: t for A, (_, t) in self._grouped(scenes).items()}
        self.history_ = train_teacher(self.model_, groups, TimeSchedule(self.mu_t, self.sigma_t),
                                      self.train_config(), log=log, callback=callback)
        return self

    @property
    def nfe_per_sample(self) -> int:
        return self.sampling_steps

    def sample(self, X, K: int | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """ODE samples: per-scene (K, A, T_f, 2) absolute coordinates and softmax probabilities."""
        scenes = self._check_input(X)
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "teacher-sample"))
        cfg = self.sampler_config()
        return self._run(scenes, lambda batch: sample(self.model_, batch, cfg, gen, K))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **params) -> "FlowForecaster":
        cfg = ckpt.network
        est = cls(n_predictions=cfg.K, **{n: getattr(cfg, n) for n in _NETWORK_PARAMS},
                  agent_types=list(ckpt.agent_types), **params)
        est._load(ckpt)
        return est


class IMLEForecaster(_ForecasterBase):
    """One-step generator distilled from cached teacher samples by IMLE.

    ``fit(X, y)`` takes the scenes and the teacher samples for them: either a
    list parallel to ``X`` or a mapping ``scene_id -> (K, A, T_f, 2)`` array.

    ``warm_start`` (a fitted :class:`FlowForecaster` or a teacher
    :class:`Checkpoint`) initializes every shared weight from the teacher; only
    the flow-time embedding is dropped. From a cold start the one-step student
    tends to put all K components on one mode, a flat region of the Chamfer loss.
    """
    kind = "student"

    def __init__(self, n_predictions=20, d_model=128, d_ff=512, n_heads=8, n_enc_layers=4,
                 n_dec_blocks=4, dropout=0.1, m=20, batch_size=64, learning_rate=1e-3,
                 weight_decay=0.01, max_steps=2000, warm_start=None, agent_types=None,
                 normalizer=None, predict_batch_size=256, seed=0):
        self.n_predictions = n_predictions
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.n_enc_layers = n_enc_layers
        self.n_dec_blocks = n_dec_blocks
        self.dropout = dropout
        self.m = m
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_steps = max_steps
        self.warm_start = warm_start
        self.agent_types = agent_types
        self.normalizer = normalizer
        self.predict_batch_size = predict_batch_size
        self.seed = seed

    # the student has no masking; keep the architecture fields at their defaults
    mask_k = 20.0
    mask_m = 0.5

    def distill_config(self) -> DistillConfig:
        return DistillConfig(m=self.m, batch_size=self.batch_size,
                             learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                             max_steps=self.max_steps, seed=derive_seed(self.seed, "student-train"))

    def _targets(self, scenes: list[Scene], samples: list[np.ndarray]) -> dict[int, torch.Tensor]:
        out = {}
        for A, idx in group_by_agent_count(scenes).items():
            out[A] = torch.as_tensor(np.stack([
                np.stack([normalize_future(k, scenes[i], self.normalizer_) for k in samples[i]])
                for i in idx]), dtype=torch.float32)
        return out

    def fit(self, X, y, log=None, callback=None):
        scenes = check_scenes(X, agent_types=self.agent_types)
        samples = check_teacher_samples(scenes, y, self.n_predictions)
        self._prepare(scenes)
        torch.manual_seed(derive_seed(self.seed, "student-init"))
        self.model_ = MotionDenoiser(self.network_config(), time_conditioned=False)
        if self.warm_start is not None:
            self._copy_teacher(self.warm_start)
        grouped = self._grouped(scenes)
        groups = {A: t for A, (_, t) in grouped.items()}
        targets = self._targets(scenes, samples)
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "student-chamfer"))
        self.initial_chamfer_ = float(np.mean([mean_chamfer(self.model_, groups[A], targets[A], gen)
                                               for A in groups]))
        self.history_ = train_student(self.model_, groups, targets, self.distill_config(), log=log,
                                      callback=callback)
        return self

    def _copy_teacher(self, teacher) -> None:
        ckpt = teacher if isinstance(teacher, Checkpoint) else teacher.to_checkpoint()
        if ckpt.kind != "teacher":
            raise ValueError(f"warm_start needs a teacher, got a {ckpt.kind} checkpoint")
        mine, theirs = self.model_.cfg, ckpt.network
        diffs = [k for k in ("K", "d_model", "d_ff", "n_heads", "n_enc_layers", "n_dec_blocks",
                             "T_p", "T_f", "n_agent_types") if getattr(mine, k) != getattr(theirs, k)]
        if diffs or list(ckpt.agent_types) != self.agent_types_:
            raise ValueError(f"warm_start teacher architecture differs in {diffs or ['agent_types']}")
        state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.state.items()
                 if not k.startswith("time_embedding.")}
        self.model_.load_state_dict(state)

    def chamfer_to(self, X, y) -> float:
        """Mean Chamfer distance (normalized space) between fresh student samples and ``y``."""
        scenes = self._check_input(X)
        samples = check_teacher_samples(scenes, y, self.n_predictions)
        targets = self._targets(scenes, samples)
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "student-chamfer"))
        values, weights = [], []
        for A, (_, batch) in self._grouped(scenes).items():
            values.append(mean_chamfer(self.model_, batch, targets[A], gen))
            weights.append(len(batch))
        return float(np.average(values, weights=weights))

    @property
    def nfe_per_sample(self) -> int:
        return 1

    def sample(self, X, K: int | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
        scenes = self._check_input(X)
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "student-sample"))
        return self._run(scenes, lambda batch: student_sample(self.model_, batch, K, gen))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **params) -> "IMLEForecaster":
        cfg = ckpt.network
        est = cls(n_predictions=cfg.K,
                  **{n: getattr(cfg, n) for n in _NETWORK_PARAMS if n not in ("mask_k", "mask_m")},
                  agent_types=list(ckpt.agent_types), **params)
        est._load(ckpt)
        return est


def load_forecaster(ckpt: Checkpoint, **params):
    cls = FlowForecaster if ckpt.kind == "teacher" else IMLEForecaster
    return cls.from_checkpoint(ckpt, **params)
