import math

import numpy as np
import pytest
import torch

from trajflow.core import AgentRecord, Scene
from trajflow.network import MotionDenoiser, NetworkConfig


def make_scene(past, future, types=None, dt=1.0, scene_id="s0"):
    past = np.asarray(past, dtype=float)
    future = np.asarray(future, dtype=float)
    types = types or ["pedestrian"] * past.shape[0]
    agents = [AgentRecord(f"a{i}", types[i], past[i], future[i]) for i in range(past.shape[0])]
    return Scene(scene_id, dt, agents)


def random_scene(rng, A=2, T_p=4, T_f=3, scene_id="r", types=None):
    return make_scene(rng.normal(size=(A, T_p, 2)), rng.normal(size=(A, T_f, 2)),
                      types=types, scene_id=scene_id, dt=float(rng.uniform(0.1, 1.0)))


def tiny_config(**overrides):
    base = dict(T_p=4, T_f=3, n_agent_types=2, K=3, d_model=8, d_ff=16, n_heads=2,
                n_enc_layers=1, n_dec_blocks=1, dropout=0.0)
    base.update(overrides)
    return NetworkConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return MotionDenoiser(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference_check(model, scalar_fn, h=1e-6):
    """Max relative error between autograd and central differences, per parameter tensor."""
    model.zero_grad()
    scalar_fn().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat, num_flat = p.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = scalar_fn().item()
                flat[i] = orig - h
                down = scalar_fn().item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2 * h)
        scale = max(numeric.norm().item(), 1e-8)
        worst = max(worst, (analytic - numeric).norm().item() / scale)
    return worst


def brute_force(preds, gt, horizon):
    """Loop-based reference: every agent, every prediction, every frame."""
    K, A = len(preds), len(gt)

    def dist(k, a, t):
        return math.hypot(preds[k][a][t][0] - gt[a][t][0], preds[k][a][t][1] - gt[a][t][1])

    def ade(k, a):
        return sum(dist(k, a, t) for t in range(horizon)) / horizon

    made = sum(min(ade(k, a) for k in range(K)) for a in range(A)) / A
    mfde = sum(min(dist(k, a, horizon - 1) for k in range(K)) for a in range(A)) / A
    jade = min(sum(ade(k, a) for a in range(A)) / A for k in range(K))
    jfde = min(sum(dist(k, a, horizon - 1) for a in range(A)) / A for k in range(K))
    return made, mfde, jade, jfde


# one (criterion, passed, detail) row per acceptance criterion, printed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[0][1:])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
