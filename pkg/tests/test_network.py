import math

import pytest
import torch

from trajflow.core import ConfigurationError
from trajflow.network import (FlowTimeEmbedding, MotionDenoiser, count_parameters,
                              forward_student, forward_teacher, mask_threshold)

from conftest import central_difference_check, tiny_config


def inputs(cfg, B=2, K=None, A=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    K = cfg.K if K is None else K
    y = torch.randn(B, K, A, 2 * cfg.T_f, generator=g, dtype=dtype)
    ctx = torch.randn(B, A, 6 * cfg.T_p, generator=g, dtype=dtype)
    ids = torch.randint(0, cfg.n_agent_types, (B, A), generator=g)
    t = torch.rand(B, generator=g, dtype=dtype)
    return y, ctx, ids, t


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_config(d_model=9, n_heads=2).validate()
    with pytest.raises(ConfigurationError):
        tiny_config(dropout=1.0).validate()
    with pytest.raises(ConfigurationError):
        tiny_config(K=0).validate()


class TestEncoder:
    def test_single_agent(self, tiny_model):
        cfg = tiny_model.cfg
        h = tiny_model.encoder(torch.randn(1, 1, 6 * cfg.T_p), torch.zeros(1, 1, dtype=torch.long))
        assert h.shape == (1, 1, cfg.d_model)

    def test_same_type_permutation_equivariance(self):
        torch.manual_seed(1)
        model = MotionDenoiser(tiny_config(dropout=0.3, n_enc_layers=2)).eval()
        cfg = model.cfg
        ctx = torch.randn(1, 4, 6 * cfg.T_p)
        ids = torch.tensor([[0, 1, 0, 1]])
        perm = torch.tensor([2, 1, 0, 3])  # swap two type-0 agents
        h = model.encoder(ctx, ids)
        h_perm = model.encoder(ctx[:, perm], ids[:, perm])
        torch.testing.assert_close(h_perm, h[:, perm], rtol=1e-5, atol=1e-6)

    def test_zero_mlp_gives_type_embeddings(self, tiny_model):
        enc = tiny_model.encoder
        with torch.no_grad():
            enc.input_mlp[-1].weight.zero_()
            enc.input_mlp[-1].bias.zero_()
        ids = torch.tensor([[1, 0, 1]])
        h0 = enc.embed(torch.randn(1, 3, 6 * tiny_model.cfg.T_p), ids)
        torch.testing.assert_close(h0[0], enc.type_embedding.weight[ids[0]])

    def test_unknown_type(self, tiny_model):
        cfg = tiny_model.cfg
        with pytest.raises(IndexError):
            tiny_model.encoder(torch.randn(1, 2, 6 * cfg.T_p), torch.tensor([[0, 5]]))


class TestFlowTimeEmbedding:
    def test_distinct_on_grid(self):
        torch.manual_seed(0)
        emb = FlowTimeEmbedding(16)
        with torch.no_grad():
            out = emb(torch.linspace(0, 0.99, 100, dtype=torch.float32))
        assert out.shape == (100, 16)
        dist = torch.cdist(out, out) + torch.eye(100) * 1e9
        assert dist.min() > 1e-4

    def test_deterministic(self):
        emb = FlowTimeEmbedding(8)
        t = torch.tensor([0.37])
        assert torch.equal(emb(t), emb(t))


class TestMaskThreshold:
    def test_midpoint(self):
        assert mask_threshold(0.5, 20, 0.5) == 0.5

    def test_values(self):
        assert mask_threshold(0.6, 20, 0.5) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
        assert mask_threshold(0.6, 20, 0.5) == pytest.approx(0.880797, abs=1e-6)
        assert mask_threshold(0.0, 20, 0.5) == pytest.approx(4.5398e-5, abs=1e-9)

    def test_tensor_matches_scalar(self):
        t = torch.tensor([0.0, 0.3, 0.6], dtype=torch.float64)
        expected = [mask_threshold(float(x)) for x in t]
        torch.testing.assert_close(mask_threshold(t), torch.tensor(expected, dtype=torch.float64))


class TestTeacherForward:
    def test_shapes(self, tiny_model):
        cfg = tiny_model.cfg
        y, ctx, ids, t = inputs(cfg)
        out = forward_teacher(tiny_model, y, ctx, ids, t)
        assert out.waypoints.shape == (2, cfg.K, 3, 2 * cfg.T_f)
        assert out.logits.shape == (2, cfg.K)

    @pytest.mark.parametrize("K,A", [(1, 1), (2, 4), (5, 2)])
    def test_shape_contract(self, K, A):
        torch.manual_seed(0)
        model = MotionDenoiser(tiny_config(K=K))
        y, ctx, ids, t = inputs(model.cfg, B=3, A=A)
        out = forward_teacher(model, y, ctx, ids, t)
        assert out.waypoints.shape == (3, K, A, 2 * model.cfg.T_f)
        assert out.logits.shape == (3, K)
        assert torch.isfinite(out.waypoints).all()

    def test_eval_deterministic(self):
        torch.manual_seed(0)
        model = MotionDenoiser(tiny_config(dropout=0.1))
        y, ctx, ids, t = inputs(model.cfg)
        a = forward_teacher(model, y, ctx, ids, t, mode="eval")
        b = forward_teacher(model, y, ctx, ids, t, mode="eval")
        assert torch.equal(a.waypoints, b.waypoints) and torch.equal(a.logits, b.logits)

    def test_mask_blocks_gradient_to_noisy_input(self, tiny_model):
        cfg = tiny_model.cfg
        y, ctx, ids, _ = inputs(cfg, B=1)
        y.requires_grad_(True)
        t = torch.tensor([1.0 - 1e-7])  # masking probability ~ 1
        out = forward_teacher(tiny_model, y, ctx, ids, t, mode="train",
                              generator=torch.Generator().manual_seed(0))
        (out.waypoints.sum() + out.logits.sum()).backward()
        assert torch.equal(y.grad, torch.zeros_like(y))

    def test_unmasked_gradient_reaches_input(self, tiny_model):
        y, ctx, ids, _ = inputs(tiny_model.cfg, B=1)
        y.requires_grad_(True)
        out = forward_teacher(tiny_model, y, ctx, ids, torch.tensor([0.0]), mode="train",
                              generator=torch.Generator().manual_seed(0))
        out.waypoints.sum().backward()
        assert y.grad.abs().sum() > 0

    def test_non_finite_rejected(self, tiny_model):
        y, ctx, ids, t = inputs(tiny_model.cfg)
        y[0, 0, 0, 0] = float("inf")
        with pytest.raises(ValueError):
            forward_teacher(tiny_model, y, ctx, ids, t)

    def test_nfe_counter(self, tiny_model):
        y, ctx, ids, t = inputs(tiny_model.cfg)
        tiny_model.nfe = 0
        for _ in range(3):
            forward_teacher(tiny_model, y, ctx, ids, t)
        assert tiny_model.nfe == 3


class TestStudentForward:
    @pytest.fixture
    def student(self):
        torch.manual_seed(0)
        return MotionDenoiser(tiny_config(), time_conditioned=False)

    def test_shapes(self, student):
        z, ctx, ids, _ = inputs(student.cfg)
        out = forward_student(student, z, ctx, ids)
        assert out.waypoints.shape == (2, student.cfg.K, 3, 2 * student.cfg.T_f)
        assert out.logits.shape == (2, student.cfg.K)

    def test_distinct_noise_distinct_outputs(self, student):
        cfg = student.cfg
        g = torch.Generator().manual_seed(3)
        z = torch.randn(100, cfg.K, 2, 2 * cfg.T_f, generator=g)
        ctx = torch.randn(1, 2, 6 * cfg.T_p, generator=g).expand(100, -1, -1)
        ids = torch.zeros(100, 2, dtype=torch.long)
        out = forward_student(student, z, ctx, ids).waypoints.flatten(1)
        dist = torch.cdist(out, out) + torch.eye(100) * 1e9
        assert dist.min() > 0

    def test_deterministic(self, student):
        z, ctx, ids, _ = inputs(student.cfg)
        assert torch.equal(forward_student(student, z, ctx, ids).waypoints,
                           forward_student(student, z, ctx, ids).waypoints)

    def test_teacher_rejected(self, tiny_model):
        z, ctx, ids, _ = inputs(tiny_model.cfg)
        with pytest.raises(ValueError):
            forward_student(tiny_model, z, ctx, ids)

    def test_parameter_count_excludes_time_embedding(self):
        cfg = tiny_config()
        teacher = MotionDenoiser(cfg)
        student = MotionDenoiser(cfg, time_conditioned=False)
        assert count_parameters(teacher) - count_parameters(student) == \
            count_parameters(teacher.time_embedding) == cfg.d_model ** 2 + cfg.d_model


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cfg = tiny_config(K=2)
    model = MotionDenoiser(cfg).double().train()
    y, ctx, ids, t = inputs(cfg, B=2, A=2, dtype=torch.float64)
    w = torch.randn(2, cfg.K, 2, 2 * cfg.T_f, generator=torch.Generator().manual_seed(9),
                    dtype=torch.float64)

    def scalar():
        out = model(y, ctx, ids, t)
        return (out.waypoints * w).sum() + out.logits.pow(2).sum()

    assert central_difference_check(model, scalar) <= 1e-4
