import numpy as np
import pytest
import torch

from trajflow.batching import SceneTensors
from trajflow.core import ConfigurationError
from trajflow.network import MotionDenoiser, PredictionSet
from trajflow.sampler import (SamplerConfig, SamplingError, kshot_vector_field, ode_sample,
                              read_sample_dump, sample, softmax, time_grid, time_map,
                              write_sample_dump)

from conftest import tiny_config


class TestTimeMap:
    def test_endpoints(self):
        cfg = SamplerConfig(T=100, p=5)
        assert time_map(0, cfg) == 0.0
        assert time_map(100, cfg) == 1.0

    def test_values(self):
        cfg = SamplerConfig(T=100, p=5)
        assert time_map(75, cfg) == pytest.approx(0.225, abs=1e-12)
        assert time_map(50, cfg) == pytest.approx(0.05, abs=1e-15)
        assert time_map(51, cfg) == pytest.approx(0.2 + 0.8 / 50 ** 5, abs=1e-15)

    @pytest.mark.parametrize("T", [10, 100, 500])
    @pytest.mark.parametrize("continuous", [False, True])
    def test_monotone(self, T, continuous):
        grid = np.array(time_grid(SamplerConfig(T=T, continuous=continuous)))
        assert (np.diff(grid) >= 0).all()

    def test_continuous_variant_meets_second_branch(self):
        cfg = SamplerConfig(T=100, continuous=True)
        assert time_map(50, cfg) == pytest.approx(0.2)

    def test_single_step(self):
        assert time_grid(SamplerConfig(T=1)) == [0.0, 1.0]

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            time_map(0, SamplerConfig(T=501))
        with pytest.raises(ConfigurationError):
            time_map(0, SamplerConfig(p=0.5))
        with pytest.raises(ValueError):
            time_map(11, SamplerConfig(T=10))


class TestVectorField:
    def test_value(self):
        S, y = torch.tensor([2.0, 4.0]), torch.tensor([1.0, 1.0])
        assert torch.equal(kshot_vector_field(S, y, 0.5), torch.tensor([2.0, 6.0]))

    def test_undefined_at_one(self):
        with pytest.raises(ValueError):
            kshot_vector_field(torch.zeros(2), torch.zeros(2), 1.0)


def oracle(target):
    def denoise(y, t):
        return PredictionSet(target.expand_as(y), torch.zeros(y.shape[0], y.shape[1]))
    return denoise


@pytest.mark.parametrize("T", [1, 10, 100])
@pytest.mark.parametrize("p", [1.0, 5.0])
def test_oracle_reproduces_target(T, p):
    g = torch.Generator().manual_seed(T)
    y1 = torch.randn(2, 1, 3, 8, generator=g, dtype=torch.float64)
    y0 = torch.randn(2, 4, 3, 8, generator=g, dtype=torch.float64)
    out = ode_sample(oracle(y1), y0, SamplerConfig(T=T, p=p))
    assert (out.waypoints - y1).abs().max().item() <= 1e-9


def test_oracle_path_stays_on_interpolant():
    # with an exact oracle every intermediate state is (1 - t) Y0 + t Y1
    y1 = torch.randn(1, 1, 1, 4, dtype=torch.float64)
    y0 = torch.randn(1, 1, 1, 4, dtype=torch.float64)
    cfg = SamplerConfig(T=20, p=3)
    grid = time_grid(cfg)
    seen = []

    def denoise(y, t):
        seen.append((t, y.clone()))
        return PredictionSet(y1.expand_as(y), torch.zeros(1, 1))

    ode_sample(denoise, y0, cfg)
    for t, y in seen:
        torch.testing.assert_close(y, (1 - t) * y0 + t * y1, rtol=0, atol=1e-12)
    assert [t for t, _ in seen] == grid[:-1]


def test_non_finite_names_step():
    def denoise(y, t):
        S = y.clone()
        if t > 0:
            S[...] = float("inf")
        return PredictionSet(S, torch.zeros(y.shape[:2]))

    with pytest.raises(SamplingError, match="step 1"):
        ode_sample(denoise, torch.zeros(1, 2, 1, 2), SamplerConfig(T=5))


def network_batch(cfg, B=3, A=2):
    g = torch.Generator().manual_seed(11)
    return SceneTensors(torch.randn(B, A, 6 * cfg.T_p, generator=g),
                        torch.randint(0, cfg.n_agent_types, (B, A), generator=g), None)


class TestNetworkSampling:
    @pytest.fixture
    def model(self):
        torch.manual_seed(0)
        return MotionDenoiser(tiny_config(dropout=0.2))

    def test_nfe_equals_steps(self, model):
        model.nfe = 0
        sample(model, network_batch(model.cfg), SamplerConfig(T=17))
        assert model.nfe == 17

    def test_shape(self, model):
        out = sample(model, network_batch(model.cfg), SamplerConfig(T=4))
        assert out.waypoints.shape == (3, model.cfg.K, 2, 2 * model.cfg.T_f)
        assert out.logits.shape == (3, model.cfg.K)

    def test_seeded(self, model):
        batch = network_batch(model.cfg)
        a = sample(model, batch, SamplerConfig(T=5), torch.Generator().manual_seed(3))
        b = sample(model, batch, SamplerConfig(T=5), torch.Generator().manual_seed(3))
        assert torch.equal(a.waypoints, b.waypoints)
        c = sample(model, batch, SamplerConfig(T=5), torch.Generator().manual_seed(4))
        assert not torch.equal(a.waypoints, c.waypoints)


def test_softmax_rows_sum_to_one():
    p = softmax(np.array([[1000.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(p.sum(-1), 1.0)
    np.testing.assert_allclose(p[1], [0.5, 0.5])


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    records = [{"scene_id": f"s{i}", "predictions": rng.normal(size=(3, 2, 4, 2)),
                "probs": softmax(rng.normal(size=3))} for i in range(4)]
    path = tmp_path / "samples.jsonl"
    write_sample_dump(records, path)
    back = list(read_sample_dump(path))
    assert [r["scene_id"] for r in back] == [r["scene_id"] for r in records]
    for a, b in zip(records, back):
        assert np.array_equal(a["predictions"], b["predictions"])
        assert np.array_equal(a["probs"], b["probs"])


def test_dump_bad_record(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"scene_id": "a"}\n')
    with pytest.raises(ValueError, match=":1:"):
        list(read_sample_dump(path))
