import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from redsds import forecasting as fc
from redsds.model import ControlConfig, ModelConfig, RedSDS

series = st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30)


class TestNormalize:
    def test_standardization_example(self):
        n = fc.normalize([1.0, 2.0, 3.0])
        std = math.sqrt(2 / 3)
        assert n.stats == {"mean": 2.0, "std": pytest.approx(std)}
        assert np.allclose(n.values, [-1 / std, 0.0, 1 / std])
        assert n.log_det == pytest.approx(-math.log(std))

    def test_scaling_example(self):
        n = fc.normalize([1.0, -2.0, 3.0], "scaling")
        assert n.stats == {"scale": 2.0}
        assert np.allclose(n.values, [0.5, -1.0, 1.5])
        assert n.log_det == pytest.approx(-math.log(2.0))

    @settings(max_examples=100, deadline=None)
    @given(series, st.sampled_from(["standardization", "scaling"]))
    def test_inverse(self, ys, method):
        y = np.asarray(ys)
        if method == "standardization" and not y.std() > 1e-6:
            return
        if method == "scaling" and not np.abs(y).mean() > 1e-6:
            return
        n = fc.normalize(y, method)
        assert np.allclose(n.denormalize(n.values), y, atol=1e-10 * max(1.0, np.abs(y).max()), rtol=0)
        back = fc.NormalizedSeries.from_metadata(n.values, json.loads(json.dumps(n.metadata())))
        assert np.array_equal(back.denormalize(back.values), n.denormalize(n.values))

    def test_errors_name_series(self):
        with pytest.raises(ValueError, match="series 7"):
            fc.normalize([4.0, 4.0, 4.0], series_id=7)
        with pytest.raises(ValueError, match="series 8"):
            fc.normalize([0.0, 0.0], "scaling", series_id=8)
        with pytest.raises(ValueError):
            fc.normalize([1.0, 2.0], "minmax")


def unroll_model(K=3, d_min=3, d_max=6, **kw):
    return RedSDS(ModelConfig(K=K, d_min=d_min, d_max=d_max, state_dim=2, **kw), seed=4)


class TestUnroll:
    def test_shapes_and_determinism(self, rng):
        model = unroll_model()
        y = rng.normal(size=(15, 1))
        a = fc.forecast_unroll(model, y, horizon=8, num_paths=20, seed=3)
        b = fc.forecast_unroll(model, y, horizon=8, num_paths=20, seed=3)
        assert a.samples.shape == (20, 8, 1) and a.num_paths == 20
        assert a.switches.shape == a.counts.shape == (20, 8)
        assert a.start.shape == (20, 2)
        assert np.array_equal(a.samples, b.samples)
        c = fc.forecast_unroll(model, y, horizon=8, num_paths=20, seed=4)
        assert not np.array_equal(a.samples, c.samples)

    def test_empty_horizon(self, rng):
        res = fc.forecast_unroll(unroll_model(), rng.normal(size=(10, 1)), horizon=0, num_paths=5)
        assert res.samples.shape == (5, 0, 1)
        assert res.quantiles().shape == (19, 0, 1)

    @pytest.mark.parametrize("seed", range(3))
    def test_structural_invariants(self, rng, seed):
        d_min, d_max = 3, 6
        res = fc.forecast_unroll(unroll_model(d_min=d_min, d_max=d_max), rng.normal(size=(12, 1)), 40, 100, seed)
        z = np.concatenate([res.start[:, :1], res.switches], axis=1)
        c = np.concatenate([res.start[:, 1:], res.counts], axis=1)
        assert c.min() >= 1 and c.max() <= d_max
        stay = c[:, 1:] > 1
        # a count above one continues the previous segment
        assert np.all(z[:, 1:][stay] == z[:, :-1][stay])
        assert np.all(c[:, 1:][stay] == c[:, :-1][stay] + 1)
        # a new segment starts only after at least d_min steps, and always at d_max
        assert np.all(c[:, :-1][~stay] >= d_min)
        assert np.all(c[:, 1:][c[:, :-1] == d_max] == 1)

    def test_quantiles_monotone(self, rng):
        res = fc.forecast_unroll(unroll_model(), rng.normal(size=(12, 1)), 10, 50, 1)
        q = res.quantiles()
        assert np.all(np.diff(q, axis=0) >= 0)
        assert np.allclose(res.mean(), res.samples.mean(0))

    def test_denormalized(self, rng):
        model = unroll_model()
        raw = 5.0 + 3.0 * rng.normal(size=(12, 1))
        norm = fc.normalize(raw)
        a = fc.forecast_unroll(model, norm.values, 6, 10, 2)
        b = fc.forecast_unroll(model, norm.values, 6, 10, 2, norm=norm)
        assert np.allclose(b.samples, a.samples * norm.stats["std"] + norm.stats["mean"])

    def test_linear_recursion_without_noise(self, rng):
        """K=1, d_max=1, linear heads at the variance floor: each step applies C A C^-1."""
        model = RedSDS(
            ModelConfig(K=1, d_min=1, d_max=1, state_dim=2, obs_dim=2, transition="linear", emission="linear"), seed=0
        )
        A = np.array([[0.9, -0.2], [0.3, 0.8]])
        C = np.array([[1.0, 0.5], [-0.4, 1.2]])
        with torch.no_grad():
            model.transitions[0].mean.weight.copy_(torch.as_tensor(A))
            model.transitions[0].raw_var.fill_(-1e3)
            model.emission.mean.weight.copy_(torch.as_tensor(C))
            model.emission.raw_var.fill_(-1e3)
        res = fc.forecast_unroll(model, rng.normal(size=(10, 2)), 12, 5, 0)
        assert np.all(res.counts == 1) and np.all(res.switches == 0)
        step = C @ A @ np.linalg.inv(C)
        pred = np.einsum("ij,mhj->mhi", step, res.samples[:, :-1])
        # per-step noise std is 1e-3 in state and observation
        assert np.abs(pred - res.samples[:, 1:]).max() < 2e-2

    def test_control_model_needs_future_controls(self, rng):
        model = RedSDS(ModelConfig(K=2, d_max=4, state_dim=2, control=ControlConfig(n_static=2, time_dim=1)))
        y = rng.normal(size=(8, 1))
        with pytest.raises(ValueError):
            fc.forecast_unroll(model, y, 5, 4)
        short = np.zeros((10, 2))
        with pytest.raises(ValueError):
            fc.forecast_unroll(model, y, 5, 4, controls=short)
        full = np.column_stack([np.ones(13), np.linspace(0, 1, 13)])
        assert fc.forecast_unroll(model, y, 5, 4, controls=full).samples.shape == (4, 5, 1)


class TestCRPS:
    def test_default_grid_weights(self):
        w = fc.quantile_weights(fc.DEFAULT_LEVELS)
        assert len(w) == 19
        assert w[0] == pytest.approx(0.075) and w[-1] == pytest.approx(0.075)
        assert np.allclose(w[1:-1], 0.05)
        assert w.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("levels", [[], [0.0, 0.5], [0.5, 1.0], [0.6, 0.4], [0.3, 0.3]])
    def test_bad_grids(self, levels):
        with pytest.raises(ValueError):
            fc.quantile_weights(levels)

    def test_two_point_example(self):
        exact = fc.crps_energy([0.0, 2.0], 1.0)
        assert exact == pytest.approx(0.5)
        assert abs(fc.crps([0.0, 2.0], 1.0) - exact) < 0.02

    def test_point_mass_is_absolute_error(self):
        for y in (-3.0, 0.2, 7.5):
            assert fc.crps(np.full(10, 1.5), y) == pytest.approx(abs(y - 1.5), abs=1e-12)

    def test_energy_form_matches_pairwise(self, rng):
        x = rng.normal(size=200)
        y = 0.3
        ref = np.abs(x - y).mean() - 0.5 * np.abs(x[:, None] - x[None, :]).mean()
        assert fc.crps_energy(x, y) == pytest.approx(ref, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=50), st.floats(-100, 100), st.floats(-100, 100))
    def test_translation_invariance(self, xs, y, shift):
        x = np.asarray(xs)
        assert fc.crps(x + shift, y + shift) == pytest.approx(fc.crps(x, y), abs=1e-9)
        assert fc.crps(x, y) >= 0

    def test_uniform_samples_close_to_energy_form(self, rng):
        errs = [abs(fc.crps(x, y) - fc.crps_energy(x, y)) for x, y in ((rng.random(1000), rng.random()) for _ in range(50))]
        assert max(errs) < 0.02

    def test_series_crps_averages_steps(self, rng):
        samples = rng.normal(size=(30, 4, 1))
        truth = rng.normal(size=4)
        expected = np.mean([fc.crps(samples[:, h, 0], truth[h]) for h in range(4)])
        assert fc.series_crps(samples, truth) == pytest.approx(expected)

    def test_empty_samples(self):
        with pytest.raises(ValueError):
            fc.crps([], 0.0)


class TestBaselineAndFiles:
    def test_persistence(self):
        p = fc.persistence_forecast(np.array([1.0, 2.0, 5.0]), 4)
        assert p.shape == (1, 4, 1) and np.all(p == 5.0)
        assert fc.series_crps(p, np.array([5.0, 6.0, 4.0, 5.0])) == pytest.approx(0.5)

    def test_forecast_file(self, tmp_path):
        samples = np.arange(12, dtype=np.float64).reshape(4, 3, 1)
        res = fc.ForecastResult(samples, np.zeros((4, 3), int), np.ones((4, 3), int))
        fc.write_forecasts([(9, res)], tmp_path / "f.jsonl", levels=(0.25, 0.5, 0.75))
        rec = json.loads((tmp_path / "f.jsonl").read_text())
        assert rec["id"] == 9 and rec["levels"] == [0.25, 0.5, 0.75]
        assert rec["quantiles"] == [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [6.0, 7.0, 8.0]]
        assert rec["mean"] == [4.5, 5.5, 6.5]

    def test_crps_table(self, tmp_path):
        fc.write_crps_table([(0, 0.5), (1, 1.5)], tmp_path / "c.tsv")
        lines = (tmp_path / "c.tsv").read_text().splitlines()
        assert lines == ["series_id\tcrps", "0\t0.500000", "1\t1.500000", "mean±std\t1.0000±0.5000"]
