import json
import logging
from fractions import Fraction

import numpy as np
import pytest

from redsds import datasets as ds
from redsds.datasets import TimeSeriesRecord


class TestBouncingBall:
    def test_shapes_and_determinism(self):
        a = ds.gen_bouncing_ball(4, T=30, seed=5)
        b = ds.gen_bouncing_ball(4, T=30, seed=5)
        assert len(a) == 4
        for r, s in zip(a, b):
            assert r.target.shape == (30, 1) and r.labels.shape == (30,)
            assert np.array_equal(r.target, s.target) and np.array_equal(r.labels, s.labels)
        assert not np.array_equal(a[0].target, ds.gen_bouncing_ball(4, T=30, seed=6)[0].target)

    def test_latent_positions_inside_walls(self, rng):
        pos, vel = ds.bouncing_ball_paths(rng.uniform(0, 10, 500), rng.uniform(-0.5, 0.5, 500), 400)
        assert pos.min() >= 0.0 and pos.max() <= 10.0
        assert np.all(np.abs(np.abs(vel) - np.abs(vel[:, :1])) == 0)

    def test_observation_noise_level(self):
        recs = ds.gen_bouncing_ball(200, T=100, seed=0)
        # rebuild the latent paths from the same draws
        gen = np.random.default_rng(0)
        start = gen.uniform(0, 10, 200)
        velocity = gen.uniform(-0.5, 0.5, 200)
        pos, _ = ds.bouncing_ball_paths(start, velocity, 100)
        resid = np.stack([r.target[:, 0] for r in recs]) - pos
        assert resid.std() == pytest.approx(0.1, rel=0.02)

    def test_zero_velocity(self):
        pos, vel = ds.bouncing_ball_paths(np.array([3.0]), np.array([0.0]), 50)
        assert np.all(pos == 3.0)
        labels = (vel > 0).astype(int)
        assert len(set(labels[0])) == 1

    def test_labels_flip_exactly_at_reflections(self, rng):
        start = rng.uniform(0, 10, 50)
        v0 = rng.uniform(-0.5, 0.5, 50)
        pos, vel = ds.bouncing_ball_paths(start, v0, 300)
        labels = vel > 0
        for i in range(50):
            free = pos[i, :-1] + vel[i, :-1]
            crossed = (free > 10) | (free < 0)
            flips = labels[i, 1:] != labels[i, :-1]
            assert np.array_equal(crossed, flips)

    def test_bounce_period(self, rng):
        for v in rng.uniform(0.1, 0.5, 20):
            pos, vel = ds.bouncing_ball_paths(np.array([5.0]), np.array([v]), 2000)
            flips = np.flatnonzero(np.diff(np.sign(vel[0])) != 0)
            gaps = np.diff(flips)
            assert np.all(np.abs(gaps - 10 / v) <= 1)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            ds.gen_bouncing_ball(0)
        with pytest.raises(ValueError):
            ds.gen_bouncing_ball(1, T=0)


def segments_from_counts(c):
    """(start, length) of each segment that both starts and ends inside the window."""
    starts = np.flatnonzero(c == 1)
    return [(s, e - s) for s, e in zip(starts[1:-1], starts[2:])]


class TestThreeMode:
    def test_rho_exact(self):
        rho = ds.three_mode_rho()
        assert all(sum(row) == 1 for row in rho)
        assert all(isinstance(p, Fraction) for row in rho for p in row)
        for row in rho:
            support = [j + 1 for j, p in enumerate(row) if p > 0]
            assert min(support) >= 6 and max(support) <= 20

    def test_increment_probs_recover_rho(self):
        for row in ds.three_mode_rho():
            v = ds.increment_probs(row)
            assert v[-1] == 0
            survive = Fraction(1)
            for c in range(len(row)):
                assert survive * (1 - v[c]) == row[c]
                survive *= v[c]

    def test_system_shared_and_shapes(self):
        sys_ = ds.ThreeModeSystem.draw(np.random.default_rng(0))
        assert sys_.A.shape == (3, 2, 2) and np.all(sys_.b[0] == 0)
        assert set(np.unique(sys_.d)) <= {0.0, 1.0, 2.0}
        assert np.allclose(sys_.switch.sum(1), 1)
        a = ds.gen_three_mode(3, T=20, seed=1, system=sys_)
        b = ds.gen_three_mode(3, T=20, seed=1, system=sys_)
        assert all(np.array_equal(r.target, s.target) for r, s in zip(a, b))

    def test_duration_support_and_structure(self):
        _, lat = ds.gen_three_mode(300, T=180, seed=2, return_latents=True)
        z, c = lat["z"], lat["c"]
        assert c.min() >= 1 and c.max() <= 20
        cont = c[:, 1:] > 1
        assert np.all(z[:, 1:][cont] == z[:, :-1][cont])
        assert np.all(c[:, :-1][~cont] >= 6)
        for row in c:
            for _, length in segments_from_counts(row):
                assert 6 <= length <= 20

    def test_trend(self):
        base = ds.gen_three_mode(2, T=30, seed=3)
        tr = ds.gen_three_mode(2, T=30, seed=3, trend=0.5)
        assert np.allclose(tr[0].target[:, 0] - base[0].target[:, 0], 0.5 * np.arange(30))

    def test_duration_histogram(self):
        """Second segment of each series: always complete for T=60, so unbiased."""
        n = 10_000
        _, lat = ds.gen_three_mode(n, T=60, seed=4, return_latents=True)
        rho = np.array([[float(p) for p in row] for row in ds.three_mode_rho()])
        lengths = [[] for _ in range(3)]
        for z, c in zip(lat["z"], lat["c"]):
            starts = np.flatnonzero(c == 1)
            s, e = starts[1], starts[2]
            lengths[z[s]].append(e - s)
        assert sum(map(len, lengths)) == n
        for k in range(3):
            m = len(lengths[k])
            freq = np.bincount(lengths[k], minlength=21)[1:] / m
            se = np.sqrt(rho[k] * (1 - rho[k]) / m)
            assert np.all(np.abs(freq - rho[k]) <= 4 * se + 1e-12), k


class TestJsonLines:
    def test_round_trip_bitwise(self, tmp_path):
        recs = ds.gen_three_mode(5, T=25, seed=0)
        recs[0].controls = np.column_stack([np.zeros(25), np.random.default_rng(0).normal(size=25)])
        recs[1].start, recs[1].freq = "2020-01-01", "H"
        recs[2].norm = {"method": "scaling", "scale": 0.1 + 0.2, "log_det": -1 / 3}
        ds.write_jsonl(recs, tmp_path / "a.jsonl")
        back = ds.load_jsonl(tmp_path / "a.jsonl")
        for r, s in zip(recs, back):
            assert r.target.tobytes() == s.target.tobytes()
            assert np.array_equal(r.labels, s.labels)
        assert back[0].controls.tobytes() == recs[0].controls.tobytes()
        assert (back[1].start, back[1].freq) == ("2020-01-01", "H")
        assert back[2].norm == recs[2].norm
        ds.write_jsonl(back, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_missing_optional_fields_absent(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({"id": 3, "target": [1.0, 2.0]}) + "\n")
        (rec,) = ds.load_jsonl(tmp_path / "m.jsonl")
        assert rec.controls is None and rec.labels is None and rec.start is None and rec.norm is None
        assert set(rec.to_json()) == {"id", "target"}
        assert rec.target.shape == (2, 1)

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            TimeSeriesRecord(id=0, target=np.zeros(4), labels=[0, 1])

    def test_bad_controls_rejected(self):
        with pytest.raises(ValueError, match="controls"):
            TimeSeriesRecord(id=0, target=np.zeros(4), controls=np.zeros((3, 2)))

    @pytest.mark.parametrize(
        "line",
        ["{not json", json.dumps({"target": [1.0]}), json.dumps({"id": 1, "target": [1.0], "labels": [0, 1]}),
         json.dumps({"id": 1, "target": [1.0], "colour": "red"})],
    )
    def test_malformed_line_number(self, tmp_path, line):
        good = json.dumps({"id": 0, "target": [0.0]})
        (tmp_path / "x.jsonl").write_text(good + "\n" + good + "\n" + line + "\n")
        with pytest.raises(ValueError, match=r"x\.jsonl:3"):
            ds.load_jsonl(tmp_path / "x.jsonl")


class TestBees:
    def test_features(self):
        recs = ds.preprocess_bees(ds.gen_bee_standin(3, T=400, seed=1))
        assert recs
        for r in recs:
            assert r.target.shape == (120, 4) and r.labels.shape == (120,)
            assert np.allclose(r.target[:, 2] ** 2 + r.target[:, 3] ** 2, 1.0, atol=1e-12)

    def test_standardised_per_track(self):
        tracks = ds.gen_bee_standin(2, T=400, seed=2)
        recs = ds.preprocess_bees(tracks, chunk=400)
        assert len(recs) == 2
        for r in recs:
            xy = r.target[:, :2]
            assert np.allclose(xy.mean(0), 0.0, atol=1e-9)
            assert np.allclose(xy.std(0), 1.0, atol=1e-9)

    def test_chunks_start_at_changepoints(self):
        tracks = ds.gen_bee_standin(3, T=500, seed=3)
        recs = ds.preprocess_bees(tracks)
        by_labels = {}
        for tr in tracks:
            lab = tr.labels
            change = [0] + [t for t in range(1, len(lab)) if lab[t] != lab[t - 1]]
            by_labels[tr.id] = [s for s in change if s + 120 <= len(lab)]
        assert len(recs) == sum(len(v) for v in by_labels.values())
        it = iter(recs)
        for tr in tracks:
            for s in by_labels[tr.id]:
                r = next(it)
                assert np.array_equal(r.labels, tr.labels[s : s + 120])
                assert s == 0 or tr.labels[s] != tr.labels[s - 1]

    def test_short_track_skipped(self, caplog):
        short = ds.gen_bee_standin(1, T=100, seed=0)
        with caplog.at_level(logging.WARNING):
            assert ds.preprocess_bees(short) == []
        assert "skipped" in caplog.text
