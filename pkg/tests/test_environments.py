import csv
import gzip
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rdpfusion.environments import (
    DensityWalkEnv,
    LinearGaussianEnv,
    TrafficConfig,
    TrafficDensityEnv,
    bundled_data_path,
    ground_truth_density,
    ingest_trajectories,
    read_trajectories,
)
from rdpfusion.environments.traffic import resample, split_indices
from rdpfusion.errors import DataError, EndOfEpisode, InvalidInputError, ParseError, UsageError

DATA = Path(__file__).parent / "data"
ROOT = Path(__file__).resolve().parents[1]


def _rollout_states(env, batch, seed):
    rng = np.random.default_rng(seed)
    env.reset(rng, batch=batch)
    return np.stack([env.step(rng).state for _ in range(env.horizon)], axis=1)


def test_linear_lyapunov_covariance():
    env = LinearGaussianEnv()
    states = _rollout_states(env, 100_000, 0)
    emp = states[..., 0].var(axis=0)
    ref = env.state_covariances()[:, 0, 0]
    assert np.all(np.abs(emp / ref - 1) < 0.02)
    assert np.all(np.abs(states[..., 0].mean(axis=0) - 2.0) < 0.02)


def test_linear_two_dimensional_lyapunov():
    env = LinearGaussianEnv(A=[[0.9, 0.1], [0.0, 0.95]], Q=[[0.05, 0.01], [0.01, 0.03]],
                            C=[[1.0, 0.0], [0.0, 1.0]], R=[0.2, 0.3], mean=[1.0, -1.0],
                            P0=[[1.0, 0.2], [0.2, 0.5]], horizon=8)
    states = _rollout_states(env, 100_000, 1)
    for k, P in enumerate(env.state_covariances()):
        emp = np.cov(states[:, k].T)
        assert np.all(np.abs(emp - P) <= 0.02 * np.abs(P).max())


def test_linear_degenerate_noise_is_constant():
    env = LinearGaussianEnv(A=[[1.0]], Q=[[0.0]], R=[0.0, 0.0, 0.0], P0=[[0.0]], horizon=5)
    rng = np.random.default_rng(0)
    env.reset(rng, batch=3)
    steps = [env.step(rng) for _ in range(5)]
    assert all(np.array_equal(s.state, steps[0].state) for s in steps)
    assert all(np.array_equal(s.measurements, steps[0].measurements) for s in steps)


def test_linear_measurements_normalised():
    env = LinearGaussianEnv()
    rng = np.random.default_rng(0)
    env.reset(rng, batch=500)
    for _ in range(env.horizon):
        y = env.step(rng).measurements
        assert y.min() >= 0.0 and y.max() <= 1.0


def test_kalman_filter_matches_its_covariance():
    env = LinearGaussianEnv()
    rng = np.random.default_rng(0)
    env.reset(rng, batch=20_000)
    steps = [env.step(rng) for _ in range(env.horizon)]
    raw = np.stack([s.raw for s in steps], axis=1)
    x = np.stack([s.state for s in steps], axis=1)
    est, _ = env.kalman_filter(raw)
    mse = ((est - x) ** 2).sum(axis=-1).mean(axis=0)
    assert np.allclose(mse, env.kalman_mse(), rtol=0.05)


def test_step_protocol():
    env = LinearGaussianEnv(horizon=2)
    rng = np.random.default_rng(0)
    with pytest.raises(UsageError):
        env.step(rng)
    env.reset(rng)
    env.step(rng)
    env.step(rng)
    with pytest.raises(EndOfEpisode):
        env.step(rng)


def test_linear_rejects_bad_shapes():
    with pytest.raises(InvalidInputError):
        LinearGaussianEnv(C=[[1.0, 2.0]])


def test_density_walk_bounds_and_reports():
    env = DensityWalkEnv(m=5, horizon=40)
    rng = np.random.default_rng(0)
    env.reset(rng, batch=300)
    for _ in range(40):
        s = env.step(rng)
        assert np.all((s.state >= env.rho_min) & (s.state <= env.rho_max))
        assert s.measurements.min() >= 0 and s.measurements.max() <= 1
        assert np.all(s.measurements[~s.active_mask] == 0)


# --------------------------------------------------------------------------
# traffic ingestion


def _fixture_stream():
    exp = json.loads((DATA / "three_vehicles_expected.json").read_text())
    return ingest_trajectories(DATA / "three_vehicles.csv", TrafficConfig(**exp["config"])), exp


def test_fixture_densities_and_slots():
    stream, exp = _fixture_stream()
    assert len(stream) == exp["n_episodes"]
    ep = stream.episodes[0]
    assert ep.density.tolist() == exp["density"]
    assert ep.slot_vehicle.tolist() == exp["slot_vehicle"]
    assert np.allclose(ep.measurements[:, 0, 0], exp["slot0_position"], atol=1e-12)
    assert np.allclose(ep.measurements[:, 0, 1], exp["slot0_speed"], atol=1e-12)
    assert np.allclose(ep.measurements[:, 1, 0], exp["slot1_position"], atol=1e-12)
    assert ep.active_mask.tolist() == [[True, False], [True, True], [True, True], [True, True]]


def test_fixture_interpolation():
    tracks = read_trajectories(DATA / "three_vehicles.csv")
    grid, ids, P, S = resample(tracks, 1.0)
    j = ids.tolist().index(3)
    assert P[2, j] == 15.0
    assert np.isnan(P[0, j])


def test_ground_truth_density_half_open():
    cfg = TrafficConfig(segment_start=0.0, segment_length=400.0)
    assert ground_truth_density([0.0, 399.9, 400.0, -1.0], cfg) == 5.0
    assert ground_truth_density([], cfg) == 0.0


def test_parse_errors_carry_line_numbers():
    bad = "vehicle_id,time_s,position_m,speed_mps\n1,0.0,1.0,2.0\n1,zero,1.0,2.0\n"
    with pytest.raises(ParseError, match="line 3"):
        read_trajectories(io.StringIO(bad))
    with pytest.raises(ParseError, match="line 1"):
        read_trajectories(io.StringIO("vehicle_id,time_s\n1,0\n"))
    with pytest.raises(ParseError, match="line 2"):
        read_trajectories(io.StringIO("vehicle_id,time_s,position_m,speed_mps\n1,0.0,1.0\n"))


def test_time_must_increase_per_vehicle():
    bad = "vehicle_id,time_s,position_m,speed_mps\n1,0.2,1.0,2.0\n2,0.0,1.0,1.0\n1,0.2,3.0,2.0\n"
    with pytest.raises(DataError, match="vehicle 1"):
        read_trajectories(io.StringIO(bad))


def test_too_short_for_one_episode():
    text = "vehicle_id,time_s,position_m,speed_mps\n1,0.0,1.0,2.0\n1,0.2,3.0,2.0\n"
    with pytest.raises(DataError):
        ingest_trajectories(io.StringIO(text), TrafficConfig())


def test_split_fractions():
    s = split_indices(39)
    assert (len(s["train"]), len(s["validation"]), len(s["test"])) == (31, 4, 4)
    assert sorted(s["train"] + s["validation"] + s["test"]) == list(range(39))
    s = split_indices(1)
    assert s["train"] == [0]


def test_config_validation():
    for bad in ({"segment_length": 0}, {"dt": -1}, {"horizon": 0}, {"max_reporters": 0}):
        with pytest.raises(InvalidInputError):
            TrafficConfig(**bad)


def test_bundled_csv_matches_independent_count():
    cfg = TrafficConfig()
    stream = ingest_trajectories(bundled_data_path(), cfg)
    out = subprocess.run(
        [sys.executable, str(ROOT / "scripts" / "count_density.py"), str(bundled_data_path()),
         "--dt", str(cfg.dt), "--start", str(cfg.segment_start), "--length", str(cfg.segment_length)],
        check=True, capture_output=True, text=True,
    ).stdout
    ref = np.array([float(r["density_veh_per_km"]) for r in csv.DictReader(io.StringIO(out))])
    mine = np.concatenate([ep.density for ep in stream.episodes])
    assert len(ref) >= len(mine) == len(stream) * cfg.horizon
    assert np.array_equal(ref[: len(mine)], mine)


def test_bundled_defaults():
    env = TrafficDensityEnv.from_csv()
    assert (env.spec.m, env.spec.horizon, env.spec.n_y) == (12, 100, 2)
    rng = np.random.default_rng(0)
    env.reset(rng, batch=4, episodes=[0, 1])
    s = env.step(rng)
    assert s.measurements.shape == (4, 12, 2)
    assert env.current_episodes[:2] == [env.stream.splits["train"][0], env.stream.splits["train"][1]]
    assert s.measurements.min() >= 0 and s.measurements.max() <= 1


def test_gzip_and_plain_agree(tmp_path):
    plain = tmp_path / "t.csv"
    plain.write_bytes(gzip.decompress(bundled_data_path().read_bytes())[:20000].rsplit(b"\n", 1)[0] + b"\n")
    gz = tmp_path / "t.csv.gz"
    gz.write_bytes(gzip.compress(plain.read_bytes()))
    a, b = read_trajectories(plain), read_trajectories(gz)
    assert a.keys() == b.keys()
    for v in a:
        assert all(np.array_equal(x, y) for x, y in zip(a[v], b[v]))


def test_balanced_replay_covers_every_episode():
    from rdpfusion.training import balanced_replay

    env = TrafficDensityEnv.from_csv().with_split("test")
    kw = balanced_replay(env, 3 * env.pool_size + 1)
    counts = np.bincount(kw["episodes"], minlength=env.pool_size)
    assert counts.min() == 3 and counts.max() == 4
    env.reset(np.random.default_rng(0), batch=env.pool_size, **balanced_replay(env, env.pool_size))
    assert sorted(env.current_episodes) == env.stream.splits["test"]
    assert balanced_replay(LinearGaussianEnv(), 8) is None
