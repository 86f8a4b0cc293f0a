import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmfno import dataset
from pmfno.dataset import ExcitationSpec, Simulator
from pmfno.evaluation import (POLE_HEADER, EvaluationError, OraclePredictor, PoleSet, analytic_poles,
                              estimate_transition, eval_mse, load_predictor, match_poles, parse_horizon,
                              pole_errors, poles_from_transition, read_poles_csv, rollout_report,
                              save_oracle_checkpoint, write_poles_csv)
from pmfno.ftm import StringParams
from pmfno.models import Model, ModelConfig


def ftm_string_trajectory(N=64, Q=16, frames=None, seed=0):
    params = StringParams(grid_points=N, modes=Q)
    sim = Simulator(params)
    rng = np.random.default_rng(seed)
    u0 = sim.band_limit(rng.standard_normal((2, N)) * np.array([[1e-3], [1.0]]))
    K = (frames or 4 * 2 * N) - 1
    return sim, sim.run(u0, K)


def test_pole_recovery_on_exact_modal_trajectory():
    sim, traj = ftm_string_trajectory()
    G = estimate_transition(traj)
    est = poles_from_transition(G, sim.sample_interval)
    ref = analytic_poles(sim.modal)
    assert len(ref) == 16 and len(est) == 16
    assert np.max(pole_errors(ref, est)) <= 1e-5


def test_planted_stable_map_is_recovered():
    rng = np.random.default_rng(1)
    dim = 12
    A = rng.standard_normal((dim, dim))
    A *= 0.95 / np.max(np.abs(np.linalg.eigvals(A)))
    u = np.empty((60, dim))
    u[0] = rng.standard_normal(dim)
    for k in range(59):
        u[k + 1] = A @ u[k]
    traj = u.reshape(60, 2, 6)
    np.testing.assert_allclose(estimate_transition(traj), A, atol=1e-8)


def test_constant_trajectory_has_unit_eigenvalue():
    traj = np.tile(np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]]), (10, 1, 1))
    ps = poles_from_transition(estimate_transition(traj), 1 / 100, "dc")
    assert len(ps) == 1
    assert ps.frequency[0] == pytest.approx(0.0, abs=1e-9)
    assert ps.magnitude[0] == pytest.approx(1.0, abs=1e-9)


def test_zero_trajectory_is_an_error():
    with pytest.raises(EvaluationError):
        estimate_transition(np.zeros((10, 2, 4)))


def test_unit_and_440hz_eigenvalues():
    T = 1 / 48000
    s = -100 + 2j * math.pi * 440
    lam = np.exp(s * T)
    G = np.array([[lam.real, -lam.imag], [lam.imag, lam.real]])
    ps = poles_from_transition(G, T)
    assert len(ps) == 1
    assert ps.frequency[0] == pytest.approx(440, rel=1e-9)
    assert ps.s[0] == pytest.approx(s, rel=1e-9)
    one = poles_from_transition(np.eye(1), T)
    assert one.frequency[0] == 0 and one.magnitude[0] == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e6))
def test_pole_estimate_is_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 6))
    A *= 0.9 / np.max(np.abs(np.linalg.eigvals(A)))
    u = [rng.standard_normal(6)]
    for _ in range(30):
        u.append(A @ u[-1])
    traj = np.array(u).reshape(31, 2, 3)
    a = poles_from_transition(estimate_transition(traj), 1e-3)
    b = poles_from_transition(estimate_transition(traj * c), 1e-3)
    np.testing.assert_allclose(np.sort_complex(a.s), np.sort_complex(b.s), rtol=1e-6, atol=1e-6)


def test_match_poles_gate():
    ref = PoleSet(np.array([-1 + 2j * math.pi * 100, -1 + 2j * math.pi * 200]), 1e-3, "a")
    est = PoleSet(np.array([-1 + 2j * math.pi * 101, -1 + 2j * math.pi * 230]), 1e-3, "b")
    assert match_poles(ref, est) == [(0, 0), (1, None)]
    err = pole_errors(ref, est)
    assert err[0] == pytest.approx(abs(2j * math.pi) / abs(ref.s[0])) and np.isnan(err[1])


def test_pole_csv_header_and_round_trip(tmp_path):
    ps = PoleSet(np.array([-3 + 2j * math.pi * 50]), 1e-3, "model")
    write_poles_csv(tmp_path / "p.csv", ps)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "freq_hz,magnitude,re_s,im_s,source"
    rows = read_poles_csv(tmp_path / "p.csv")
    assert list(rows[0]) == POLE_HEADER
    assert float(rows[0]["freq_hz"]) == pytest.approx(50) and rows[0]["source"] == "model"


@pytest.fixture(scope="module")
def small_ds():
    params = StringParams(grid_points=16)
    return dataset.generate("string", params, dataset.DatasetConfig(samples=20, steps=16, seed=3))


def test_oracle_has_zero_mse_including_extended_horizon(small_ds):
    oracle = OraclePredictor(small_ds.params, small_ds.scale, small_ds.channel_scale)
    assert eval_mse(oracle, small_ds)["mse"] <= 1e-20
    r = eval_mse(oracle, small_ds, horizon=160)
    assert r["mse"] <= 1e-18 and r["finite"] and r["per_step"].shape == (161,)


def test_zero_predictor_reports_validation_energy(small_ds):
    class Zero:
        def predict(self, U0, steps):
            return np.zeros((U0.shape[0], steps + 1) + U0.shape[1:])

    r = eval_mse(Zero(), small_ds)
    assert r["mse"] == pytest.approx(np.mean(small_ds.validation ** 2), rel=1e-12)


def test_growing_error_gives_monotone_prefix_mse(small_ds):
    oracle = OraclePredictor(small_ds.params, small_ds.scale, small_ds.channel_scale)

    class Ramp:
        def predict(self, U0, steps):
            out = oracle.predict(U0, steps)
            ramp = 0.01 * np.arange(steps + 1).reshape((1, -1) + (1,) * (out.ndim - 2))
            return out + ramp

    full = eval_mse(Ramp(), small_ds, horizon=16)
    assert np.all(np.diff(full["per_step"]) > 0)
    prefix = [eval_mse(Ramp(), small_ds, horizon=k)["mse"] for k in (2, 4, 8, 16)]
    assert prefix == sorted(prefix)
    assert prefix[-1] == pytest.approx(full["per_step"].mean())


def test_parse_horizon():
    assert parse_horizon("10x", 64) == 640
    assert parse_horizon("1x", 64) == 64
    assert parse_horizon("37", 64) == 37
    for bad in ("0", "-3x", "abc", "0.3x"):
        with pytest.raises(EvaluationError):
            parse_horizon(bad, 64)


def test_rollout_report_ten_times_horizon(tmp_path, small_ds):
    model = Model(ModelConfig(grid=(16,), channels=4, blocks=1), seed=0)
    from pmfno.evaluation import ModelPredictor
    spec = ExcitationSpec(kind="pluck", position=0.3, amplitude=1e-3)
    summary = rollout_report(ModelPredictor(model), small_ds.params, spec, 160, tmp_path,
                             scale=small_ds.scale, channel_scale=small_ds.channel_scale, train_steps=16)
    assert summary["finite"] and summary["steps"] == 160
    lines = (tmp_path / "model.csv").read_text().splitlines()
    assert lines[0] == "step,state,x_index,value" and len(lines) == 1 + 161 * 2 * 16
    assert (tmp_path / "poles.csv").read_text().startswith("freq_hz,magnitude,re_s,im_s,source")
    assert len((tmp_path / "mse_per_step.csv").read_text().splitlines()) == 162


def test_oracle_checkpoint_round_trip(tmp_path, small_ds):
    save_oracle_checkpoint(tmp_path / "oracle", small_ds)
    pred, manifest = load_predictor(tmp_path / "oracle")
    assert manifest["oracle"] is True
    assert eval_mse(pred, small_ds)["mse"] <= 1e-20
