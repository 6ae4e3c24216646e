import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from twintune.controller import ControllerParams
from twintune.oracle import PerformanceRecord, RolloutConfig, kpi, rms_metrics, run_oracle, stack_performance, write_trace
from twintune.plant import PlantParams, PlantState, straight_path

NOMINAL = PlantParams()
# steady-state throttle that balances drag at 2 m/s
CRUISE = PlantState(vx=2.0, throttle=NOMINAL.drag_coeff * 4.0 / NOMINAL.drive_gain)


@pytest.fixture(scope="module")
def lane():
    return straight_path(400.0, 2.0)


def record(path, vel, cost):
    return PerformanceRecord(np.asarray(path, float), np.asarray(vel, float), np.asarray(cost, float), True)


def test_rollout_config_validation():
    with pytest.raises(ValueError, match="integer"):
        RolloutConfig(T=1.0, dt=0.3)
    with pytest.raises(ValueError):
        RolloutConfig(output_noise_std=(0.1, 0.1))
    with pytest.raises(ValueError):
        RolloutConfig(input_noise_std=(-0.1, 0.0))
    with pytest.raises(ValueError):
        RolloutConfig(controller="lqr")
    assert RolloutConfig().n_steps == 1700


def test_stack_order():
    np.testing.assert_array_equal(stack_performance(record([1, 2], [3, 4], [5, 6])), [1, 2, 3, 4, 5, 6])


def test_zero_series():
    rec = record(np.zeros(4), np.zeros(4), np.zeros(4))
    assert not np.any(rec.V) and rec.kpi == 0.0


def test_two_point_rms():
    assert rms_metrics(record([0.3, 0.4], [0, 0], [0, 0]))[0] == pytest.approx(np.sqrt(0.125), abs=1e-15)


def test_constant_series_rms():
    assert rms_metrics(record([-2.5] * 7, [1.0] * 7, [0.0] * 7)) == (2.5, 1.0, 0.0)


def test_kpi_examples():
    assert kpi(np.zeros(9)) == 0.0
    assert kpi(np.ones(30)) == 1.5
    with pytest.raises(ValueError):
        kpi(np.ones(4))


@settings(max_examples=100)
@given(hnp.arrays(np.float64, st.tuples(st.just(3), st.integers(1, 40)), elements=st.floats(-50, 50)))
def test_kpi_is_half_sum_of_squared_rms(series):
    rec = record(*series)
    naive = []
    for s in series:
        acc = 0.0
        for v in s:
            acc += v * v
        naive.append((acc / len(s)) ** 0.5)
    np.testing.assert_allclose(rec.H, naive, rtol=1e-12, atol=1e-12)
    assert rec.kpi == pytest.approx(0.5 * sum(h * h for h in rec.H), rel=1e-9, abs=1e-12)
    assert float(rec.V @ rec.V) == pytest.approx(2 * rec.n_t * rec.kpi, rel=1e-12, abs=1e-12)


def test_model_matched_tracking(lane):
    cfg = RolloutConfig(T=10.0, initial_state=CRUISE)
    rec = run_oracle(ControllerParams.unity(), NOMINAL, lane, cfg)
    assert rec.completed and rec.n_t == 200
    assert rec.H_path <= 1e-3 and rec.H_velocity <= 1e-3


def test_rollout_is_deterministic(lane):
    cfg = RolloutConfig(T=4.0, seed=3, input_noise_std=(0.02, 0.05), output_noise_std=(0.02,) * 5,
                        initial_state=CRUISE, initial_offset=(0.5, 0.0))
    a = run_oracle(np.ones(9), NOMINAL, lane, cfg)
    b = run_oracle(np.ones(9), NOMINAL, lane, cfg)
    for name in ("y_path", "y_velocity", "y_cost"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_seed_changes_noise_but_not_plant(lane):
    plant = dataclasses.replace(NOMINAL, mass=700.0)
    snapshot = plant.to_dict()
    cfg = RolloutConfig(T=2.0, output_noise_std=(0.05,) * 5, initial_state=CRUISE)
    a = run_oracle(np.ones(9), plant, lane, cfg)
    b = run_oracle(np.ones(9), plant, lane, dataclasses.replace(cfg, seed=1))
    assert plant.to_dict() == snapshot
    assert not np.array_equal(a.y_path, b.y_path)


def test_output_noise_raises_path_error(lane):
    clean = RolloutConfig(T=3.0, initial_state=CRUISE)
    noisy = [run_oracle(np.ones(9), NOMINAL, lane, dataclasses.replace(clean, seed=s, output_noise_std=(0.05,) * 5)).H_path
             for s in range(100)]
    base = run_oracle(np.ones(9), NOMINAL, lane, clean).H_path
    lower = np.mean(noisy) - 1.96 * np.std(noisy, ddof=1) / np.sqrt(len(noisy))
    assert lower >= base


def test_divergence_is_padded(lane):
    cfg = RolloutConfig(T=10.0, controller="pid", initial_state=PlantState(vx=2.0), initial_offset=(12.0, 0.0))
    # positive feedback on the lateral loop drives the car out of the tube
    rec = run_oracle([-5.0, 0, 0, 1.0, 0, 0], NOMINAL, lane, cfg)
    assert not rec.completed and not rec.failed
    n = rec.n_completed
    assert 0 < n < rec.n_t == 200
    for series in (rec.y_path, rec.y_velocity, rec.y_cost):
        assert np.all(series[n:] == series[n - 1])


def test_pid_rollout_tracks(lane):
    cfg = RolloutConfig(T=10.0, controller="pid", initial_state=CRUISE, initial_offset=(0.3, 0.0))
    rec = run_oracle([1.0, 0.0, 1.5, 2.0, 0.1, 0.0], NOMINAL, lane, cfg)
    assert rec.completed
    assert abs(rec.y_path[-1]) < 0.05


def test_invalid_weights_raise(lane):
    with pytest.raises(ValueError):
        run_oracle(np.r_[np.ones(7), 1.0, 0.0], NOMINAL, lane, RolloutConfig(T=1.0))


def test_trace_dump(lane, tmp_path):
    cfg = RolloutConfig(T=1.0, initial_state=CRUISE, keep_trace=True)
    rec = run_oracle(np.ones(9), NOMINAL, lane, cfg)
    text = write_trace(rec, cfg.dt, tmp_path / "trace.csv")
    lines = text.splitlines()
    assert lines[0] == "t,vx,vy,r,s,w,theta_dev,delta,throttle,J,u1,u2"
    assert len(lines) == 21
    assert (tmp_path / "trace.csv").read_text() == text
    with pytest.raises(ValueError):
        write_trace(run_oracle(np.ones(9), NOMINAL, lane, dataclasses.replace(cfg, keep_trace=False)), cfg.dt)
