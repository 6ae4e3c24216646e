import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twintune.synthetic import AffineProblem, SyntheticOutcome, SyntheticProblem
from twintune.tuner import (
    CholeskyFailure,
    DegenerateBoundsError,
    DimensionMismatch,
    Moments,
    ParameterBelief,
    RolloutFailure,
    SigmaSet,
    TunerHyperparams,
    ZeroPerturbation,
    adapt_covariances,
    fuse_and_update,
    generate_sigma_points,
    jittered_cholesky,
    kalman_step,
    psd_project,
    safety_check,
    schedule_step_size,
    spsa_step,
    tune_iteration,
    unscented_moments,
    ut_weights,
)

N = 9


def hp9(**kw):
    kw.setdefault("theta_min", np.full(N, 0.01))
    kw.setdefault("theta_max", np.full(N, 100.0))
    return TunerHyperparams(**kw)


def belief9(theta=None, P=None, **kw):
    hp = hp9()
    b = ParameterBelief.initial(np.full(N, 10.0) if theta is None else theta, hp, **kw)
    if P is not None:
        b.P = np.asarray(P, dtype=float)
    return b


# ------------------------------------------------------------ hyperparams


def test_defaults_follow_the_n_plus_lambda_heuristic():
    hp = hp9()
    assert hp.lambda_ut == -6.0
    assert hp.c0 == pytest.approx(np.sqrt(3.0))
    assert (hp.fusion_w, hp.alpha, hp.a0) == (0.5, 0.95, 1.0)


@pytest.mark.parametrize("kw", [
    dict(fusion_w=1.5), dict(alpha=1.0), dict(alpha=-0.1), dict(a0=0.0), dict(safety_margin=-1.0),
    dict(mode="bfgs"), dict(lambda_ut=-9.0), dict(theta_min=np.zeros(N)),
    dict(theta_min=np.full(N, 5.0), theta_max=np.full(N, 1.0)),
])
def test_invalid_hyperparams(kw):
    with pytest.raises(ValueError):
        hp9(**kw)


def test_mode_table():
    assert hp9(mode="auks").adaptive and hp9(mode="auks").w_eff == 0.5
    assert not hp9(mode="const").adaptive and hp9(mode="const").w_eff == 0.5
    assert not hp9(mode="ukf").adaptive and hp9(mode="ukf").w_eff == 1.0
    assert hp9(mode="ukf", adapt_override=True).adaptive
    assert hp9(mode="spsa").w_eff == 0.0


# ------------------------------------------------------------ sigma points


def test_ut_weight_values():
    w = ut_weights(9, -6.0)
    assert w[0] == -2.0
    assert np.all(w[1:] == 1.0 / 6.0)


def test_default_ut_weights_sum_to_one_exactly():
    w = ut_weights(9, -6.0)
    assert w[0] + 18 * w[1] == 1.0


@pytest.mark.parametrize("n, lam", [(9, -6.0), (2, 1.0), (3, 0.0), (5, -2.0), (7, 0.5)])
def test_ut_weights_sum_to_one(n, lam):
    assert abs(np.sum(ut_weights(n, lam)) - 1.0) <= 1e-15


def test_identity_cholesky_columns():
    b = belief9()
    s = generate_sigma_points(b, hp9(), seed=0)
    assert s.c_k == pytest.approx(np.sqrt(3.0))
    np.testing.assert_allclose(s.points[:, 1:N + 1], b.theta[:, None] + np.sqrt(3.0) * np.eye(N), rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.points[:, N + 1:], b.theta[:, None] - np.sqrt(3.0) * np.eye(N), rtol=0, atol=1e-15)


def test_bound_shrinks_c_k():
    theta = np.full(N, 10.0)
    theta[0] = 99.0
    s = generate_sigma_points(belief9(theta), hp9(), seed=0)
    assert s.c_k == pytest.approx(1.0, abs=1e-14)
    assert np.all(s.points <= 100.0) and np.all(s.points >= 0.01)
    assert np.max(s.points[0]) == pytest.approx(100.0, abs=1e-12)


def test_sigma_generation_rejects_outside_mean():
    with pytest.raises(DegenerateBoundsError):
        generate_sigma_points(belief9(np.full(N, 200.0)), hp9(), seed=0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(0.01, 50.0))
def test_sigma_and_spsa_points_stay_in_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((N, N))
    P = scale * (A @ A.T / N + 0.05 * np.eye(N))
    theta = rng.uniform(0.02, 99.0, N)
    hp = hp9()
    s = generate_sigma_points(belief9(theta, P), hp, seed)
    for col in np.hstack([s.points, s.spsa_pair]).T:
        assert hp.in_bounds(col)
    # no elementwise clipping: every sigma column is an exact scaled Cholesky column
    np.testing.assert_allclose(s.points[:, 1:N + 1] - theta[:, None], s.c_k * s.chol, atol=1e-9)
    assert set(np.unique(s.spsa_delta)) <= {-1.0, 1.0}


def test_spsa_delta_depends_only_on_seed():
    a = generate_sigma_points(belief9(), hp9(), seed=5)
    b = generate_sigma_points(belief9(), hp9(), seed=5)
    np.testing.assert_array_equal(a.spsa_delta, b.spsa_delta)


def test_jittered_cholesky():
    L = jittered_cholesky(np.zeros((3, 3)))
    assert np.all(np.isfinite(L))
    with pytest.raises(CholeskyFailure):
        jittered_cholesky(-np.eye(3))


def test_psd_project_clips_negative_eigenvalues():
    M = np.array([[1.0, 2.0], [2.0, 1.0]])
    out = psd_project(M)
    assert np.min(np.linalg.eigvalsh(out)) >= -1e-12
    np.testing.assert_allclose(out, 1.5 * np.ones((2, 2)), atol=1e-12)


# ---------------------------------------------------------------- moments


def test_constant_outputs_give_zero_spread():
    b = belief9()
    s = generate_sigma_points(b, hp9(), 0)
    m = unscented_moments(s, np.tile([0.3, 0.2, 1.0], (2 * N + 1, 1)), b, hp9())
    np.testing.assert_allclose(m.y_bar, [0.3, 0.2, 1.0], rtol=1e-12)
    assert np.allclose(m.C_yy, 0.0, atol=1e-14) and np.allclose(m.P_thetay, 0.0, atol=1e-14)


def test_moment_dimension_mismatch():
    b = belief9()
    s = generate_sigma_points(b, hp9(), 0)
    with pytest.raises(DimensionMismatch):
        unscented_moments(s, np.zeros((5, 3)), b, hp9())
    with pytest.raises(DimensionMismatch):
        unscented_moments(s, np.zeros((2 * N + 1, 4)), b, hp9())


# ----------------------------------------------------------------- kalman


def _scalar_moments(P_thetay, P_yy, P_pred=10.0):
    return Moments(np.zeros(1), np.array([[P_pred]]), np.zeros(1), np.array([[P_thetay]]),
                   np.array([[0.0]]), np.array([[P_yy]]))


def test_scalar_kalman_step():
    K, delta, post = kalman_step(_scalar_moments(2.0, 4.0), [1.0])
    assert K[0, 0] == 0.5 and delta[0] == -0.5
    assert post[0, 0] == pytest.approx(10.0 - 0.5 * 4.0 * 0.5)


def test_zero_measurement_still_contracts():
    K, delta, post = kalman_step(_scalar_moments(2.0, 4.0), [0.0])
    assert delta[0] == 0.0
    assert post[0, 0] < 10.0


def test_kalman_measurement_dimension():
    with pytest.raises(DimensionMismatch):
        kalman_step(_scalar_moments(2.0, 4.0), [1.0, 2.0])


# ------------------------------------------------------------------- spsa


def _spsa_sigma(p):
    p = np.asarray(p, dtype=float)
    return SigmaSet(np.zeros((p.size, 1)), np.ones(1), 1.0, np.eye(p.size), np.zeros((p.size, 2)), np.sign(p), p)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_spsa_is_exact_on_quadratics(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((N, N))
    A = A @ A.T
    b = rng.standard_normal(N)
    L = lambda t: 0.5 * t @ A @ t + b @ t
    theta = rng.uniform(1.0, 5.0, N)
    p = rng.choice([-1.0, 1.0], N) * rng.uniform(0.1, 0.5, N)
    s = _spsa_sigma(p)
    ghat, step = spsa_step(L(theta + p), L(theta - p), s, a_k=0.3)
    # central differences of a quadratic recover the directional derivative exactly
    g = A @ theta + b
    np.testing.assert_allclose(ghat * p, np.full(N, p @ g), rtol=1e-9, atol=1e-9)
    np.testing.assert_array_equal(step, -0.3 * ghat)


def test_spsa_flat_measurement():
    ghat, step = spsa_step(1.5, 1.5, _spsa_sigma([0.3, -0.2]), 0.7)
    assert not np.any(ghat) and not np.any(step)


def test_spsa_zero_perturbation():
    with pytest.raises(ZeroPerturbation):
        spsa_step(1.0, 0.0, _spsa_sigma([0.3, 0.0]), 1.0)


# ------------------------------------------------------- fuse / schedule


def test_fusion_blend():
    b = belief9()
    d_ukf = np.zeros(N)
    d_ukf[0] = 2.0
    d_spsa = np.zeros(N)
    d_spsa[1] = 2.0
    cand, step = fuse_and_update(b, d_ukf, d_spsa, hp9())
    expected = np.zeros(N)
    expected[:2] = 1.0
    np.testing.assert_array_equal(step, expected)
    np.testing.assert_array_equal(cand, b.theta + expected)
    cand, step = fuse_and_update(b, d_ukf, d_spsa, hp9(mode="ukf"))
    np.testing.assert_array_equal(step, d_ukf)


def test_fusion_projects_onto_bounds():
    d = np.zeros(N)
    d[3] = 500.0
    cand, step = fuse_and_update(belief9(), d, d, hp9())
    assert cand[3] == 100.0 and step[3] == 500.0


def test_interior_margin_keeps_candidates_off_the_bounds():
    d = np.full(N, -500.0)
    hp = hp9(interior_margin=0.01)
    cand, _ = fuse_and_update(belief9(), d, d, hp)
    np.testing.assert_allclose(cand, 0.01 + 0.01 * (100.0 - 0.01))
    assert generate_sigma_points(dataclasses.replace(belief9(), theta=cand), hp, 0).c_k > 0


def test_step_size_examples():
    b = belief9()
    assert schedule_step_size(b, np.zeros(3), hp9()) == 1.0
    assert schedule_step_size(b, np.array([1.0, 1.0, 1.0]), hp9()) == 0.25


def test_step_size_requires_k_at_least_one():
    b = belief9()
    b.k = 0
    with pytest.raises(ValueError):
        schedule_step_size(b, np.zeros(3), hp9())


# ------------------------------------------------------------- covariances


def test_covariance_update_with_zero_memory():
    b = belief9()
    e1 = np.eye(N)[0]
    C_dtheta, C_v = adapt_covariances(b, e1, np.zeros(3), np.zeros((3, 3)), hp9(alpha=0.0))
    np.testing.assert_array_equal(C_dtheta, np.outer(e1, e1))
    np.testing.assert_array_equal(C_v, np.zeros((3, 3)))


def test_constant_mode_keeps_covariances():
    b = belief9()
    C_dtheta, C_v = adapt_covariances(b, np.ones(N), np.ones(3), np.eye(3), hp9(mode="const"))
    np.testing.assert_array_equal(C_dtheta, b.C_dtheta)
    np.testing.assert_array_equal(C_v, b.C_v)


def test_covariance_recursion_against_brute_force():
    rng = np.random.default_rng(4)
    hp = hp9(alpha=0.7)
    b = belief9()
    C0_d, C0_v = b.C_dtheta.copy(), b.C_v.copy()
    steps = [(rng.standard_normal(N), rng.standard_normal(3), np.diag(rng.uniform(0, 1, 3))) for _ in range(8)]
    for d, e, Cyy in steps:
        b.C_dtheta, b.C_v = adapt_covariances(b, d, e, Cyy, hp)
        b.k += 1
    # closed form of the linear recursion
    a = hp.alpha
    n = len(steps)
    exp_d = a ** n * C0_d
    exp_v = a ** n * C0_v
    for i, (d, e, Cyy) in enumerate(steps, start=1):
        exp_d = exp_d + a ** (n - i) * (1 - a) * np.outer(d, d) / i ** 2
        exp_v = exp_v + a ** (n - i) * (1 - a) * (Cyy + np.outer(e, e)) / i ** 2
    np.testing.assert_allclose(b.C_dtheta, exp_d, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(b.C_v, exp_v, rtol=1e-12, atol=1e-14)


# ----------------------------------------------------------------- safety


def rec(cost, completed=True):
    return SyntheticOutcome(np.array([0.1, 0.2, cost]), completed=completed)


def test_safety_reflexive():
    b = belief9()
    assert safety_check(rec(2.0), rec(2.0), b.theta, hp9(safety_margin=0.0)).accepted


def test_safety_rejects_divergence():
    v = safety_check(rec(0.1, completed=False), rec(2.0), belief9().theta, hp9())
    assert not v.accepted and v.clause == "unstable"


def test_safety_threshold():
    theta = belief9().theta
    assert safety_check(rec(1.05), rec(1.0), theta, hp9(safety_margin=0.1)).accepted
    v = safety_check(rec(1.2), rec(1.0), theta, hp9(safety_margin=0.1))
    assert not v.accepted and v.clause == "cost"


def test_safety_rejects_out_of_bounds():
    v = safety_check(rec(1.0), rec(1.0), np.full(N, 1000.0), hp9())
    assert not v.accepted and v.clause == "bounds"


# -------------------------------------------------------------- iteration


class FailingProblem(SyntheticProblem):
    def response(self, theta):
        return np.zeros(3)

    def evaluate(self, k, requests):
        out = super().evaluate(k, requests)
        out[3] = SyntheticOutcome(out[3].y, completed=False, error="boom")
        return out


def test_iteration_is_transactional():
    b = belief9()
    snapshot = (b.theta.copy(), b.P.copy(), b.C_dtheta.copy(), b.C_v.copy(), b.k, b.a_k)
    with pytest.raises(RolloutFailure):
        tune_iteration(b, FailingProblem(), hp9(), 0)
    for before, after in zip(snapshot, (b.theta, b.P, b.C_dtheta, b.C_v, b.k, b.a_k)):
        np.testing.assert_array_equal(before, after)


def test_optimal_start_does_not_move():
    M = np.random.default_rng(1).standard_normal((3, N))
    theta_star = np.full(N, 10.0)
    problem = AffineProblem.around(M, theta_star)
    hp = hp9()
    b = ParameterBelief.initial(theta_star, hp)
    for _ in range(4):
        b, report = tune_iteration(b, problem, hp, 0)
        assert np.linalg.norm(report.delta_fused) <= 1e-9
    np.testing.assert_allclose(b.theta, theta_star, atol=1e-9)


def test_report_consistency():
    M = np.random.default_rng(2).standard_normal((3, N))
    problem = AffineProblem.around(M, np.full(N, 12.0), noise_std=0.01, seed=3)
    hp = hp9()
    b = ParameterBelief.initial(np.full(N, 10.0), hp)
    new, r = tune_iteration(b, problem, hp, 7)
    np.testing.assert_array_equal(r.delta_fused, hp.fusion_w * r.delta_ukf + (1 - hp.fusion_w) * r.delta_spsa)
    assert new.k == 2 and new.a_k == r.a_k
    assert r.sigma_y.shape == (2 * N + 1, 3)
    assert np.trace(r.P_post) <= np.trace(unscented_moments(generate_sigma_points(b, hp, 0), r.sigma_y, b, hp).P_pred)


def test_ukf_without_adaptation_equals_constant_baseline():
    M = np.random.default_rng(5).standard_normal((3, N))
    runs = []
    for hp in (hp9(mode="ukf", adapt_override=False), hp9(mode="const", fusion_w=1.0)):
        problem = AffineProblem.around(M, np.full(N, 12.0), noise_std=0.05, seed=9)
        b = ParameterBelief.initial(np.full(N, 10.0), hp)
        hist = []
        for _ in range(3):
            b, _ = tune_iteration(b, problem, hp, 9)
            hist.append((b.theta.copy(), b.P.copy()))
        runs.append(hist)
    for (ta, Pa), (tb, Pb) in zip(*runs):
        np.testing.assert_array_equal(ta, tb)
        np.testing.assert_array_equal(Pa, Pb)


def test_auks_and_ukf_agree_on_first_iteration_with_unit_fusion():
    M = np.random.default_rng(6).standard_normal((3, N))
    out = []
    for hp in (hp9(mode="auks", fusion_w=1.0), hp9(mode="ukf")):
        problem = AffineProblem.around(M, np.full(N, 12.0), noise_std=0.05, seed=2)
        b, _ = tune_iteration(ParameterBelief.initial(np.full(N, 10.0), hp), problem, hp, 2)
        out.append(b)
    np.testing.assert_array_equal(out[0].theta, out[1].theta)
    np.testing.assert_array_equal(out[0].P, out[1].P)


def _affine_campaigns(alpha, seeds=20, iterations=15):
    M = np.array([[1.0, 0.3, 0.0], [0.2, 1.5, 0.4], [0.0, -0.3, 0.8]])
    theta_star = np.array([4.0, 2.5, 6.0])
    dist, trace = [], []
    for seed in range(seeds):
        hp = TunerHyperparams(theta_min=[0.1] * 3, theta_max=[20.0] * 3, alpha=alpha)
        problem = AffineProblem.around(M, theta_star, noise_std=0.05, seed=seed)
        b = ParameterBelief.initial([1.0, 1.0, 1.0], hp)
        d0, tr0 = np.linalg.norm(b.theta - theta_star), np.trace(b.P)
        path = [1.0]
        for _ in range(iterations):
            b, _ = tune_iteration(b, problem, hp, seed)
            path.append(np.linalg.norm(b.theta - theta_star) / d0)
        dist.append(path)
        trace.append(np.trace(b.P) / tr0)
    return np.array(dist), np.array(trace)


def test_affine_benchmark_converges():
    dist, _ = _affine_campaigns(alpha=0.95)
    assert np.median(dist.min(axis=1)) < 0.05
    # monotone in expectation: the seed-averaged distance never increases over the first iterations
    mean = dist.mean(axis=0)
    assert np.all(np.diff(mean[:8]) < 0)


def test_exploration_diminishes_with_short_memory():
    _, trace = _affine_campaigns(alpha=0.8)
    assert np.median(trace) < 0.2


def test_spsa_mean_is_unbiased_within_sampling_error():
    # g_hat_i = g_i + sum_{j != i} (p_j / p_i) g_j; with P = I the cross terms have
    # zero mean and variance sum_{j != i} g_j^2, which fixes the standard error
    n, draws = N, 10_000
    rng = np.random.default_rng(1)
    A = rng.standard_normal((n, n))
    A = A @ A.T
    c = rng.standard_normal(n)
    hp = hp9()
    theta = rng.uniform(40.0, 60.0, n)
    b = ParameterBelief.initial(theta, hp)
    g = A @ theta + c
    L = lambda t: 0.5 * t @ A @ t + c @ t
    total = np.zeros(n)
    for seed in range(draws):
        s = generate_sigma_points(b, hp, seed)
        total += spsa_step(L(s.spsa_pair[:, 0]), L(s.spsa_pair[:, 1]), s, 1.0)[0]
    se = np.sqrt((g @ g - g ** 2) / draws)
    assert np.all(np.abs(total / draws - g) <= 4.0 * se)
