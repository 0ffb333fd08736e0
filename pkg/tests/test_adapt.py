import numpy as np
import pytest

from adaptivegam.adapt import (
    ExpLsConfig,
    ExpLsEstimator,
    KalmanConfig,
    KalmanFilterAdapter,
    KalmanState,
    expls_fit,
    greedy_search_q,
    kalman_loglik,
    kalman_step,
    run_adaptive,
    solve_theta1,
    static_kalman_fit,
    tune_forgetting,
    _candidate_logliks,
)
from adaptivegam.errors import NonFiniteInput, NoUsableRows, SingularGram
from conftest import make_daily_frame


# ---------------------------------------------------------------- kalman_step

def test_kalman_step_scalar_hand_example():
    state = KalmanState(np.zeros(1), np.eye(1))
    mean, var, new = kalman_step(state, [1.0], 2.0, Q_star=np.zeros((1, 1)))
    assert mean == 0.0
    assert var == 2.0
    np.testing.assert_allclose(new.theta, [1.0])
    np.testing.assert_allclose(new.P, [[0.5]])


def test_kalman_step_zero_gain_frozen():
    state = KalmanState(np.array([2.0, -1.0]), np.zeros((2, 2)))
    for y in (5.0, -3.0, 100.0):
        _, _, state = kalman_step(state, [1.0, 0.5], y)
    np.testing.assert_array_equal(state.theta, [2.0, -1.0])


def test_kalman_step_zero_innovation_keeps_theta_shrinks_P():
    theta = np.array([1.5, -0.5])
    state = KalmanState(theta.copy(), np.eye(2))
    f = np.array([1.0, 2.0])
    y = float(theta @ f)
    _, _, new = kalman_step(state, f, y)
    np.testing.assert_allclose(new.theta, theta)
    assert np.trace(new.P) < np.trace(state.P)


def test_kalman_step_rejects_nonfinite():
    state = KalmanState(np.zeros(1), np.eye(1))
    with pytest.raises(NonFiniteInput):
        kalman_step(state, [np.nan], 1.0)
    with pytest.raises(NonFiniteInput):
        kalman_step(state, [1.0], np.inf)


def test_kalman_scale_consistency():
    # multiplying sigma^2, P1 and Q by the same constant leaves theta unchanged
    rng = np.random.default_rng(0)
    f_seq = rng.normal(size=(50, 3))
    y_seq = rng.normal(size=50)
    Q = np.diag([1e-3, 0.0, 1e-4])
    for c in (10.0, 0.25):
        s1 = KalmanState(np.zeros(3), np.eye(3))
        s2 = KalmanState(np.zeros(3), c * np.eye(3))
        for t in range(50):
            _, _, s1 = kalman_step(s1, f_seq[t], y_seq[t], Q_star=Q, sigma2=1.0)
            _, _, s2 = kalman_step(s2, f_seq[t], y_seq[t], Q_star=c * Q, sigma2=c)
        np.testing.assert_allclose(s1.theta, s2.theta, rtol=1e-10)
        np.testing.assert_allclose(s1.P, s2.P / c, rtol=1e-10)


def test_covariance_stays_symmetric_psd():
    rng = np.random.default_rng(1)
    state = KalmanState(np.zeros(4), np.eye(4))
    Q = np.diag([0.0, 1e-6, 0.0, 1e-4])
    for t in range(500):
        f = rng.normal(size=4)
        _, _, state = kalman_step(state, f, rng.normal(), Q_star=Q)
        if t % 100 == 0:
            assert np.abs(state.P - state.P.T).max() <= 1e-10
            assert np.linalg.eigvalsh(state.P).min() >= -1e-8


def test_break_injection_increases_variance():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    base = KalmanConfig.static(3)
    broken = base.with_break(20)
    run_base = KalmanFilterAdapter(base).run(F, y)
    run_break = KalmanFilterAdapter(broken).run(F, y)
    assert run_break.variance_scales[21] > run_base.variance_scales[21]
    np.testing.assert_array_equal(run_break.forecasts[:21], run_base.forecasts[:21])


# ------------------------------------------------- static/ridge equivalence

def test_static_kalman_hand_ridge():
    theta = static_kalman_fit(np.ones((2, 1)), np.array([1.0, 3.0]))
    np.testing.assert_allclose(theta, [4.0 / 3.0])


def test_static_kalman_empty_history_returns_prior():
    theta = static_kalman_fit(np.empty((0, 3)), np.empty(0))
    np.testing.assert_array_equal(theta, np.zeros(3))


def test_static_equals_ridge_at_every_step():
    rng = np.random.default_rng(3)
    for d in (1, 3):
        F = rng.normal(size=(200, d))
        y = F @ rng.normal(size=d) + rng.normal(0, 0.5, 200)
        adapter = KalmanFilterAdapter(KalmanConfig.static(d))
        G = np.eye(d)
        b = np.zeros(d)
        for t in range(200):
            adapter.step(F[t], y[t])
            G += np.outer(F[t], F[t])
            b += F[t] * y[t]
            ridge = np.linalg.solve(G, b)
            err = np.abs(adapter.state.theta - ridge).max()
            assert err <= 1e-8 * max(1.0, np.abs(ridge).max())


# ------------------------------------------------------------------ loglik

def test_loglik_single_observation_known_sigma():
    config = KalmanConfig.static(1)
    ll = kalman_loglik(config, np.ones((1, 1)), np.zeros(1), sigma2=1.0)
    assert abs(ll - (-0.5 * np.log(4.0 * np.pi))) <= 1e-12


def test_loglik_deterministic():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(100, 2))
    y = rng.normal(size=100)
    config = KalmanConfig.dynamic(np.array([1e-4, 0.0]))
    assert kalman_loglik(config, F, y) == kalman_loglik(config, F, y)


def test_loglik_prefers_true_q_on_drifting_data():
    wins = 0
    q_true = 0.1**2
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = 500
        theta = 1.0
        F = np.ones((n, 1))
        y = np.empty(n)
        for t in range(n):
            y[t] = theta + rng.normal()
            theta += rng.normal(0, 0.1)
        cfg_true = KalmanConfig.dynamic(np.array([q_true]))
        cfg_zero = KalmanConfig.static(1)
        if kalman_loglik(cfg_true, F, y) > kalman_loglik(cfg_zero, F, y):
            wins += 1
    assert wins >= 95


# ------------------------------------------------------------- solve_theta1

def test_solve_theta1_scalar_single_observation():
    theta1 = solve_theta1(np.zeros((1, 1)), np.ones((1, 1)), np.array([5.0]))
    np.testing.assert_allclose(theta1, [5.0])


def test_solve_theta1_noiseless_recovers_truth():
    rng = np.random.default_rng(5)
    F = rng.normal(size=(60, 3))
    theta0 = np.array([1.0, -2.0, 0.5])
    theta1 = solve_theta1(np.zeros((3, 3)), F, F @ theta0)
    np.testing.assert_allclose(theta1, theta0, atol=1e-10)


def test_solve_theta1_matches_grid_search():
    rng = np.random.default_rng(6)
    F = rng.normal(size=(40, 2))
    y = F @ np.array([0.8, -0.3]) + rng.normal(0, 0.5, 40)
    Q = np.zeros((2, 2))
    best = solve_theta1(Q, F, y)

    def objective(theta1):
        cfg = KalmanConfig(theta1=np.asarray(theta1, dtype=float), P1_star=np.eye(2), Q_star=Q)
        return kalman_loglik(cfg, F, y)

    # brute-force grid around the solution
    grid = np.linspace(-1.5, 1.5, 41)
    values = np.array([[objective([a, b]) for b in grid] for a in grid])
    ia, ib = np.unravel_index(np.argmax(values), values.shape)
    assert abs(grid[ia] - best[0]) <= 1e-4 + (grid[1] - grid[0])
    assert abs(grid[ib] - best[1]) <= 1e-4 + (grid[1] - grid[0])
    # and the closed form is at least as good as the best grid point
    assert objective(best) >= values.max() - 1e-9


def test_batch_candidates_match_sequential_reference():
    rng = np.random.default_rng(7)
    F = rng.normal(size=(200, 3))
    y = F @ np.array([1.0, 0.5, -1.0]) + rng.normal(0, 1.0, 200)
    q_diag = np.array([0.0, 2.0**-8, 2.0**-12])
    theta1 = solve_theta1(np.diag(q_diag), F, y)
    ll_ref = kalman_loglik(KalmanConfig(theta1=theta1, P1_star=np.eye(3),
                                        Q_star=np.diag(q_diag)), F, y)
    lls, thetas = _candidate_logliks(F, y, q_diag.reshape(1, -1))
    assert abs(lls[0] - ll_ref) <= 1e-10 * max(1.0, abs(ll_ref))
    np.testing.assert_allclose(thetas[0], theta1, rtol=1e-10)


# ------------------------------------------------------------ greedy search

def test_solve_theta1_singular_system():
    from adaptivegam.errors import SingularSystem

    # a single row cannot identify a 3-dimensional initial mean
    with pytest.raises(SingularSystem):
        solve_theta1(np.zeros((3, 3)), np.ones((1, 3)), np.array([1.0]))


def test_loglik_rejects_nonfinite_history():
    config = KalmanConfig.static(1)
    with pytest.raises(NonFiniteInput):
        kalman_loglik(config, np.array([[np.inf]]), np.array([1.0]))


def test_greedy_static_truth_returns_zero():
    rng = np.random.default_rng(8)
    F = rng.normal(size=(120, 3))
    y = F @ np.array([1.0, 2.0, -0.5])
    result = greedy_search_q(F, y)
    np.testing.assert_array_equal(result.q_diag, np.zeros(3))


def test_greedy_deterministic():
    rng = np.random.default_rng(9)
    F = rng.normal(size=(150, 2))
    y = rng.normal(size=150)
    r1 = greedy_search_q(F, y)
    r2 = greedy_search_q(F, y)
    np.testing.assert_array_equal(r1.q_diag, r2.q_diag)
    assert r1.loglik == r2.loglik
    assert r1.n_evaluations == r2.n_evaluations


def test_greedy_requires_enough_rows():
    with pytest.raises(NoUsableRows):
        greedy_search_q(np.ones((10, 2)), np.ones(10))


def test_greedy_evaluation_budget_ten_dims():
    # 10 coordinates x 31 alternatives x <= 30 rounds stays under 10^4
    k = 10
    assert 1 + k * 31 * 30 < 10_000 + 1 + k * 31  # loose arithmetic guard
    rng = np.random.default_rng(10)
    F = rng.normal(size=(120, k))
    y = F @ rng.normal(size=k) + rng.normal(0, 1, 120)
    result = greedy_search_q(F, y, max_rounds=2)
    assert result.n_evaluations < 10_000


# ------------------------------------------------------------------- exp-LS

def test_expls_zero_mu_is_ols_mean():
    theta = expls_fit(np.ones((2, 1)), np.array([1.0, 3.0]), 0.0)
    np.testing.assert_allclose(theta, [2.0])


def test_expls_weighted_mean_hand_example():
    theta = expls_fit(np.ones((2, 1)), np.array([0.0, 4.0]), np.log(2.0))
    np.testing.assert_allclose(theta, [8.0 / 3.0], rtol=0, atol=1e-12)


def test_expls_total_forgetting_fits_last_point():
    theta = expls_fit(np.ones((3, 1)), np.array([1.0, 2.0, 7.0]), 50.0, epsilon=1e-12)
    np.testing.assert_allclose(theta, [7.0], rtol=1e-9)


def test_expls_mu_zero_matches_ridge_ols():
    rng = np.random.default_rng(11)
    F = rng.normal(size=(80, 3))
    y = F @ np.array([1.0, -1.0, 2.0]) + rng.normal(0, 0.3, 80)
    eps = 1e-6
    theta = expls_fit(F, y, 0.0, epsilon=eps)
    oracle = np.linalg.solve(F.T @ F + eps * np.eye(3), F.T @ y)
    np.testing.assert_allclose(theta, oracle, atol=1e-8)


def test_expls_incremental_matches_batch():
    rng = np.random.default_rng(12)
    F = rng.normal(size=(60, 2))
    y = rng.normal(size=60)
    mu = 0.05
    theta = expls_fit(F, y, mu)
    # batch oracle with the same weight convention (latest sample weight 1)
    w = np.exp(-mu * np.arange(len(y) - 1, -1, -1))
    G = (F * w[:, None]).T @ F
    b = (F * w[:, None]).T @ y
    oracle = np.linalg.solve(G, b)
    np.testing.assert_allclose(theta, oracle, atol=1e-8)


def test_expls_singular_gram_raises():
    est = ExpLsEstimator(3, mu=0.0, epsilon=0.0)
    est.update(np.array([1.0, 0.0, 0.0]), 1.0)
    with pytest.raises(SingularGram):
        _ = est.theta


def test_expls_empty_history_rejected():
    with pytest.raises(NoUsableRows):
        expls_fit(np.empty((0, 2)), np.empty(0), 0.1)


def test_tune_forgetting_prefers_drift_tracking():
    rng = np.random.default_rng(13)
    n = 400
    theta = 0.0
    F = np.ones((n, 1))
    y = np.empty(n)
    for t in range(n):
        theta += rng.normal(0, 0.2)
        y[t] = theta + rng.normal(0, 0.5)
    mu, scores = tune_forgetting(F, y, 100)
    assert mu > 0.0


# -------------------------------------------------------------- run_adaptive

def test_run_adaptive_frozen_configuration(fitted_gam, daily_frame):
    df = daily_frame[daily_frame["lag_ok"] > 0]
    dim = 1 + len(fitted_gam._effect_terms())
    config = KalmanConfig(theta1=fitted_gam.frozen_theta(),
                          P1_star=np.zeros((dim, dim)),
                          Q_star=np.zeros((dim, dim)))
    run = run_adaptive(fitted_gam, df, config)
    np.testing.assert_allclose(run.forecasts, fitted_gam.predict(df), rtol=0, atol=1e-6)
    assert len(run.forecasts) == len(df)
    assert run.thetas.shape == (len(df), dim)


def test_run_adaptive_expls(fitted_gam, daily_frame):
    df = daily_frame[daily_frame["lag_ok"] > 0]
    run = run_adaptive(fitted_gam, df, ExpLsConfig(mu=0.01))
    assert len(run.forecasts) == len(df)
    frame = run.to_frame()
    assert "theta_0" in frame.columns and "forecast" in frame.columns


def test_run_adaptive_break_beats_static_on_level_shift(fitted_gam):
    # synthetic -10% level break applied to the fitted model's own predictions
    frame = make_daily_frame(n_days=500, seed=21)
    df = frame[frame["lag_ok"] > 0]
    y = fitted_gam.predict(df) + np.random.default_rng(0).normal(0, 5, len(df))
    T = 400
    y[T:] *= 0.90
    df = df.assign(load_mw=y)
    dim = 1 + len(fitted_gam._effect_terms())
    static = run_adaptive(fitted_gam, df, KalmanConfig.static(dim))
    broken = run_adaptive(fitted_gam, df, KalmanConfig.static(dim).with_break(T))
    err_static = np.abs(y[T:T + 30] - static.forecasts[T:T + 30]).mean()
    err_break = np.abs(y[T:T + 30] - broken.forecasts[T:T + 30]).mean()
    assert err_break < err_static


# ------------------------------------------------------------- config wire

def test_kalman_config_json_roundtrip_exponents():
    config = KalmanConfig.dynamic(np.array([0.0, 2.0**-7, 2.0**-30]),
                                  theta1=np.array([1.0, 2.0, 3.0])).with_break(120)
    payload = config.to_dict()
    assert payload["q_diag_log2"] == [None, -7.0, -30.0]
    back = KalmanConfig.from_json(config.to_json())
    np.testing.assert_array_equal(back.Q_star, config.Q_star)
    np.testing.assert_array_equal(back.theta1, config.theta1)
    assert back.break_time == 120


def test_kalman_config_json_full_matrix():
    Q = np.array([[1e-3, 1e-5], [1e-5, 1e-4]])
    config = KalmanConfig(theta1=np.zeros(2), P1_star=np.eye(2), Q_star=Q)
    back = KalmanConfig.from_json(config.to_json())
    np.testing.assert_array_equal(back.Q_star, Q)
