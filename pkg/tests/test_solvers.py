import numpy as np
import pytest

from latentcfm.experiments import gaussian_marginal_field
from latentcfm.solvers import (LINEAR, ComposeConfig, ContractError, GaussianSchedule,
                               IntegrationError, SolverConfig, composed_field, integrate,
                               langevin_correct, linear_coefficients, predictor_corrector,
                               vector_field_to_score)
from solver_checks import convergence_order, dopri_errors, langevin_variance, round_trip_error


def test_constant_field_exact_for_euler():
    x0 = np.array([[1.0, -2.0]])
    for n in (1, 3, 17):
        out = integrate(lambda x, t: np.array([[0.5, 2.0]]), x0, SolverConfig("euler", steps=n))
        np.testing.assert_allclose(out.final, [[1.5, 0.0]], atol=1e-14)


def test_euler_recurrence_and_dopri_growth():
    out = integrate(lambda x, t: x, np.ones((1, 1)), SolverConfig("euler", steps=10))
    assert out.final[0, 0] == pytest.approx(1.1 ** 10, abs=1e-12)
    assert 1.1 ** 10 == pytest.approx(2.593742, abs=1e-6)
    out = integrate(lambda x, t: x, np.ones((1, 1)), SolverConfig("dopri5", rtol=1e-8, atol=1e-8))
    assert abs(out.final[0, 0] - np.e) < 1e-6


def test_convergence_orders():
    assert abs(convergence_order("euler") - 1) < 0.3
    assert abs(convergence_order("rk4") - 4) < 0.3


def test_dopri_error_within_ten_rtol():
    errs = dopri_errors(rtol=1e-5, atol=1e-5)
    assert all(e <= 1e-4 for e in errs.values()), errs


def test_trajectory_records_times():
    x0 = np.zeros((3, 2))
    traj = integrate(lambda x, t: np.ones_like(x), x0, SolverConfig("rk4", steps=4), record=True)
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(1.0)
    assert np.all(np.diff(traj.times) > 0)
    np.testing.assert_array_equal(traj.states[0], x0)
    rows = traj.to_rows(max_traj=2)
    assert len(rows) == 5 * 2 and rows[0][:2] == (0, 0.0)
    adaptive = integrate(lambda x, t: x, np.ones((1, 1)), SolverConfig(), record=True)
    assert np.all(np.diff(adaptive.times) > 0) and adaptive.n_evals > 0


def test_step_cap_and_bad_config():
    with pytest.raises(IntegrationError):
        integrate(lambda x, t: 50 * np.sin(50 * x * t), np.ones((1, 1)),
                  SolverConfig(rtol=1e-10, atol=1e-10, max_steps=5))
    with pytest.raises(IntegrationError):
        integrate(lambda x, t: x * np.nan, np.ones((1, 1)), SolverConfig("euler"))
    with pytest.raises(ContractError):
        SolverConfig(scheme="midpoint")
    with pytest.raises(ContractError):
        SolverConfig(steps=0)


def test_score_conversion_examples():
    assert linear_coefficients(0.5) == (2.0, 1.0)
    assert vector_field_to_score(np.array([3.0]), np.array([1.0]), 0.5)[0] == 1.0
    x = np.array([0.3, -1.2])
    np.testing.assert_allclose(vector_field_to_score(linear_coefficients(0.3)[0] * x, x, 0.3), 0.0)
    with pytest.raises(ContractError):
        vector_field_to_score(x, x, 0.0)
    with pytest.raises(ContractError):
        vector_field_to_score(x, x, 1.0)
    assert round_trip_error() < 1e-12


def test_general_schedule_matches_linear_specialisation():
    for t in (0.1, 0.5, 0.9):
        np.testing.assert_allclose(LINEAR.coefficients(t), linear_coefficients(t), rtol=1e-14)
    vp = GaussianSchedule(lambda t: t, lambda t: 1.0, lambda t: np.sqrt(1 - t ** 2),
                          lambda t: -t / np.sqrt(1 - t ** 2))
    a, b = vp.coefficients(0.6)
    assert a == pytest.approx(1 / 0.6)
    assert b == pytest.approx((0.8 + 0.6 ** 2 / 0.8) * 0.8 / 0.6)


def test_field_to_score_on_gaussian_marginal():
    """Independent oracle: N(m, s^2) data gives x_t ~ N(t m, s_t^2) with known score."""
    m, var = 1.5, 0.3
    field = gaussian_marginal_field(m, var)
    x = np.linspace(-2, 3, 11)
    for t in (0.2, 0.5, 0.8):
        s2 = (1 - t) ** 2 + t ** 2 * var
        np.testing.assert_allclose(vector_field_to_score(field(x, t), x, t), -(x - t * m) / s2,
                                   rtol=1e-12, atol=1e-12)


def test_composed_field_cases():
    x = np.random.default_rng(0).normal(size=(5, 2))
    half = lambda y, t, c: linear_coefficients(t)[0] * y / 2
    np.testing.assert_allclose(composed_field(half, x, 0.4, [0, 1]), 0.0, atol=1e-14)
    one = lambda y, t, c: y * c
    np.testing.assert_allclose(composed_field(one, x, 0.4, [3.0]), 3.0 * x)
    with pytest.raises(ContractError):
        composed_field(one, x, 0.0, [1.0, 1.0])


def test_langevin_identity_contraction_and_stationarity():
    x = np.random.default_rng(0).normal(size=(10, 1))
    np.testing.assert_array_equal(langevin_correct(lambda y: -y, x, 0, 0.1, 0.1, 0), x)
    out = langevin_correct(lambda y: -y, x, 500, 0.1, 0.0, 0)
    assert np.abs(out).max() < 1e-12
    # the discretised chain x <- (1 - e) x + sqrt(2 e) z is stationary at 1 / (1 - e / 2)
    assert langevin_variance(eps=0.1) == pytest.approx(1 / (1 - 0.05), rel=0.03)
    assert langevin_variance(eps=0.01, steps=2000) == pytest.approx(1.0, rel=0.05)
    with pytest.raises(ContractError):
        langevin_correct(lambda y: -y, x, -1, 0.1, 0.1, 0)


def test_product_of_gaussians_sharpens_variance():
    m, var = 0.7, 0.25
    field = gaussian_marginal_field(m, var)
    rng = np.random.default_rng(0)
    cfg = ComposeConfig(n_ode=100, n_langevin=2, eps_drift=1e-2, eps_diff=1e-2)
    s2 = (1 - cfg.t_floor) ** 2 + cfg.t_floor ** 2 * var
    x = cfg.t_floor * m + np.sqrt(s2 / 2) * rng.standard_normal((20000, 1))
    out = predictor_corrector(lambda y, t, c: field(y, t), [None, None], x, cfg, rng)
    assert out.var() == pytest.approx(var / 2, rel=0.1)
    assert out.mean() == pytest.approx(m, abs=0.02)


def test_single_condition_without_correction_is_plain_euler():
    field = gaussian_marginal_field(0.5, 0.2)
    x = np.random.default_rng(1).normal(size=(200, 1))
    cfg = ComposeConfig(n_ode=50, n_langevin=0)
    out = predictor_corrector(lambda y, t, c: field(y, t), [None], x, cfg, np.random.default_rng(0))
    plain = integrate(field, x, SolverConfig("euler", steps=50), t0=cfg.t_floor, t1=1 - cfg.t_ceil)
    np.testing.assert_allclose(out, plain.final, rtol=1e-12, atol=1e-12)


def test_compose_config_validation():
    with pytest.raises(ContractError):
        ComposeConfig(t_floor=0.0)
    with pytest.raises(ContractError):
        ComposeConfig(n_langevin=-1)
    cfg = ComposeConfig(eps_drift=[0.1, 0.2], eps_diff=0.3)
    assert cfg.eps_at(1) == (0.2, 0.3)
