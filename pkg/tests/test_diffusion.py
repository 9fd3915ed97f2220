import numpy as np
import pytest

from roomdiff.diffusion import (DiffusionSample, NoiseSchedule, ancestral_sample,
                                estimate_x0, make_schedule, posterior_mean,
                                q_sample)
from roomdiff.errors import ConfigError, DivergenceError


def test_schedule_endpoints(schedule):
    assert schedule.beta_at(1) == pytest.approx(1e-4)
    assert schedule.beta_at(1000) == pytest.approx(0.02)
    assert schedule.T == 1000


def test_schedule_first_step_values(schedule):
    assert schedule.alpha_at(1) == pytest.approx(0.9999)
    assert schedule.alpha_bar_at(1) == pytest.approx(0.9999)
    assert schedule.sigma2_at(1) == pytest.approx(1e-4)


def test_schedule_t2_definition():
    s = make_schedule(2, 0.1, 0.3)
    assert s.alpha_bar_at(2) == pytest.approx((1 - 0.1) * (1 - 0.3))
    assert s.sigma2_at(2) == pytest.approx((1 - 0.9) / (1 - 0.9 * 0.7) * 0.3)


def test_schedule_monotone_and_positive(schedule):
    assert np.all(np.diff(schedule.beta) > 0)
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert np.all(schedule.sigma2 >= 0)
    assert 0 < schedule.beta[0] < schedule.beta[-1] < 1


def test_schedule_log_space_identity(schedule):
    log_acc = np.exp(np.cumsum(np.log(schedule.alpha)))
    assert np.max(np.abs(log_acc - schedule.alpha_bar)
                  / schedule.alpha_bar) < 1e-12


def test_schedule_invalid_params():
    with pytest.raises(ConfigError):
        make_schedule(1, 1e-4, 0.02)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.0, 0.02)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.5, 0.2)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.5, 1.0)


def test_q_sample_zero_noise(schedule):
    x0 = np.ones((3, 4))
    out = q_sample(schedule, x0, 100, None, eps=np.zeros_like(x0))
    assert np.allclose(out.x_t, np.sqrt(schedule.alpha_bar_at(100)) * x0)
    assert out.t == 100


def test_q_sample_terminal_is_noise_dominated(schedule):
    # alpha_bar at T for the linear 1e-4..0.02 schedule, from log-space
    abar_T = float(np.exp(np.sum(np.log(schedule.alpha))))
    assert abar_T < 1e-4
    x0 = np.full((2, 3), 5.0)
    rng = np.random.default_rng(0)
    out = q_sample(schedule, x0, 1000, rng)
    assert np.max(np.abs(out.x_t - out.eps)) < \
        np.sqrt(abar_T) * 5.0 + np.sqrt(1 - abar_T) * 0 + 0.06


def test_q_sample_monte_carlo_moments(schedule):
    # acceptance criterion 1 runs the full 1e5-draw version
    rng = np.random.default_rng(1)
    x0 = np.array([0.5, -1.0, 2.0, 0.0])
    t = 600
    draws = np.stack([q_sample(schedule, x0, t, rng).x_t
                      for _ in range(20000)])
    abar = schedule.alpha_bar_at(t)
    se_mean = np.sqrt((1 - abar) / len(draws))
    assert np.all(np.abs(draws.mean(0) - np.sqrt(abar) * x0) < 5 * se_mean)


def test_q_sample_out_of_range(schedule):
    with pytest.raises(IndexError):
        q_sample(schedule, np.zeros(3), 0, np.random.default_rng(0))
    with pytest.raises(IndexError):
        q_sample(schedule, np.zeros(3), 1001, np.random.default_rng(0))


def test_q_sample_deterministic_given_seed(schedule):
    x0 = np.arange(6.0).reshape(2, 3)
    a = q_sample(schedule, x0, 10, np.random.default_rng(9))
    b = q_sample(schedule, x0, 10, np.random.default_rng(9))
    assert np.array_equal(a.x_t, b.x_t)
    assert np.array_equal(a.eps, b.eps)


def test_posterior_mean_recovers_scaled_x0(schedule):
    # with eps = 0 the exact posterior mean is sqrt(abar_{t-1}) x0
    x0 = np.random.default_rng(2).standard_normal((4, 5))
    t = 50
    out = q_sample(schedule, x0, t, None, eps=np.zeros_like(x0))
    mu = posterior_mean(schedule, out.x_t, np.zeros_like(x0), t)
    target = np.sqrt(schedule.alpha_bar_at(t - 1)) * x0
    assert np.max(np.abs(mu - target)) < 1e-9


def test_posterior_mean_t1_inverts(schedule):
    x0 = np.random.default_rng(3).standard_normal((2, 3))
    out = q_sample(schedule, x0, 1, np.random.default_rng(4))
    mu = posterior_mean(schedule, out.x_t, out.eps, 1)
    assert np.max(np.abs(mu - x0)) < 1e-9


def test_posterior_mean_degenerate_schedule():
    s = make_schedule(5, 1e-12, 1e-12)
    x_t = np.random.default_rng(5).standard_normal((3, 3))
    mu = posterior_mean(s, x_t, np.zeros_like(x_t), 3)
    assert np.allclose(mu, x_t, atol=1e-9)


def test_posterior_mean_shape_check(schedule):
    with pytest.raises(ValueError):
        posterior_mean(schedule, np.zeros((2, 3)), np.zeros((3, 2)), 5)


def test_estimate_x0_inverts_q_sample(schedule):
    x0 = np.random.default_rng(6).standard_normal((4, 6))
    for t in (1, 137, 1000):
        out = q_sample(schedule, x0, t, np.random.default_rng(7))
        rec = estimate_x0(schedule, out.x_t, out.eps, t)
        assert np.max(np.abs(rec - x0)) < 1e-9


def test_estimate_x0_zero_eps(schedule):
    x_t = np.random.default_rng(8).standard_normal((2, 2))
    rec = estimate_x0(schedule, x_t, np.zeros_like(x_t), 42)
    assert np.allclose(rec, x_t / np.sqrt(schedule.alpha_bar_at(42)))


def test_posterior_mean_x0_identity(schedule):
    # mu equals the x0-parametrized posterior mean for random inputs
    rng = np.random.default_rng(9)
    x_t = rng.standard_normal((3, 4))
    eps_hat = rng.standard_normal((3, 4))
    for t in (2, 250, 999):
        beta = schedule.beta_at(t)
        abar = schedule.alpha_bar_at(t)
        abar_prev = schedule.alpha_bar_at(t - 1) if t > 1 else 1.0
        alpha = schedule.alpha_at(t)
        x0_est = estimate_x0(schedule, x_t, eps_hat, t)
        direct = posterior_mean(schedule, x_t, eps_hat, t)
        via_x0 = (np.sqrt(abar_prev) * beta * x0_est
                  + np.sqrt(alpha) * (1 - abar_prev) * x_t) / (1 - abar)
        assert np.max(np.abs(direct - via_x0)) < 1e-9


def test_single_step_composition_matches_marginal():
    # composing t Markov steps reproduces the closed-form marginal moments
    s = make_schedule(20, 1e-3, 0.05)
    rng = np.random.default_rng(10)
    x0 = np.array([1.0, -0.5, 0.25, 2.0])
    n = 20000
    direct = np.stack([q_sample(s, x0, 20, rng).x_t for _ in range(n)])
    stepped = np.tile(x0, (n, 1))
    for t in range(1, 21):
        beta = s.beta_at(t)
        stepped = np.sqrt(1 - beta) * stepped \
            + np.sqrt(beta) * rng.standard_normal(stepped.shape)
    for sample in (direct, stepped):
        abar = s.alpha_bar_at(20)
        se_mean = np.sqrt((1 - abar) / n)
        assert np.all(np.abs(sample.mean(0) - np.sqrt(abar) * x0)
                      < 5 * se_mean)
        var = sample.var(0)
        se_var = (1 - abar) * np.sqrt(2.0 / n)
        assert np.all(np.abs(var - (1 - abar)) < 5 * se_var)


class GaussianOracle:
    """Optimal noise predictor for x0 ~ N(m, v) under the forward process."""

    def __init__(self, schedule, m, v):
        self.schedule = schedule
        self.m = m
        self.v = v

    def __call__(self, x, t, cond=None):
        abar = self.schedule.alpha_bar_at(t)
        return np.sqrt(1 - abar) * (x - np.sqrt(abar) * self.m) \
            / (abar * self.v + 1 - abar)


def test_ancestral_sampling_with_oracle_denoiser():
    s = make_schedule(200, 1e-3, 0.03)
    m, v = 0.7, 0.16
    oracle = GaussianOracle(s, m, v)
    rng = np.random.default_rng(11)
    n = 4000
    out = ancestral_sample(oracle, s, (n, 1, 1), rng).ravel()
    se_mean = np.sqrt(v / n)
    assert abs(out.mean() - m) < 3 * se_mean
    se_var = v * np.sqrt(2.0 / n)
    assert abs(out.var() - v) < 3 * se_var


def test_ancestral_sampling_deterministic(schedule):
    model = lambda x, t, cond=None: np.zeros_like(x)
    a = ancestral_sample(model, schedule, (2, 3), np.random.default_rng(12))
    b = ancestral_sample(model, schedule, (2, 3), np.random.default_rng(12))
    assert np.array_equal(a, b)


def test_ancestral_single_step_is_posterior_mean():
    s = make_schedule(2, 1e-3, 2e-3)
    # T=2 keeps one noisy step; with T effectively 1 the chain returns the
    # posterior mean of x_1 directly
    class OneStep(NoiseSchedule):
        pass
    s1 = NoiseSchedule(s.beta[:1], s.alpha[:1], s.alpha_bar[:1], s.sigma2[:1])
    model = lambda x, t, cond=None: 0.5 * np.ones_like(x)
    rng = np.random.default_rng(13)
    got = ancestral_sample(model, s1, (2, 2), rng)
    rng2 = np.random.default_rng(13)
    x1 = rng2.standard_normal((2, 2))
    assert np.allclose(got, posterior_mean(s1, x1, 0.5 * np.ones((2, 2)), 1))


def test_ancestral_divergence_reports_step(schedule):
    model = lambda x, t, cond=None: np.full_like(x, np.inf)
    with pytest.raises(DivergenceError, match="t=1000"):
        ancestral_sample(model, schedule, (1, 2), np.random.default_rng(14))


def test_zero_sigma_sampling_is_deterministic_in_x_T():
    s = make_schedule(50, 1e-3, 0.02)
    frozen = NoiseSchedule(s.beta, s.alpha, s.alpha_bar,
                           np.zeros_like(s.sigma2))
    model = lambda x, t, cond=None: 0.1 * x
    out1 = ancestral_sample(model, frozen, (3, 2), np.random.default_rng(15))
    out2 = ancestral_sample(model, frozen, (3, 2), np.random.default_rng(15))
    assert np.array_equal(out1, out2)
    assert isinstance(q_sample(s, np.zeros((1, 1)), 5,
                               np.random.default_rng(0)), DiffusionSample)
