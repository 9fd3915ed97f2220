"""Forward corruption and ancestral sampling for set diffusion.

Forward process with a linear variance schedule beta_1 < ... < beta_T:

    q(x_t | x_{t-1}) = N(x_t; sqrt(1 - beta_t) x_{t-1}, beta_t I)
    q(x_t | x_0)     = N(x_t; sqrt(abar_t) x_0, (1 - abar_t) I)

with alpha_t = 1 - beta_t and abar_t the running product. The reverse chain
uses the noise-prediction parametrization

    mu(x_t, t) = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)

with fixed variances sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
(sigma_1^2 = beta_1, and no noise is added at the final step).

All arithmetic here is float64; steps t are 1-based in [1, T].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray       # (T,)
    alpha: np.ndarray      # (T,)
    alpha_bar: np.ndarray  # (T,)
    sigma2: np.ndarray     # (T,) posterior variances

    @property
    def T(self) -> int:
        return len(self.beta)

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside [1, {self.T}]")

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def sigma2_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigma2[t - 1])


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with derived alpha, alpha_bar, sigma^2 tables."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev_bar = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - prev_bar) / (1.0 - alpha_bar) * beta
    sigma2[0] = beta[0]
    return NoiseSchedule(beta, alpha, alpha_bar, sigma2)


@dataclass(frozen=True)
class DiffusionSample:
    x_t: np.ndarray
    t: int
    eps: np.ndarray


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: int, rng,
             eps=None) -> DiffusionSample:
    """Draw x_t ~ q(x_t | x_0) and return the noise actually used."""
    abar = schedule.alpha_bar_at(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return DiffusionSample(x_t, t, eps)


def posterior_mean(schedule: NoiseSchedule, x_t: np.ndarray,
                   eps_hat: np.ndarray, t: int) -> np.ndarray:
    if np.shape(x_t) != np.shape(eps_hat):
        raise ValueError(f"shape mismatch {np.shape(x_t)} vs {np.shape(eps_hat)}")
    beta = schedule.beta_at(t)
    abar = schedule.alpha_bar_at(t)
    alpha = schedule.alpha_at(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)


def estimate_x0(schedule: NoiseSchedule, x_t: np.ndarray,
                eps_hat: np.ndarray, t: int) -> np.ndarray:
    """Single-shot clean estimate inverting q(x_t | x_0) at the given noise."""
    abar = schedule.alpha_bar_at(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def _apply_condition(x, schedule, cond, t_next, rng):
    """Overwrite conditioned entries of x in place after a reverse step.

    Completion keeps observed entries on their own forward trajectory
    (noised to level t_next, exact at t_next = 0); re-arrangement clamps
    them to their clean values at every step.
    """
    if cond is None or cond.mode in ("none", "text"):
        return x
    mask = cond.mask
    if mask is None or not mask.any():
        return x
    observed = np.broadcast_to(
        np.asarray(cond.observed, dtype=np.float64), x.shape)
    if cond.mode == "completion":
        if t_next >= 1:
            # independent forward noise per chain in a batch
            noised = q_sample(schedule, observed, t_next, rng).x_t
        else:
            noised = observed
        x[..., mask] = noised[..., mask]
    elif cond.mode == "rearrangement":
        x[..., mask] = observed[..., mask]
    return x


def ancestral_sample(model, schedule: NoiseSchedule, shape, rng,
                     cond=None) -> np.ndarray:
    """Run the reverse chain from x_T ~ N(0, I) down to x_0.

    `model` is called as model(x, t, cond) and must return a noise estimate
    of the same shape; `shape` is (N, D) for one scene or (B, N, D) for a
    batch. Conditioning overwrites (completion / re-arrangement) are applied
    after every step, including the initialization.
    """
    T = schedule.T
    x = rng.standard_normal(shape)
    if cond is not None and cond.mode == "completion":
        _apply_condition(x, schedule, cond, T, rng)
    elif cond is not None and cond.mode == "rearrangement":
        _apply_condition(x, schedule, cond, 0, rng)
    for t in range(T, 0, -1):
        eps_hat = np.asarray(model(x, t, cond), dtype=np.float64)
        mu = posterior_mean(schedule, x, eps_hat, t)
        if t > 1:
            sigma = np.sqrt(schedule.sigma2_at(t))
            x = mu + sigma * rng.standard_normal(shape)
        else:
            x = mu
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite sample at step t={t}")
        _apply_condition(x, schedule, cond, t - 1, rng)
    return x
