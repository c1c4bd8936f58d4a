"""Gaussian diffusion: schedules, forward noising, reverse steps, guidance and samplers.

Timesteps are 1-based (``1 <= t <= T``); ``alpha_bar_at(0) == 1``. Every
stochastic function takes an explicit seed or caller-supplied noise and
draws from a Philox (counter-based) generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Protocol

import numpy as np

from .errors import ShapeMismatchError, ValidationError


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValidationError("beta must be a non-empty 1D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValidationError("every beta must lie strictly inside (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return self.beta.size

    @cached_property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        if not (0 if allow_zero else 1) <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha_bar_at(self, t: int) -> float:
        t = self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_t(t) - 1])


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValidationError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)))


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def forward_sample(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _same_shape(x0, eps, "forward_sample")
    ab = s.alpha_bar_at(s.check_t(t))
    return math.sqrt(ab) * np.asarray(x0, dtype=np.float64) + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def reverse_mean(x_t, t: int, eps_pred, s: NoiseSchedule) -> np.ndarray:
    _same_shape(x_t, eps_pred, "reverse_step")
    a, ab = s.alpha_at(t), s.alpha_bar_at(t)
    return (np.asarray(x_t) - (1.0 - a) / math.sqrt(1.0 - ab) * np.asarray(eps_pred)) / math.sqrt(a)


def reverse_step(x_t, t: int, eps_pred, s: NoiseSchedule, noise=None) -> np.ndarray:
    """One ancestral step with fixed variance sigma_t^2 = beta_t; the last step (t=1) is noiseless."""
    mu = reverse_mean(x_t, t, eps_pred, s)
    if t == 1 or noise is None:
        return mu
    _same_shape(x_t, noise, "reverse_step noise")
    return mu + math.sqrt(s.beta_at(t)) * np.asarray(noise)


def predict_x0(x_t, t: int, eps_pred, s: NoiseSchedule) -> np.ndarray:
    ab = s.alpha_bar_at(t)
    return (np.asarray(x_t) - math.sqrt(1.0 - ab) * np.asarray(eps_pred)) / math.sqrt(ab)


class Denoiser(Protocol):
    """eps_theta(x_t, t, condition); ``condition=None`` means the all-zero sentinel."""

    def __call__(self, x_t: np.ndarray, t: int, condition: np.ndarray | None) -> np.ndarray: ...


def denoise_loss(x0, t: int, eps, denoiser: Denoiser, s: NoiseSchedule, condition=None) -> float:
    x_t = forward_sample(x0, t, eps, s)
    pred = denoiser(x_t, t, condition)
    _same_shape(eps, pred, "denoise_loss")
    return float(np.mean((np.asarray(eps) - pred) ** 2))


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """(1 + w) eps_cond - w eps_uncond.

    Evaluated as eps_cond + w (eps_cond - eps_uncond) so that equal inputs and
    w = 0 both return eps_cond bit for bit.
    """
    _same_shape(eps_cond, eps_uncond, "cfg_combine")
    c = np.asarray(eps_cond, dtype=np.float64)
    return c + w * (c - np.asarray(eps_uncond, dtype=np.float64))


def absent(condition: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(condition, dtype=np.float64))


def condition_dropout(condition, p: float, rng: np.random.Generator):
    """Return the all-zero sentinel with probability ``p``, else ``condition`` unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError("dropout probability must lie in [0, 1]")
    return absent(condition) if rng.random() < p else condition


def guided_eps(denoiser: Denoiser, x_t, t: int, condition, w: float) -> np.ndarray:
    if condition is None:
        return denoiser(x_t, t, None)
    eps_c = denoiser(x_t, t, condition)
    eps_u = denoiser(x_t, t, absent(condition)) if w != 0 else eps_c
    return cfg_combine(eps_c, eps_u, w)


# --------------------------------------------------------------------------
# Analytic denoisers
# --------------------------------------------------------------------------

def gaussian_posterior_mean(x_t, t: int, s: NoiseSchedule, data_mean, data_var):
    """E[x0 | x_t] for x0 ~ N(data_mean, data_var I)."""
    if np.any(np.asarray(data_var) <= 0):
        raise ValidationError("data_var must be positive")
    ab = s.alpha_bar_at(t)
    return (math.sqrt(ab) * data_var * np.asarray(x_t) + (1.0 - ab) * data_mean) / (ab * data_var + 1.0 - ab)


def analytic_gaussian_denoiser(x_t, t: int, s: NoiseSchedule, data_mean, data_var) -> np.ndarray:
    """Optimal noise prediction for Gaussian data, via the closed-form posterior mean."""
    ab = s.alpha_bar_at(t)
    x0 = gaussian_posterior_mean(x_t, t, s, data_mean, data_var)
    return (np.asarray(x_t) - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


@dataclass
class AnalyticGaussianDenoiser:
    """Exact denoiser for x0 ~ N(mean, var I); ignores the condition."""

    schedule: NoiseSchedule
    mean: float = 0.0
    var: float = 1.0

    def __call__(self, x_t, t, condition=None):
        return analytic_gaussian_denoiser(x_t, t, self.schedule, self.mean, self.var)


@dataclass
class ConditionalGaussianDenoiser:
    """Exact denoiser for a Gaussian prior whose mean is an affine map of the condition.

    The condition (c, d', h', w') is concatenated to x_t (k, d', h', w') along
    the channel axis, as a learned network would receive it. The prior mean
    per channel is ``lift[k] * (offset + gain * mean_c(condition))``; the
    all-zero sentinel therefore yields the unconditional mean ``lift * offset``.
    """

    schedule: NoiseSchedule
    offset: float = 0.0
    gain: float = 1.0
    var: float = 0.01
    lift: np.ndarray | None = None

    def prior_mean(self, condition, latent_shape):
        k = latent_shape[0]
        lift = np.ones(k) if self.lift is None else np.asarray(self.lift, dtype=np.float64)
        lift = lift.reshape((k,) + (1,) * (len(latent_shape) - 1))
        if condition is None:
            return lift * self.offset * np.ones(latent_shape[1:])
        return lift * (self.offset + self.gain * np.asarray(condition).mean(axis=0))

    def __call__(self, x_t, t, condition=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        if condition is not None:
            condition = np.asarray(condition, dtype=np.float64)
            if condition.shape[1:] != x_t.shape[1:]:
                raise ShapeMismatchError(f"condition {condition.shape} does not match latent {x_t.shape}")
            joint = np.concatenate([x_t, condition], axis=0)
            x_t, condition = joint[: x_t.shape[0]], joint[x_t.shape[0]:]
        mean = self.prior_mean(condition, x_t.shape)
        return analytic_gaussian_denoiser(x_t, t, self.schedule, mean, self.var)


# --------------------------------------------------------------------------
# Samplers
# --------------------------------------------------------------------------

Callback = Callable[[int, np.ndarray], None]


def sample_ancestral(denoiser: Denoiser, condition, s: NoiseSchedule, shape, w: float = 1.0,
                     seed: int = 0, callback: Callback | None = None) -> np.ndarray:
    """Ancestral sampling over all T steps; ``callback(t, x_t)`` sees x_T ... x_0."""
    rng = make_rng(seed)
    x = rng.standard_normal(shape)
    if callback:
        callback(s.T, x)
    for t in range(s.T, 0, -1):
        eps = guided_eps(denoiser, x, t, condition, w)
        noise = rng.standard_normal(shape) if t > 1 else None
        x = reverse_step(x, t, eps, s, noise)
        if callback:
            callback(t - 1, x)
    return x


def log_snr(s: NoiseSchedule) -> np.ndarray:
    """Half log signal-to-noise ratio, log(sqrt(abar_t) / sqrt(1 - abar_t)), for t = 1..T."""
    ab = s.alpha_bar
    return 0.5 * (np.log(ab) - np.log1p(-ab))


def fast_timesteps(s: NoiseSchedule, steps: int, spacing: str = "logsnr") -> np.ndarray:
    """Decreasing integer timesteps T = t_0 > ... > t_{steps-1} = 1, followed by 0.

    ``spacing="logsnr"`` spaces the targets uniformly in log-SNR, ``"time"``
    uniformly in t. Targets are rounded greedily so the steps stay distinct;
    ``steps == T`` therefore always gives the dense schedule T, ..., 1, 0.
    """
    T = s.T
    if not 1 <= steps <= T:
        raise ValidationError(f"steps must lie in [1, {T}]")
    if spacing == "time":
        targets = np.linspace(T, 1, steps)
    elif spacing == "logsnr":
        lam = log_snr(s)
        # lam decreases with t; interpolate t as a function of lam.
        targets = np.interp(np.linspace(lam[-1], lam[0], steps), lam[::-1], np.arange(T, 0, -1, dtype=np.float64))
    else:
        raise ValidationError(f"unknown spacing {spacing!r}")
    out = [T]
    for i in range(1, steps):
        out.append(int(min(max(round(targets[i]), steps - i), out[-1] - 1)))
    return np.array(out + [0])


def sample_fast(denoiser: Denoiser, condition, s: NoiseSchedule, shape, w: float = 1.0,
                steps: int = 10, seed: int = 0, order: int = 2, spacing: str = "logsnr",
                callback: Callback | None = None) -> np.ndarray:
    """Deterministic multistep sampler in log-SNR time with data prediction.

    Second order uses the previous step's x0 estimate (two-step multistep);
    the first step and the final step onto t=0 are first order. Only x_T
    depends on ``seed``.
    """
    if order not in (1, 2):
        raise ValidationError("order must be 1 or 2")
    ts = fast_timesteps(s, steps, spacing)
    x = make_rng(seed).standard_normal(shape)
    if callback:
        callback(int(ts[0]), x)

    def coeffs(t):
        ab = s.alpha_bar_at(t)
        a, sig = math.sqrt(ab), math.sqrt(1.0 - ab)
        return a, sig, math.log(a) - math.log(sig)

    prev_x0, prev_h = None, None
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        t_cur, t_next = int(t_cur), int(t_next)
        eps = guided_eps(denoiser, x, t_cur, condition, w)
        x0 = predict_x0(x, t_cur, eps, s)
        if t_next == 0:
            x = x0
        else:
            a_c, sig_c, lam_c = coeffs(t_cur)
            a_n, sig_n, lam_n = coeffs(t_next)
            h = lam_n - lam_c
            if order == 2 and prev_x0 is not None:
                r = prev_h / h
                d = (1.0 + 0.5 / r) * x0 - (0.5 / r) * prev_x0
            else:
                d = x0
            x = (sig_n / sig_c) * x - a_n * math.expm1(-h) * d
            prev_h = h
        prev_x0 = x0
        if callback:
            callback(t_next, x)
    return x


def ddim_step(x_t, t: int, t_prev: int, eps_pred, s: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) transition from t to t_prev < t."""
    x0 = predict_x0(x_t, t, eps_pred, s)
    ab = s.alpha_bar_at(t_prev)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * np.asarray(eps_pred)


SAMPLERS = ("fast", "ancestral")


def sample(kind: str, denoiser: Denoiser, condition, s: NoiseSchedule, shape, w: float = 1.0,
           steps: int = 10, seed: int = 0, callback: Callback | None = None) -> np.ndarray:
    if kind == "fast":
        return sample_fast(denoiser, condition, s, shape, w, steps, seed, callback=callback)
    if kind == "ancestral":
        return sample_ancestral(denoiser, condition, s, shape, w, seed, callback=callback)
    raise ValidationError(f"unknown sampler {kind!r}; choose from {SAMPLERS}")
