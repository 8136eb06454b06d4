"""
Forward noising process, posteriors and variational bound terms
All functions are pure; points are arrays of shape (d,) or (n, d) and
timesteps are scalars or per-sample arrays of shape (n,)
"""

import math
from dataclasses import dataclass

import numpy as np

from .schedules import NoiseSchedule, TimestepLike

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ReverseGaussian:
    """Diagonal Gaussian over x_{t-1}: mean and per-dimension variance"""
    mean: np.ndarray
    variance: np.ndarray


def _per_sample(values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reshape per-timestep coefficients to broadcast against x"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (x.ndim - values.ndim))


def _gather(arr: np.ndarray, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _per_sample(arr[t - 1], x)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def q_sample(x0: np.ndarray, t: TimestepLike, eps: np.ndarray,
             sched: NoiseSchedule) -> np.ndarray:
    """Draw x_t from q(x_t | x_0) given the noise: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps"""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps, "q_sample")
    t = sched.check_timestep(t)
    alpha_bar = _gather(sched.alpha_bars, t, x0)
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def q_step(x_prev: np.ndarray, t: TimestepLike, eps: np.ndarray,
           sched: NoiseSchedule) -> np.ndarray:
    """One forward kernel step q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)"""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    t = sched.check_timestep(t)
    beta = _gather(sched.betas, t, x_prev)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def q_posterior(x0: np.ndarray, xt: np.ndarray, t: TimestepLike,
                sched: NoiseSchedule) -> ReverseGaussian:
    """Mean and variance of q(x_{t-1} | x_t, x_0)"""
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    _same_shape(x0, xt, "q_posterior")
    t = sched.check_timestep(t)

    alpha_bar = _gather(sched.alpha_bars, t, xt)
    alpha_bar_prev = _gather(sched.alpha_bar_prev, t, xt)
    beta = _gather(sched.betas, t, xt)
    alpha = _gather(sched.alphas, t, xt)

    coef_x0 = np.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
    coef_xt = np.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    variance = np.broadcast_to(_gather(sched.beta_tildes, t, xt), xt.shape).copy()
    return ReverseGaussian(mean=coef_x0 * x0 + coef_xt * xt, variance=variance)


def predict_x0_from_eps(xt: np.ndarray, t: TimestepLike, eps: np.ndarray,
                        sched: NoiseSchedule) -> np.ndarray:
    xt = np.asarray(xt, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(xt, eps, "predict_x0_from_eps")
    t = sched.check_timestep(t)
    alpha_bar = _gather(sched.alpha_bars, t, xt)
    return (xt - np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha_bar)


def mu_from_eps(xt: np.ndarray, t: TimestepLike, eps: np.ndarray,
                sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean (1/sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - ab_t) eps)"""
    xt = np.asarray(xt, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(xt, eps, "mu_from_eps")
    t = sched.check_timestep(t)
    alpha = _gather(sched.alphas, t, xt)
    alpha_bar = _gather(sched.alpha_bars, t, xt)
    return (xt - ((1.0 - alpha) / np.sqrt(1.0 - alpha_bar)) * eps) / np.sqrt(alpha)


def score_from_eps(eps: np.ndarray, t: TimestepLike, sched: NoiseSchedule) -> np.ndarray:
    """grad log q_t(x) implied by a noise prediction: -eps / sqrt(1 - ab_t)"""
    eps = np.asarray(eps, dtype=np.float64)
    t = sched.check_timestep(t)
    one_minus = 1.0 - _gather(sched.alpha_bars, t, eps)
    if np.any(one_minus <= 0):
        raise ValueError("score is undefined where alpha_bar_t = 1")
    return -eps / np.sqrt(one_minus)


def log_variance_from_v(v: np.ndarray, t: TimestepLike, sched: NoiseSchedule) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    t = sched.check_timestep(t)
    max_log = _gather(np.log(sched.betas), t, v)
    min_log = _gather(sched.log_beta_tildes_clipped, t, v)
    return v * max_log + (1.0 - v) * min_log


def sigma_from_v(v: np.ndarray, t: TimestepLike, sched: NoiseSchedule) -> np.ndarray:
    """
    Learned variance exp(v log beta_t + (1 - v) log beta_tilde_t)

    v is unconstrained; values outside [0, 1] extrapolate. At t = 1 the
    schedule's clipped log beta_tilde (beta_tilde_2) stands in for log 0.
    """
    return np.exp(log_variance_from_v(v, t, sched))


def log_variance_span(t: TimestepLike, sched: NoiseSchedule, like: np.ndarray) -> np.ndarray:
    """d log sigma^2 / d v = log beta_t - log beta_tilde_t (clipped)"""
    t = sched.check_timestep(t)
    return _gather(np.log(sched.betas) - sched.log_beta_tildes_clipped, t, like)


def _diag_kl(mean1, var1, mean2, var2) -> np.ndarray:
    return 0.5 * (np.log(var2 / var1) + (var1 + (mean1 - mean2) ** 2) / var2 - 1.0)


def gaussian_kl(mean1, var1, mean2, var2) -> np.ndarray:
    """
    KL(N(mean1, var1) || N(mean2, var2)) for diagonal Gaussians, in nats

    Sums over the last axis; a batch of (n, d) parameters gives (n,) values.
    """
    mean1, var1, mean2, var2 = (np.atleast_1d(np.asarray(a, dtype=np.float64))
                                for a in (mean1, var1, mean2, var2))
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise ValueError("gaussian_kl needs strictly positive variances")
    return _diag_kl(mean1, var1, mean2, var2).sum(axis=-1)


def gaussian_log_density(x, mean, var) -> np.ndarray:
    """log N(x; mean, diag(var)), summed over the last axis"""
    x, mean, var = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (x, mean, var))
    return (-0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)).sum(axis=-1)


def vlb_terms(x0: np.ndarray, xt: np.ndarray, t: TimestepLike,
              model_mean: np.ndarray, model_var: np.ndarray,
              sched: NoiseSchedule) -> np.ndarray:
    """
    Variational bound term for the reverse step out of x_t, in nats

    t = 1 gives the decoder term L_0 = -log N(x_0; model_mean, model_var).
    2 <= t <= T gives L_{t-1} = KL(q(x_{t-1} | x_t, x_0) || N(model_mean, model_var)).
    The prior term L_T is prior_kl(). Callers indexing the bound by term,
    L_k for k in 0..T-1, pass t = k + 1 here.

    Args:
        x0: clean points
        xt: noised points at timestep t
        t: timestep of xt, scalar or per sample
        model_mean: mean of p(x_{t-1} | x_t)
        model_var: per-dimension variance of p(x_{t-1} | x_t)
        sched: noise schedule

    Returns:
        Per-sample term summed over dimensions
    """
    x0 = np.asarray(x0, dtype=np.float64)
    model_mean = np.asarray(model_mean, dtype=np.float64)
    model_var = np.asarray(model_var, dtype=np.float64)
    if np.any(model_var <= 0):
        raise ValueError("model variance must be strictly positive")
    t = sched.check_timestep(t)

    true = q_posterior(x0, xt, t, sched)
    first = _per_sample(t == 1, x0)
    # t = 1 has a zero-variance posterior; substitute 1 so the unused branch stays finite
    safe_var = np.where(first, 1.0, true.variance)
    kl = _diag_kl(true.mean, safe_var, model_mean, model_var).sum(axis=-1)
    decoder_nll = -gaussian_log_density(x0, model_mean, model_var)
    return np.where(t == 1, decoder_nll, kl)


def vlb_log_variance_grad(x0: np.ndarray, xt: np.ndarray, t: TimestepLike,
                          model_mean: np.ndarray, model_var: np.ndarray,
                          sched: NoiseSchedule) -> np.ndarray:
    """Per-dimension derivative of vlb_terms with respect to log(model_var)"""
    x0 = np.asarray(x0, dtype=np.float64)
    t = sched.check_timestep(t)
    true = q_posterior(x0, xt, t, sched)
    first = _per_sample(t == 1, x0)
    kl_grad = 0.5 * (1.0 - (true.variance + (true.mean - model_mean) ** 2) / model_var)
    nll_grad = 0.5 * (1.0 - (x0 - model_mean) ** 2 / model_var)
    return np.where(first, nll_grad, kl_grad)


def prior_kl(x0: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """L_T = KL(q(x_T | x_0) || N(0, I)) per sample"""
    x0 = np.asarray(x0, dtype=np.float64)
    alpha_bar = sched.alpha_bars[-1]
    mean = math.sqrt(alpha_bar) * x0
    var = np.full_like(x0, 1.0 - alpha_bar)
    return gaussian_kl(mean, var, np.zeros_like(x0), np.ones_like(x0))
