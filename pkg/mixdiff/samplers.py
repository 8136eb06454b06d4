"""
Reverse-process samplers

Ancestral and DDIM sampling, their classifier-guided variants, temperature
rescaling, reverse-ODE encoding/decoding and latent interpolation. Models
and classifiers are always called with timesteps of the chain they were
trained on, so respaced sampling needs no model changes.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .classifiers import scale_gradient
from .process import mu_from_eps, sigma_from_v
from .schedules import NoiseSchedule, apply_respacing, respace, uniform_timesteps

logger = logging.getLogger(__name__)

SAMPLER_KINDS = ("ancestral", "ddim")
TEMPERATURE_MODES = ("none", "noise-scale", "eps-scale")
VARIANCE_MODES = ("learned-v", "fixed-beta", "fixed-beta-tilde")
CHAIN_BLOCK_SIZE = 256


@dataclass(frozen=True)
class SamplerConfig:
    """
    Everything that determines a sampling run besides the models

    Attributes:
        kind: 'ancestral' or 'ddim' (eta = 0)
        guidance_scale: classifier gradient scale s >= 0
        temperature_mode: 'none', 'noise-scale' or 'eps-scale'
        tau: temperature; ignored when temperature_mode is 'none'
        respacing: {kind: uniform, count: N} or {kind: segments, counts: [...]}
        seed: non-negative integer seeding the per-chain noise streams
        variance_mode: 'learned-v', 'fixed-beta' or 'fixed-beta-tilde';
            DDIM ignores it
        allow_experimental: permit guidance combined with temperature
        record_trajectory: keep every intermediate state
    """
    kind: str = "ancestral"
    guidance_scale: float = 0.0
    temperature_mode: str = "none"
    tau: float = 1.0
    respacing: Optional[Dict] = None
    seed: int = 0
    variance_mode: str = "fixed-beta-tilde"
    allow_experimental: bool = False
    record_trajectory: bool = False

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"Unknown sampler kind: {self.kind}. Use 'ancestral' or 'ddim'")
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise ValueError(f"Unknown temperature mode: {self.temperature_mode}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"Unknown variance mode: {self.variance_mode}")
        if not self.guidance_scale >= 0:
            raise ValueError(f"guidance scale must be non-negative, got {self.guidance_scale}")
        if self.temperature_mode == "eps-scale" and not self.tau > 0:
            raise ValueError(f"eps-scale temperature needs tau > 0, got {self.tau}")
        if self.temperature_mode == "noise-scale" and not self.tau >= 0:
            raise ValueError(f"noise-scale temperature needs tau >= 0, got {self.tau}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        if (self.guidance_scale > 0 and self.temperature_mode != "none"
                and not self.allow_experimental):
            raise ValueError("guidance combined with temperature is experimental; "
                             "set allow_experimental to enable it")

    @property
    def guided(self) -> bool:
        return self.guidance_scale > 0


def resolve_temperature_mode(modes: Optional[Sequence[str]]) -> str:
    """Collapse repeated temperature flags into a single mode"""
    chosen = sorted({m for m in (modes or []) if m != "none"})
    if len(chosen) > 1:
        raise ValueError(f"only one temperature mode may be set, got {', '.join(chosen)}")
    return chosen[0] if chosen else "none"


def apply_temperature(config: SamplerConfig, value: np.ndarray, kind: str) -> np.ndarray:
    """
    Rescale transition noise (kind='noise') or the eps prediction (kind='eps')

    noise-scale multiplies the noise by tau; eps-scale divides eps by tau.
    Each mode touches only its own quantity.
    """
    if kind not in ("noise", "eps"):
        raise ValueError(f"Unknown temperature target: {kind}")
    if config.temperature_mode == "noise-scale" and kind == "noise":
        return value * config.tau
    if config.temperature_mode == "eps-scale" and kind == "eps":
        return value / config.tau
    return value


class ChainStreams:
    """
    Seeded noise for n chains

    Chains are grouped in fixed blocks of 256; block b draws from
    default_rng([seed, b]) at full block size, so the noise a chain sees
    depends only on (seed, chain index).
    """

    def __init__(self, seed: int, n: int, block_size: int = CHAIN_BLOCK_SIZE):
        self.n = n
        self.block_size = block_size
        num_blocks = -(-n // block_size)
        self.generators = [np.random.default_rng([seed, b]) for b in range(num_blocks)]

    def standard_normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape[0] != self.n:
            raise ValueError(f"streams serve {self.n} chains, asked for {shape[0]}")
        if not self.generators:
            return np.zeros(shape)
        blocks = [g.standard_normal((self.block_size,) + shape[1:]) for g in self.generators]
        return np.concatenate(blocks)[:self.n]


@dataclass
class Trajectory:
    """States from x_K down to x_0; timesteps[i] is the chain step of states[i]"""
    states: np.ndarray
    timesteps: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class SampleResult:
    samples: np.ndarray
    labels: Optional[np.ndarray] = None
    trajectory: Optional[Trajectory] = None
    schedule: Optional[NoiseSchedule] = None


def _model_eps(model, xt, t: int, config: SamplerConfig, sched: NoiseSchedule, y):
    out = model(xt, sched.model_timesteps(t), y if model.conditional else None)
    return out, apply_temperature(config, np.asarray(out.eps), "eps")


def step_variance(out, t: int, config: SamplerConfig, sched: NoiseSchedule,
                  like: np.ndarray) -> np.ndarray:
    """Per-dimension reverse variance for chain step t under config.variance_mode"""
    if config.variance_mode == "learned-v":
        if out.v is None:
            raise ValueError("variance mode 'learned-v' needs a model with a variance head")
        return sigma_from_v(out.v, t, sched)
    values = sched.betas if config.variance_mode == "fixed-beta" else sched.beta_tildes
    return np.full(np.shape(like), values[t - 1])


def guided_mean(mean: np.ndarray, variance: np.ndarray, grad: np.ndarray, s: float) -> np.ndarray:
    """Shift the reverse mean by s * Sigma * grad log p(y | x_t)"""
    return mean + variance * scale_gradient(grad, s)


def guided_eps(eps: np.ndarray, grad: np.ndarray, alpha_bar: float, s: float) -> np.ndarray:
    """eps_hat = eps - sqrt(1 - ab_t) * s * grad log p(y | x_t)"""
    return eps - math.sqrt(1.0 - alpha_bar) * scale_gradient(grad, s)


def ancestral_step(model, xt: np.ndarray, t: int, rng, config: SamplerConfig,
                   sched: NoiseSchedule, y=None) -> np.ndarray:
    """
    Draw x_{t-1} ~ N(mu(x_t), Sigma)

    The noise draw happens on every step, including t = 1 where the mean
    is returned, so chains stay aligned with their streams.
    """
    return guided_ancestral_step(model, None, y, xt, t, rng,
                                 _unguided(config), sched)


def guided_ancestral_step(model, classifier, y, xt: np.ndarray, t: int, rng,
                          config: SamplerConfig, sched: NoiseSchedule) -> np.ndarray:
    """Draw x_{t-1} ~ N(mu + s Sigma g, Sigma) with g = grad log p(y | x_t)"""
    if config.guidance_scale < 0:
        raise ValueError(f"guidance scale must be non-negative, got {config.guidance_scale}")
    out, eps = _model_eps(model, xt, t, config, sched, y)
    mean = mu_from_eps(xt, t, eps, sched)
    variance = step_variance(out, t, config, sched, xt)
    if config.guided:
        if classifier is None or y is None:
            raise ValueError("guided sampling needs a classifier and a class label")
        grad = classifier.grad_log_prob(xt, sched.model_timesteps(t), y)
        mean = guided_mean(mean, variance, grad, config.guidance_scale)

    noise = apply_temperature(config, rng.standard_normal(np.shape(xt)), "noise")
    if t == 1:
        return mean
    return mean + np.sqrt(variance) * noise


def _ddim_transition(xt: np.ndarray, eps: np.ndarray, alpha_bar: float,
                     alpha_bar_next: float) -> np.ndarray:
    x0 = (xt - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)
    return math.sqrt(alpha_bar_next) * x0 + math.sqrt(1.0 - alpha_bar_next) * eps


def ddim_step(model, xt: np.ndarray, t: int, t_prev: int, config: SamplerConfig,
              sched: NoiseSchedule, y=None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from chain step t to t_prev < t"""
    return guided_ddim_step(model, None, y, xt, t, t_prev, _unguided(config), sched)


def guided_ddim_step(model, classifier, y, xt: np.ndarray, t: int, t_prev: int,
                     config: SamplerConfig, sched: NoiseSchedule) -> np.ndarray:
    if not 0 <= t_prev < t:
        raise ValueError(f"DDIM needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if config.guidance_scale < 0:
        raise ValueError(f"guidance scale must be non-negative, got {config.guidance_scale}")
    _, eps = _model_eps(model, xt, t, config, sched, y)
    alpha_bar = float(sched.alpha_bar_at(t))
    if config.guided:
        if classifier is None or y is None:
            raise ValueError("guided sampling needs a classifier and a class label")
        grad = classifier.grad_log_prob(xt, sched.model_timesteps(t), y)
        eps = guided_eps(eps, grad, alpha_bar, config.guidance_scale)
    return _ddim_transition(xt, eps, alpha_bar, float(sched.alpha_bar_at(t_prev)))


def _unguided(config: SamplerConfig) -> SamplerConfig:
    if not config.guided:
        return config
    return replace(config, guidance_scale=0.0)


def sample(model, sched: NoiseSchedule, config: SamplerConfig, n: int,
           classifier=None, y=None) -> SampleResult:
    """
    Run n reverse chains from x_K ~ N(0, I) down to x_0

    Args:
        model: denoiser called as model(x_t, t, y) on the base chain's timesteps
        sched: base schedule the model was trained on; respaced per config
        config: sampler settings
        n: number of chains
        classifier: noisy classifier, required when config.guidance_scale > 0
        y: class per chain (scalar or shape (n,)), required when guided or
            when the model is conditional

    Returns:
        SampleResult with samples of shape (n, d)
    """
    if n < 0:
        raise ValueError(f"number of samples must be >= 0, got {n}")
    if config.guided and (classifier is None or y is None):
        raise ValueError("guided sampling needs a classifier and a class label")
    chain = apply_respacing(sched, config.respacing)
    labels = None
    if y is not None:
        labels = np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (n,)).copy()

    streams = ChainStreams(config.seed, n)
    x = streams.standard_normal((n, model.data_dim))
    states: List[np.ndarray] = [x] if config.record_trajectory else []
    if n == 0:
        return SampleResult(samples=x, labels=labels, schedule=chain)

    logger.debug(f"Sampling {n} chains: {config.kind}, {chain.num_steps} steps, s={config.guidance_scale}")
    for t in range(chain.num_steps, 0, -1):
        if config.kind == "ddim":
            x = guided_ddim_step(model, classifier, labels, x, t, t - 1, config, chain)
        else:
            x = guided_ancestral_step(model, classifier, labels, x, t, streams, config, chain)
        if config.record_trajectory:
            states.append(x)

    trajectory = None
    if config.record_trajectory:
        trajectory = Trajectory(states=np.stack(states),
                                timesteps=np.arange(chain.num_steps, -1, -1))
    return SampleResult(samples=x, labels=labels, trajectory=trajectory, schedule=chain)


def _encoding_chain(sched: NoiseSchedule, num_steps: Optional[int]) -> NoiseSchedule:
    if num_steps is None or num_steps == sched.num_steps:
        return sched
    return respace(sched, uniform_timesteps(sched.num_steps, num_steps))


def ddim_encode(model, x0: np.ndarray, sched: NoiseSchedule,
                num_steps: Optional[int] = None, y=None) -> np.ndarray:
    """
    Run the DDIM ODE forward to obtain a latent

    The data point is taken as the state at step 1 of a chain of
    `num_steps` uniformly respaced steps, and K - 1 transitions carry it to
    step K:
    x_{t+1} = sqrt(ab_{t+1}) x0_pred(x_t) + sqrt(1 - ab_{t+1}) eps(x_t).

    Args:
        model: denoiser on the base chain
        x0: points, shape (n, d)
        sched: base schedule
        num_steps: chain length K; defaults to the full chain

    Returns:
        Latents at step K
    """
    chain = _encoding_chain(sched, num_steps)
    x = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("points to encode must be finite")
    for t in range(1, chain.num_steps):
        out = model(x, chain.model_timesteps(t), y if model.conditional else None)
        x = _ddim_transition(x, np.asarray(out.eps), float(chain.alpha_bar_at(t)),
                             float(chain.alpha_bar_at(t + 1)))
    return x


def ddim_decode(model, latent: np.ndarray, sched: NoiseSchedule,
                num_steps: Optional[int] = None, y=None) -> np.ndarray:
    """Deterministic DDIM from step K of the encoding chain down to step 0"""
    chain = _encoding_chain(sched, num_steps)
    config = SamplerConfig(kind="ddim")
    x = np.asarray(latent, dtype=np.float64)
    for t in range(chain.num_steps, 0, -1):
        x = ddim_step(model, x, t, t - 1, config, chain, y)
    return x


def latent_interpolate(z0: np.ndarray, z1: np.ndarray, theta: float) -> np.ndarray:
    """cos(theta) z0 + sin(theta) z1"""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"latents must have equal shapes, got {z0.shape} and {z1.shape}")
    return math.cos(theta) * z0 + math.sin(theta) * z1
