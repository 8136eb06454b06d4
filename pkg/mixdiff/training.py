"""
Training objectives, optimizer and training loops

Per iteration the rng draw order is fixed: the data batch (labels, then
points), then the timesteps t ~ U{1..T}, then the noise eps ~ N(0, I).
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from .classifiers import MlpClassifier
from .mixture import GaussianMixture
from .models import MlpDenoiser, MlpSpec
from .process import (log_variance_from_v, log_variance_span, mu_from_eps, prior_kl,
                      q_sample, sigma_from_v, vlb_log_variance_grad, vlb_terms)
from .schedules import NoiseSchedule

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite"""

    def __init__(self, iteration: int, last_finite_loss: Optional[float]):
        self.iteration = iteration
        self.last_finite_loss = last_finite_loss
        super().__init__(f"loss became non-finite at iteration {iteration} "
                         f"(last finite loss: {last_finite_loss})")


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings shared by the diffusion and classifier loops

    weight_decay is decoupled (AdamW-style) and meant for classifiers.
    lambda_vlb weights the bound term of the hybrid objective and only
    applies to denoisers with a variance head.
    """
    batch_size: int = 256
    iterations: int = 20000
    learning_rate: float = 1e-3
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_rate: float = 0.999
    lambda_vlb: float = 0.001
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.ema_rate < 1:
            raise ValueError(f"ema rate must lie in [0, 1), got {self.ema_rate}")
        if self.batch_size < 1 or self.iterations < 0 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1 and iterations >= 0")
        if self.lambda_vlb < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("lambda_vlb and weight_decay must be >= 0, adam_eps > 0")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ValueError(f"adam betas must be two values in [0, 1), got {self.adam_betas}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass
class LossResult:
    """A loss value, its components, and parameter gradients for MLP models"""
    loss: float
    simple: float
    vlb: float = 0.0
    accuracy: Optional[float] = None
    grads: Optional[Params] = None


def _draw_noising(x0: np.ndarray, rng: np.random.Generator, sched: NoiseSchedule):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or len(x0) == 0:
        raise ValueError(f"loss needs a non-empty (n, d) batch, got shape {x0.shape}")
    t = rng.integers(1, sched.num_steps + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    return x0, t, eps, q_sample(x0, t, eps, sched)


def _evaluate(model, xt, t, y):
    """Model output plus the forward cache when the model is trainable"""
    if isinstance(model, MlpDenoiser):
        raw, cache = model.forward(xt, t, y if model.conditional else None)
        return model.split_outputs(raw, False), cache
    return model(xt, t, y if model.conditional else None), None


def simple_loss(model, x0: np.ndarray, rng: np.random.Generator, sched: NoiseSchedule,
                y=None) -> LossResult:
    """
    L_simple = batch mean of ||eps - eps_theta(x_t, t)||^2 (summed over dimensions)

    Gradients are returned for MlpDenoiser models; analytic models give
    the loss alone.
    """
    x0, t, eps, xt = _draw_noising(x0, rng, sched)
    out, cache = _evaluate(model, xt, t, y)
    diff = out.eps - eps
    loss = float(np.mean(np.sum(diff ** 2, axis=1)))
    grads = None
    if cache is not None:
        grad_eps = 2.0 * diff / len(diff)
        grads, _ = model.backward(cache, model.output_gradient(grad_eps, None, len(xt)))
    return LossResult(loss=loss, simple=loss, grads=grads)


def hybrid_loss(model, x0: np.ndarray, rng: np.random.Generator, sched: NoiseSchedule,
                lambda_vlb: float, y=None) -> LossResult:
    """
    L_simple + lambda * T * L_{t-1} at the sampled timesteps

    The bound term sees the model mean as a constant, so only the variance
    head receives its gradient; eps is trained by L_simple alone.
    """
    if not getattr(model, "learns_variance", False):
        raise ValueError("hybrid loss needs a model with a variance head")
    if lambda_vlb < 0:
        raise ValueError(f"lambda must be non-negative, got {lambda_vlb}")
    x0, t, eps, xt = _draw_noising(x0, rng, sched)
    out, cache = _evaluate(model, xt, t, y)
    diff = out.eps - eps
    simple = float(np.mean(np.sum(diff ** 2, axis=1)))

    frozen_mean = mu_from_eps(xt, t, out.eps, sched)
    model_var = np.exp(log_variance_from_v(out.v, t, sched))
    terms = vlb_terms(x0, xt, t, frozen_mean, model_var, sched)
    n = len(x0)
    vlb = float(sched.num_steps * np.mean(terms))
    loss = simple + lambda_vlb * vlb

    grads = None
    if cache is not None:
        grad_eps = 2.0 * diff / n
        grad_log_var = vlb_log_variance_grad(x0, xt, t, frozen_mean, model_var, sched)
        grad_v = (lambda_vlb * sched.num_steps / n) * grad_log_var * log_variance_span(t, sched, xt)
        grads, _ = model.backward(cache, model.output_gradient(grad_eps, grad_v, n))
    return LossResult(loss=loss, simple=simple, vlb=vlb, grads=grads)


def classifier_loss(model: MlpClassifier, x0: np.ndarray, y: np.ndarray,
                    rng: np.random.Generator, sched: NoiseSchedule) -> LossResult:
    """Cross-entropy of p(y | x_t, t) on noised points, with accuracy"""
    x0, t, _, xt = _draw_noising(x0, rng, sched)
    labels = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(labels) != len(x0):
        raise ValueError("one label per point is required")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"class label out of range [0, {model.num_classes})")
    logits, cache = model.forward(xt, t)
    rows = np.arange(len(labels))
    loss = float(-np.mean(log_softmax(logits, axis=1)[rows, labels]))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    upstream = softmax(logits, axis=1)
    upstream[rows, labels] -= 1.0
    grads, _ = model.backward(cache, upstream / len(labels))
    return LossResult(loss=loss, simple=loss, accuracy=accuracy, grads=grads)


@dataclass
class AdamState:
    step: int = 0
    m: Params = field(default_factory=OrderedDict)
    v: Params = field(default_factory=OrderedDict)

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(step=0,
                   m=OrderedDict((k, np.zeros_like(p)) for k, p in params.items()),
                   v=OrderedDict((k, np.zeros_like(p)) for k, p in params.items()))


def adam_step(params: Params, grads: Params, state: AdamState,
              config: TrainConfig) -> Tuple[Params, AdamState]:
    """
    One bias-corrected Adam update with optional decoupled weight decay

    Returns:
        New parameters and optimizer state; inputs are left untouched
    """
    beta1, beta2 = config.adam_betas
    step = state.step + 1
    new_params, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        update = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        if config.weight_decay:
            update = update + config.learning_rate * config.weight_decay * p
        new_params[name] = p - update
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


def ema_update(ema_params: Params, params: Params, rate: float) -> Params:
    """ema <- rate * ema + (1 - rate) * params"""
    if not 0 <= rate < 1:
        raise ValueError(f"ema rate must lie in [0, 1), got {rate}")
    return OrderedDict((name, rate * ema_params[name] + (1.0 - rate) * p)
                       for name, p in params.items())


class PointStream:
    """
    Labeled training batches: fresh draws from a mixture, or resampling
    of a fixed point set when one is given
    """

    def __init__(self, mixture: Optional[GaussianMixture] = None,
                 points: Optional[np.ndarray] = None, labels: Optional[np.ndarray] = None):
        if mixture is None and points is None:
            raise ValueError("a mixture or a point set is required")
        self.mixture = mixture
        self.points = None if points is None else np.asarray(points, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)

    def draw(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if self.points is None:
            return self.mixture.sample(n, rng)
        idx = rng.integers(0, len(self.points), size=n)
        return self.points[idx], None if self.labels is None else self.labels[idx]


@dataclass
class TrainResult:
    """EMA model, raw model and the per-iteration loss log"""
    model: object
    raw_model: object
    loss_log: pd.DataFrame
    steps: int


def _check_finite(result: LossResult, iteration: int, last: Optional[float]):
    if not np.isfinite(result.loss) or any(not np.all(np.isfinite(g)) for g in result.grads.values()):
        logger.error(f"Training diverged at iteration {iteration}")
        raise TrainingDivergedError(iteration, last)


def train_diffusion(stream: PointStream, spec: MlpSpec, sched: NoiseSchedule,
                    config: TrainConfig, model_seed: int = 0,
                    rng: Optional[np.random.Generator] = None) -> TrainResult:
    """
    Train an MLP denoiser

    Uses the hybrid objective when the architecture has a variance head and
    L_simple otherwise. Conditional models are fed the batch labels.

    Args:
        stream: source of labeled batches
        spec: denoiser architecture
        sched: training schedule
        config: optimization settings
        model_seed: parameter initialization seed
        rng: batch and noise generator; defaults to default_rng(config.seed)

    Returns:
        TrainResult whose `model` carries the EMA weights

    Raises:
        TrainingDivergedError: if a loss or gradient is not finite
    """
    if spec.kind != "denoiser":
        raise ValueError(f"train_diffusion needs a denoiser spec, got kind {spec.kind}")
    model = MlpDenoiser(spec, seed=model_seed)
    ema = OrderedDict((k, p.copy()) for k, p in model.params.items())
    state = AdamState.zeros_like(model.params)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    hybrid = spec.learn_variance
    rows = []
    last = None

    logger.info(f"Training denoiser: {model.num_parameters()} parameters, "
                f"{config.iterations} iterations, {'hybrid' if hybrid else 'simple'} objective")
    for it in range(1, config.iterations + 1):
        x0, labels = stream.draw(config.batch_size, rng)
        if spec.conditional and labels is None:
            raise ValueError("conditional training needs labeled points")
        y = labels if spec.conditional else None
        if hybrid:
            result = hybrid_loss(model, x0, rng, sched, config.lambda_vlb, y)
        else:
            result = simple_loss(model, x0, rng, sched, y)
        _check_finite(result, it, last)
        last = result.loss

        model.params, state = adam_step(model.params, result.grads, state, config)
        ema = ema_update(ema, model.params, config.ema_rate)
        rows.append((it, result.simple, result.vlb, result.loss))
        if it % config.log_every == 0 or it == config.iterations:
            logger.info(f"Iteration {it}/{config.iterations}: L_simple={result.simple:.5f} "
                        f"L_vlb={result.vlb:.5f} total={result.loss:.5f}")

    log = pd.DataFrame(rows, columns=["iteration", "L_simple", "L_vlb", "total"])
    return TrainResult(model=MlpDenoiser(spec, ema), raw_model=model, loss_log=log,
                       steps=config.iterations)


def train_classifier(stream: PointStream, spec: MlpSpec, sched: NoiseSchedule,
                     config: TrainConfig, model_seed: int = 0,
                     rng: Optional[np.random.Generator] = None) -> TrainResult:
    """Train a noisy classifier with cross-entropy over t ~ U{1..T}"""
    if spec.kind != "classifier":
        raise ValueError(f"train_classifier needs a classifier spec, got kind {spec.kind}")
    model = MlpClassifier(spec, seed=model_seed)
    ema = OrderedDict((k, p.copy()) for k, p in model.params.items())
    state = AdamState.zeros_like(model.params)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    rows = []
    last = None

    logger.info(f"Training classifier: {model.num_parameters()} parameters, "
                f"{config.iterations} iterations")
    for it in range(1, config.iterations + 1):
        x0, labels = stream.draw(config.batch_size, rng)
        if labels is None:
            raise ValueError("classifier training needs labeled points")
        result = classifier_loss(model, x0, labels, rng, sched)
        _check_finite(result, it, last)
        last = result.loss

        model.params, state = adam_step(model.params, result.grads, state, config)
        ema = ema_update(ema, model.params, config.ema_rate)
        rows.append((it, result.loss, result.accuracy))
        if it % config.log_every == 0 or it == config.iterations:
            logger.info(f"Iteration {it}/{config.iterations}: loss={result.loss:.5f} "
                        f"accuracy={result.accuracy:.3f}")

    log = pd.DataFrame(rows, columns=["iteration", "loss", "accuracy"])
    return TrainResult(model=MlpClassifier(spec, ema), raw_model=model, loss_log=log,
                       steps=config.iterations)


def evaluate_vlb(model, x0: np.ndarray, sched: NoiseSchedule, rng: np.random.Generator,
                 y=None) -> np.ndarray:
    """
    Full variational bound L_0 + ... + L_T per point, in nats

    Models without a variance head use the fixed beta_t variance, which is
    positive at every step.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    total = prior_kl(x0, sched)
    for t in range(1, sched.num_steps + 1):
        steps = np.full(len(x0), t)
        eps = rng.standard_normal(x0.shape)
        xt = q_sample(x0, steps, eps, sched)
        out = model(xt, steps, y if model.conditional else None)
        mean = mu_from_eps(xt, steps, out.eps, sched)
        if getattr(model, "learns_variance", False):
            var = sigma_from_v(out.v, steps, sched)
        else:
            var = np.full_like(x0, sched.betas[t - 1])
        total = total + vlb_terms(x0, xt, steps, mean, var, sched)
    return total
