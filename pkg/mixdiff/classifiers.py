"""
Noisy classifiers p(y | x_t, t): the exact posterior of a noised mixture and
a trainable MLP classifier sharing the denoiser trunk
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .mixture import GaussianMixture, _as_batch
from .models import MlpNetwork, MlpSpec
from .schedules import NoiseSchedule, TimestepLike

logger = logging.getLogger(__name__)


@dataclass
class NoisyClassifierOutput:
    """Class log-probabilities and grad_x log p(y | x_t) for the queried class"""
    log_probs: np.ndarray
    grad_log_prob_selected: Optional[np.ndarray] = None


def _labels(y, n: int, num_classes: int) -> np.ndarray:
    labels = np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (n,))
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class label out of range [0, {num_classes})")
    return labels


def analytic_class_posterior(mix: GaussianMixture, xt: np.ndarray, t: TimestepLike,
                             sched: NoiseSchedule, y=None) -> NoisyClassifierOutput:
    """
    Exact Bayes posterior over classes under the noised mixture

    p(y | x_t) is proportional to pi_y N(x_t; sqrt(ab_t) mu_y, ab_t sigma_y^2 + 1 - ab_t).
    Its input gradient is score_y(x_t) - sum_k p(k | x_t) score_k(x_t), which
    is the class-conditional score minus the marginal score.

    Args:
        mix: data mixture
        xt: points, shape (d,) or (n, d)
        t: timesteps of `sched`, scalar or per point (t = 0 is the clean data)
        sched: schedule the timesteps refer to
        y: class to differentiate; the gradient is omitted when None

    Returns:
        NoisyClassifierOutput with log_probs of shape (K,) or (n, K)
    """
    batch, squeeze = _as_batch(xt)
    alpha_bar = sched.alpha_bar_at(t)
    log_probs = mix.class_log_posterior(batch, alpha_bar)
    grad = None
    if y is not None:
        labels = _labels(y, len(batch), mix.num_classes)
        grad = mix.score(batch, alpha_bar, labels) - mix.score(batch, alpha_bar)
        if squeeze:
            grad = grad[0]
    return NoisyClassifierOutput(log_probs=log_probs[0] if squeeze else log_probs,
                                 grad_log_prob_selected=grad)


class AnalyticClassifier:
    """Oracle classifier for a known mixture, indexed by timesteps of `schedule`"""

    def __init__(self, mixture: GaussianMixture, schedule: NoiseSchedule):
        self.mixture = mixture
        self.schedule = schedule
        self.num_classes = mixture.num_classes

    def log_probs(self, xt: np.ndarray, t: TimestepLike) -> np.ndarray:
        return analytic_class_posterior(self.mixture, xt, t, self.schedule).log_probs

    def grad_log_prob(self, xt: np.ndarray, t: TimestepLike, y) -> np.ndarray:
        return analytic_class_posterior(self.mixture, xt, t, self.schedule, y).grad_log_prob_selected


class MlpClassifier(MlpNetwork):
    """Timestep-modulated MLP trunk with a K-way log-softmax head"""

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def log_probs(self, xt: np.ndarray, t: TimestepLike) -> np.ndarray:
        logits, cache = self.forward(xt, t)
        out = log_softmax(logits, axis=1)
        return out[0] if cache.squeeze else out

    def grad_log_prob(self, xt: np.ndarray, t: TimestepLike, y) -> np.ndarray:
        """grad_x log p(y | x_t) through the reverse-mode pass"""
        logits, cache = self.forward(xt, t)
        labels = _labels(y, len(logits), self.num_classes)
        upstream = -softmax(logits, axis=1)
        upstream[np.arange(len(labels)), labels] += 1.0
        _, grad_x = self.backward(cache, upstream)
        return grad_x

    def __call__(self, xt: np.ndarray, t: TimestepLike, y=None) -> NoisyClassifierOutput:
        grad = self.grad_log_prob(xt, t, y) if y is not None else None
        return NoisyClassifierOutput(log_probs=self.log_probs(xt, t), grad_log_prob_selected=grad)


def classifier_spec(data_dim: int, num_classes: int, hidden_widths=(128, 128, 128),
                    embedding_dim: int = 64, group_size: int = 32) -> MlpSpec:
    return MlpSpec(kind="classifier", data_dim=data_dim, hidden_widths=tuple(hidden_widths),
                   embedding_dim=embedding_dim, group_size=group_size,
                   num_classes=num_classes, learn_variance=False)


def mlp_classifier_forward(model: MlpClassifier, xt: np.ndarray, t: TimestepLike) -> np.ndarray:
    return model.log_probs(xt, t)


def grad_log_prob(model, xt: np.ndarray, t: TimestepLike, y) -> np.ndarray:
    return model.grad_log_prob(xt, t, y)


def scale_gradient(g: np.ndarray, s: float) -> np.ndarray:
    """Guidance scale: s * grad log p(y|x) = grad log p(y|x)^s"""
    if s < 0:
        raise ValueError(f"guidance scale must be non-negative, got {s}")
    return s * np.asarray(g, dtype=np.float64)
