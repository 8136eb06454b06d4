"""
Labeled Gaussian-mixture datasets and their closed-form noised densities
Every noised marginal q_t(x) stays a mixture, so densities, scores and
class posteriors are exact
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .schedules import NoiseSchedule, TimestepLike

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Promote a single point (d,) to (1, d); report whether to squeeze back"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"points must have shape (d,) or (n, d), got {x.shape}")
    return x, False


def _per_point(alpha_bar, n: int) -> np.ndarray:
    """alpha_bar as an (n, 1, 1) array broadcasting over (n, K, d)"""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    return np.broadcast_to(alpha_bar.reshape(-1), (n,)).reshape(n, 1, 1)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """
    Mixture with one labeled diagonal-Gaussian component per class

    Attributes:
        weights: class priors pi, shape (K,)
        means: component means, shape (K, d)
        variances: per-dimension component variances, shape (K, d)
    """
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        means = np.array(self.means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        variances = np.array(self.variances, dtype=np.float64)
        if variances.ndim <= 1:
            num_components, dim = means.shape
            if variances.size in (1, num_components):
                variances = np.broadcast_to(variances.reshape(-1, 1), means.shape).copy()
            elif num_components == 1 and variances.size == dim:
                # one component: a flat list holds its per-dimension variances
                variances = variances.reshape(1, dim)
            else:
                raise ValueError(f"flat variances must give one value per component ({num_components}) "
                                 f"or, for a single component, one per dimension ({dim}); "
                                 f"got {variances.size}")

        if len(weights) != means.shape[0] or variances.shape != means.shape:
            raise ValueError(f"inconsistent mixture shapes: weights {weights.shape}, "
                             f"means {means.shape}, variances {variances.shape}")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must be positive and sum to 1, got {weights}")
        if np.any(variances <= 0) or not np.all(np.isfinite(means)):
            raise ValueError("mixture variances must be positive and means finite")

        for name, arr in (("weights", weights), ("means", means), ("variances", variances)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_classes(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def noised(self, alpha_bar, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Component means/variances of q_t: sqrt(ab) mu_k and ab sigma_k^2 + (1 - ab)"""
        ab = _per_point(alpha_bar, n)
        return np.sqrt(ab) * self.means[None], ab * self.variances[None] + (1.0 - ab)

    def joint_log_densities(self, x: np.ndarray, alpha_bar=1.0) -> np.ndarray:
        """log pi_k + log N(x; noised component k), shape (n, K)"""
        x, _ = _as_batch(x)
        means, variances = self.noised(alpha_bar, len(x))
        diff = x[:, None, :] - means
        log_norm = -0.5 * (LOG_2PI + np.log(variances) + diff ** 2 / variances).sum(axis=-1)
        return np.log(self.weights)[None, :] + log_norm

    def log_density(self, x: np.ndarray, alpha_bar=1.0) -> np.ndarray:
        x, squeeze = _as_batch(x)
        out = logsumexp(self.joint_log_densities(x, alpha_bar), axis=1)
        return out[0] if squeeze else out

    def class_log_posterior(self, x: np.ndarray, alpha_bar=1.0) -> np.ndarray:
        """Exact log p(y | x) under the noised mixture, shape (n, K)"""
        joint = self.joint_log_densities(x, alpha_bar)
        return joint - logsumexp(joint, axis=1, keepdims=True)

    def score(self, x: np.ndarray, alpha_bar=1.0, y: Optional[np.ndarray] = None) -> np.ndarray:
        """
        grad_x log q_t(x), or grad_x log q_t(x | y) when y is given

        The mixture score is the responsibility-weighted sum of the
        component scores -(x - m_k) / v_k.
        """
        x, squeeze = _as_batch(x)
        means, variances = self.noised(alpha_bar, len(x))
        component_scores = -(x[:, None, :] - means) / variances
        if y is None:
            joint = self.joint_log_densities(x, alpha_bar)
            resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
            out = (resp[:, :, None] * component_scores).sum(axis=1)
        else:
            y = np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (len(x),))
            out = component_scores[np.arange(len(x)), y]
        return out[0] if squeeze else out

    def sample(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """
        Draw labeled points

        Draw order is fixed: labels first, then one (n, d) block of normals.
        """
        labels = rng.choice(self.num_classes, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        points = self.means[labels] + np.sqrt(self.variances[labels]) * noise
        return points, labels

    def describe(self) -> Dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


def benchmark_mixture() -> GaussianMixture:
    """Four 2-D components at (+-2, +-2), variance 0.3, uniform weights"""
    means = np.array([[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]])
    return GaussianMixture(weights=np.full(4, 0.25), means=means, variances=np.full(4, 0.3))


MIXTURE_PRESETS = {
    "benchmark": benchmark_mixture,
}


def mixture_from_spec(spec: Dict) -> GaussianMixture:
    """Build a mixture from {preset: name} or explicit weights/means/variances"""
    preset = spec.get("preset")
    if preset is not None:
        if preset not in MIXTURE_PRESETS:
            raise ValueError(f"Unknown dataset preset: {preset}")
        return MIXTURE_PRESETS[preset]()
    return GaussianMixture(weights=spec["weights"], means=spec["means"],
                           variances=spec["variances"])


def analytic_marginal_logdensity(mix: GaussianMixture, xt: np.ndarray,
                                 t: TimestepLike, sched: NoiseSchedule) -> np.ndarray:
    """log q_t(x_t) of the noised mixture, via log-sum-exp over components"""
    return mix.log_density(xt, sched.alpha_bar_at(sched.check_timestep(t)))


def load_points_csv(path: Union[str, Path]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Load an external point set

    Coordinate columns are named x0, x1, ...; an optional `class` column
    holds labels.
    """
    df = pd.read_csv(path)
    coord_cols = [c for c in df.columns if c.startswith("x") and c[1:].isdigit()]
    if not coord_cols:
        raise ValueError(f"{path}: no coordinate columns (x0, x1, ...)")
    coord_cols.sort(key=lambda c: int(c[1:]))
    points = df[coord_cols].to_numpy(dtype=np.float64)
    labels = df["class"].to_numpy(dtype=np.int64) if "class" in df.columns else None
    logger.info(f"Loaded {len(points)} points of dimension {points.shape[1]} from {path}")
    return points, labels


def points_frame(points: np.ndarray, labels: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Tabulate points with the same column names load_points_csv expects"""
    points = np.asarray(points, dtype=np.float64)
    data = {f"x{i}": points[:, i] for i in range(points.shape[1])}
    if labels is not None:
        data["class"] = np.asarray(labels, dtype=np.int64)
    return pd.DataFrame(data)
