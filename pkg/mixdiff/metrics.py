"""
Sample-quality metrics on raw coordinates

Fréchet distance between Gaussian fits, k-NN manifold precision/recall and
a class-fidelity score built on the exact clean-data class posterior.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .mixture import GaussianMixture
from .plotting import write_line_plot

logger = logging.getLogger(__name__)

EIGEN_CLAMP = 1e-10
DISTANCE_CHUNK = 512
SWEEP_METRICS = ("frechet", "precision", "recall", "class_fidelity")


def _as_set(points, name: str) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2:
        raise ValueError(f"{name} must have shape (n, d), got {points.shape}")
    return points


def _psd_sqrt(matrix: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Symmetric square root via eigh; eigenvalues below 1e-10 are clamped to 0"""
    eigvals, eigvecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    clamped = eigvals < EIGEN_CLAMP
    eigvals = np.where(clamped, 0.0, eigvals)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T, bool(np.any(clamped))


def frechet_from_moments(mu1, cov1, mu2, cov2) -> Tuple[float, bool]:
    """
    ||mu1 - mu2||^2 + Tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))

    Tr((cov1 cov2)^(1/2)) is computed as Tr((S cov2 S)^(1/2)) with
    S = cov1^(1/2), which keeps every square root symmetric.

    Returns:
        The distance and whether any covariance was rank deficient
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    sqrt1, degenerate1 = _psd_sqrt(cov1)
    inner = sqrt1 @ cov2 @ sqrt1
    eigvals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    _, degenerate2 = _psd_sqrt(cov2)
    trace_sqrt = float(np.sum(np.sqrt(np.where(eigvals < EIGEN_CLAMP, 0.0, eigvals))))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * trace_sqrt)
    return max(value, 0.0), degenerate1 or degenerate2


def frechet_statistics(ref, gen) -> Tuple[float, bool]:
    ref, gen = _as_set(ref, "ref"), _as_set(gen, "gen")
    d = ref.shape[1]
    if gen.shape[1] != d:
        raise ValueError(f"point sets differ in dimension: {d} vs {gen.shape[1]}")
    if len(ref) < d + 1 or len(gen) < d + 1:
        raise ValueError(f"Fréchet distance needs at least {d + 1} points per set")
    value, degenerate = frechet_from_moments(
        ref.mean(axis=0), np.cov(ref, rowvar=False).reshape(d, d),
        gen.mean(axis=0), np.cov(gen, rowvar=False).reshape(d, d))
    if degenerate:
        logger.warning("Degenerate covariance in Fréchet distance; eigenvalues clamped")
    return value, degenerate


def frechet_distance(ref, gen) -> float:
    return frechet_statistics(ref, gen)[0]


def random_projection(dim_in: int, dim_out: int = 8, seed: int = 0) -> np.ndarray:
    """Fixed Gaussian projection matrix (dim_in, dim_out) scaled by 1/sqrt(dim_out)"""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((dim_in, dim_out)) / np.sqrt(dim_out)


def manifold_radii(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from every point to its k-th nearest neighbour in the same set"""
    points = _as_set(points, "points")
    if not 1 <= k < len(points):
        raise ValueError(f"k must lie in [1, {len(points) - 1}] for a set of {len(points)}, got {k}")
    radii = np.empty(len(points))
    for start in range(0, len(points), DISTANCE_CHUNK):
        block = cdist(points[start:start + DISTANCE_CHUNK], points)
        # column 0 of the sorted row is the point itself
        radii[start:start + DISTANCE_CHUNK] = np.partition(block, k, axis=1)[:, k]
    return radii


def manifold_coverage(queries: np.ndarray, support: np.ndarray, radii: np.ndarray) -> float:
    """Fraction of queries inside the union of balls B(support_i, radii_i)"""
    inside = 0
    for start in range(0, len(queries), DISTANCE_CHUNK):
        block = cdist(queries[start:start + DISTANCE_CHUNK], support)
        inside += int(np.sum(np.any(block <= radii[None, :], axis=1)))
    return inside / len(queries)


def precision_recall(ref, gen, k: int = 3) -> Tuple[float, float]:
    """
    k-NN manifold precision and recall

    Precision is the fraction of generated points inside the reference
    manifold; recall is the fraction of reference points inside the
    generated manifold.
    """
    ref, gen = _as_set(ref, "ref"), _as_set(gen, "gen")
    if ref.shape[1] != gen.shape[1]:
        raise ValueError("point sets differ in dimension")
    if k >= len(ref) or k >= len(gen):
        raise ValueError(f"k={k} must be smaller than both set sizes ({len(ref)}, {len(gen)})")
    precision = manifold_coverage(gen, ref, manifold_radii(ref, k))
    recall = manifold_coverage(ref, gen, manifold_radii(gen, k))
    return precision, recall


def class_fidelity(mix: GaussianMixture, samples) -> float:
    """
    exp(E_x[KL(p(y|x) || p_bar(y))]) with the exact clean-data posterior

    p_bar is the posterior averaged over the sample set. The score is 1
    when the posterior is the same for every sample and at most K.
    """
    samples = _as_set(samples, "samples")
    if len(samples) == 0:
        raise ValueError("class fidelity needs at least one sample")
    log_p = mix.class_log_posterior(samples)
    p = np.exp(log_p)
    log_marginal = np.log(p.mean(axis=0))
    kl = np.sum(p * (log_p - log_marginal[None, :]), axis=1)
    return float(np.exp(max(kl.mean(), 0.0)))


@dataclass
class MetricsReport:
    frechet: float
    precision: float
    recall: float
    class_fidelity: float
    sample_count: int
    reference_count: int
    frechet_degenerate: bool = False

    def to_row(self) -> dict:
        return asdict(self)


def evaluate_samples(mix: GaussianMixture, samples, reference, k: int = 3,
                     projection: Optional[np.ndarray] = None) -> MetricsReport:
    """
    Score a sample batch against a reference batch

    Args:
        mix: data mixture, for the class-fidelity posterior
        samples: generated points (n, d)
        reference: reference points (m, d)
        k: neighbour count for precision/recall
        projection: optional (d, p) matrix applied before the Fréchet distance
    """
    samples, reference = _as_set(samples, "samples"), _as_set(reference, "reference")
    feat_ref, feat_gen = reference, samples
    if projection is not None:
        feat_ref, feat_gen = reference @ projection, samples @ projection
    frechet, degenerate = frechet_statistics(feat_ref, feat_gen)
    precision, recall = precision_recall(reference, samples, k)
    return MetricsReport(frechet=frechet, precision=precision, recall=recall,
                         class_fidelity=class_fidelity(mix, samples),
                         sample_count=len(samples), reference_count=len(reference),
                         frechet_degenerate=degenerate)


def sweep_guidance_scale(sample_fn, mix: GaussianMixture, reference, scales: Sequence[float],
                         k: int = 3, projection: Optional[np.ndarray] = None,
                         output_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Evaluate guided sampling across guidance scales

    Args:
        sample_fn: callable scale -> samples (n, d); the caller fixes the
            models, labels and seed so only the scale varies
        mix: data mixture
        reference: reference batch
        scales: guidance scales, one table row each
        k: neighbour count
        projection: optional Fréchet feature projection
        output_dir: when given, writes sweep.csv and one SVG per metric

    Returns:
        DataFrame with a `scale` column and the MetricsReport fields
    """
    rows: List[dict] = []
    for scale in scales:
        report = evaluate_samples(mix, sample_fn(float(scale)), reference, k, projection)
        logger.info(f"Scale {scale}: frechet={report.frechet:.4f} precision={report.precision:.3f} "
                    f"recall={report.recall:.3f} fidelity={report.class_fidelity:.3f}")
        rows.append({"scale": float(scale), **report.to_row()})
    table = pd.DataFrame(rows)

    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(output_dir / "sweep.csv", index=False, float_format="%.10g")
        for metric in SWEEP_METRICS:
            write_line_plot(output_dir / f"{metric}.svg", table["scale"], table[metric],
                            title=f"{metric} vs guidance scale", x_label="guidance scale",
                            y_label=metric)
        logger.info(f"Sweep table and plots written to {output_dir}")
    return table
