"""
Experiment runner that ties configuration, models, samplers and metrics
into reproducible runs with a manifest of every artifact written
"""

import hashlib
import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .classifiers import AnalyticClassifier
from .config import ExperimentConfig
from .metrics import MetricsReport, evaluate_samples, random_projection, sweep_guidance_scale
from .mixture import points_frame
from .models import AnalyticDenoiser
from .samplers import SamplerConfig, ddim_decode, ddim_encode, latent_interpolate, sample
from .schedules import NoiseSchedule, build_schedule
from .training import PointStream, train_classifier, train_diffusion

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run-manifest.json"
CSV_FLOAT_FORMAT = "%.17g"


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_manifest(directory: Union[str, Path], command: str, settings: Dict,
                   seeds: Dict, artifacts: Sequence[Union[str, Path]],
                   summary: Optional[Dict] = None) -> Path:
    """
    Record what a run did: its settings (and their hash), seeds, versions
    and the SHA-256 of every artifact it wrote

    Args:
        directory: where run-manifest.json goes; artifact paths are stored
            relative to it when possible
        command: CLI subcommand
        settings: canonical JSON-compatible settings of the run
        seeds: every seed the run consumed
        artifacts: files written by the run
        summary: descriptive facts about the run (dataset, chain), kept
            out of the settings hash
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    entries = []
    for artifact in artifacts:
        artifact = Path(artifact)
        try:
            name = artifact.resolve().relative_to(directory.resolve()).as_posix()
        except ValueError:
            name = artifact.as_posix()
        entries.append({"path": name, "sha256": file_sha256(artifact)})
    manifest = {
        "command": command,
        "package_version": __version__,
        "checkpoint_format": FORMAT_VERSION,
        "settings": settings,
        "settings_sha256": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "seeds": seeds,
        "artifacts": sorted(entries, key=lambda e: e["path"]),
    }
    if summary is not None:
        manifest["summary"] = summary
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Run manifest written to {path}")
    return path


def samples_frame(samples: np.ndarray, labels: Optional[np.ndarray], seed: int) -> pd.DataFrame:
    """Sample CSV layout: x0..x{d-1}, class (when assigned), seed, chain"""
    frame = points_frame(samples, labels)
    frame["seed"] = seed
    frame["chain"] = np.arange(len(frame), dtype=np.int64)
    return frame


class ExperimentRunner:
    """
    Runs the train / sample / eval / sweep / encode / interpolate workflows
    for one experiment config
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.mixture = config.mixture
        self.schedule = build_schedule(config.schedule)

    def train(self) -> Dict:
        """
        Train the configured models and write checkpoints and loss logs

        Returns:
            Dictionary with 'artifacts' (paths written) and 'statistics'
        """
        cfg = self.config
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        stream = PointStream(self.mixture)
        artifacts: List[Path] = []
        stats: Dict = {}

        if cfg.train_diffusion:
            rng = np.random.default_rng([cfg.dataset_seed, cfg.training.seed])
            result = train_diffusion(stream, cfg.model, self.schedule, cfg.training,
                                     cfg.model_seed, rng)
            artifacts.append(save_checkpoint(out / "denoiser.ckpt", result.model,
                                             cfg.schedule, result.steps))
            artifacts.append(write_csv(result.loss_log, out / "denoiser_loss.csv"))
            stats["denoiser_final_loss"] = float(result.loss_log["total"].iloc[-1]) if result.steps else None

        if cfg.train_classifier:
            rng = np.random.default_rng([cfg.dataset_seed, cfg.classifier_training.seed])
            result = train_classifier(stream, cfg.classifier, self.schedule,
                                      cfg.classifier_training, cfg.classifier_seed, rng)
            artifacts.append(save_checkpoint(out / "classifier.ckpt", result.model,
                                             cfg.schedule, result.steps))
            artifacts.append(write_csv(result.loss_log, out / "classifier_loss.csv"))
            stats["classifier_final_accuracy"] = (float(result.loss_log["accuracy"].iloc[-1])
                                                  if result.steps else None)

        write_manifest(out, "train", cfg.canonical, self.seeds(), artifacts, self.describe())
        return {"artifacts": artifacts, "statistics": stats}

    def describe(self) -> Dict:
        return {"dataset": self.mixture.describe(), "schedule": self.schedule.describe()}

    def seeds(self) -> Dict:
        cfg = self.config
        return {
            "dataset": cfg.dataset_seed,
            "model": cfg.model_seed,
            "classifier": cfg.classifier_seed,
            "training": cfg.training.seed,
            "classifier_training": cfg.classifier_training.seed,
            "sampler": cfg.sampler.seed,
            "reference": cfg.metrics.reference_seed,
        }

    def oracle_models(self, conditional: bool = False) -> Tuple[AnalyticDenoiser, AnalyticClassifier]:
        return (AnalyticDenoiser(self.mixture, self.schedule, conditional=conditional),
                AnalyticClassifier(self.mixture, self.schedule))

    def reference_points(self) -> np.ndarray:
        rng = np.random.default_rng(self.config.metrics.reference_seed)
        return self.mixture.sample(self.config.metrics.reference_size, rng)[0]

    def projection(self) -> Optional[np.ndarray]:
        dim = self.config.metrics.projection_dim
        if dim == 0:
            return None
        return random_projection(self.mixture.dim, dim, seed=self.config.metrics.reference_seed)

    def evaluate(self, samples: np.ndarray, reference: Optional[np.ndarray] = None) -> MetricsReport:
        reference = self.reference_points() if reference is None else reference
        return evaluate_samples(self.mixture, samples, reference, self.config.metrics.k,
                                self.projection())

    def sweep(self, model, classifier, schedule: NoiseSchedule, sampler: SamplerConfig,
              scales: Sequence[float], n: int, output_dir: Path) -> pd.DataFrame:
        """One guided sampling run per scale with shared labels and seeds"""
        label_rng = np.random.default_rng([sampler.seed, 1])
        labels = label_rng.choice(self.mixture.num_classes, size=n, p=self.mixture.weights)

        def sample_at(scale: float) -> np.ndarray:
            return sample(model, schedule, replace(sampler, guidance_scale=scale), n,
                          classifier, labels).samples

        return sweep_guidance_scale(sample_at, self.mixture, self.reference_points(), scales,
                                    self.config.metrics.k, self.projection(), output_dir)


def load_models(checkpoint: Optional[Union[str, Path]] = None,
                classifier_checkpoint: Optional[Union[str, Path]] = None):
    """
    Load a denoiser and an optional classifier from checkpoints

    Returns:
        (model, classifier or None, schedule the models were trained on)
    """
    if checkpoint is None:
        raise ValueError("a denoiser checkpoint is required")
    ckpt = load_checkpoint(checkpoint)
    if ckpt.kind != "denoiser":
        raise ValueError(f"{checkpoint} holds a {ckpt.kind}, not a denoiser")
    classifier = None
    if classifier_checkpoint is not None:
        clf = load_checkpoint(classifier_checkpoint)
        if clf.kind != "classifier":
            raise ValueError(f"{classifier_checkpoint} holds a {clf.kind}, not a classifier")
        if clf.schedule_spec != ckpt.schedule_spec:
            raise ValueError("denoiser and classifier were trained on different schedules")
        classifier = clf.model
    return ckpt.model, classifier, build_schedule(ckpt.schedule_spec)


def encode_points(model, schedule: NoiseSchedule, points: np.ndarray, num_steps: int,
                  y=None) -> np.ndarray:
    logger.info(f"Encoding {len(points)} points with a {num_steps}-step reverse ODE")
    return ddim_encode(model, points, schedule, num_steps, y)


def interpolate_points(model, schedule: NoiseSchedule, points: np.ndarray, num_steps: int,
                       theta_count: int, y=None) -> pd.DataFrame:
    """
    Encode two points, sweep theta from 0 to pi/2 between their latents and
    decode each interpolant

    Args:
        y: class of the pair, a scalar or one label per endpoint; both
            endpoints must share it since every interpolant is decoded
            under that single class

    Returns:
        DataFrame with columns theta, x0..x{d-1}, plus class when y is given
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) != 2:
        raise ValueError(f"interpolation needs exactly two points, got {len(points)}")
    if theta_count < 2:
        raise ValueError(f"theta count must be >= 2, got {theta_count}")
    label = None
    if y is not None:
        labels = np.unique(np.asarray(y, dtype=np.int64).reshape(-1))
        if len(labels) != 1:
            raise ValueError(f"interpolation endpoints must share one class, got {labels.tolist()}")
        label = int(labels[0])
    latents = ddim_encode(model, points, schedule, num_steps,
                          None if label is None else np.full(2, label))
    thetas = np.linspace(0.0, math.pi / 2, theta_count)
    mixed = np.stack([latent_interpolate(latents[0], latents[1], th) for th in thetas])
    decoded = ddim_decode(model, mixed, schedule, num_steps,
                          None if label is None else np.full(theta_count, label))
    frame = points_frame(decoded, None if label is None else np.full(theta_count, label))
    frame.insert(0, "theta", thetas)
    return frame
