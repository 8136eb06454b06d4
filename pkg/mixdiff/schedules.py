"""
Noise schedules for the forward diffusion process
Linear and cosine beta families, five-segment step schedules and respacing
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
LINEAR_REFERENCE_STEPS = 1000
COSINE_OFFSET = 0.008
MAX_BETA = 0.999
NUM_SEGMENTS = 5

TimestepLike = Union[int, np.integer, np.ndarray, Sequence[int]]


def cumulative_alpha_bars(betas: np.ndarray) -> np.ndarray:
    """Cumulative products of alpha_t = 1 - beta_t"""
    return np.cumprod(1.0 - np.asarray(betas, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    All per-timestep quantities of a T-step chain

    Math timesteps run 1..T; arrays are stored 0-indexed so betas[t - 1] is
    beta_t. alpha_bar_prev[t - 1] is alpha_bar_{t-1} with alpha_bar_0 = 1,
    which makes beta_tildes[0] exactly 0.
    """
    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bar_prev: np.ndarray
    beta_tildes: np.ndarray
    log_beta_tildes_clipped: np.ndarray
    source_timesteps: Optional[np.ndarray] = None
    spec: Optional[Dict] = None

    @classmethod
    def from_betas(cls,
                   betas: Sequence[float],
                   source_timesteps: Optional[np.ndarray] = None,
                   alpha_bars: Optional[np.ndarray] = None,
                   spec: Optional[Dict] = None) -> "NoiseSchedule":
        """
        Build a schedule and every derived array from its betas

        Args:
            betas: beta_1..beta_T, each in (0, 1)
            source_timesteps: original 0-based indices when respaced
            alpha_bars: exact cumulative products to store instead of
                recomputing them (respacing keeps the base values)
            spec: provenance dict written into checkpoints and manifests

        Returns:
            Immutable NoiseSchedule
        """
        betas = np.array(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ValueError(f"betas must be a non-empty 1-D array, got shape {betas.shape}")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")

        alphas = 1.0 - betas
        if alpha_bars is None:
            alpha_bars = cumulative_alpha_bars(betas)
        else:
            alpha_bars = np.array(alpha_bars, dtype=np.float64)
            if alpha_bars.shape != betas.shape:
                raise ValueError("alpha_bars and betas must have the same length")
        if np.any(np.diff(alpha_bars) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing in t")

        alpha_bar_prev = np.append(1.0, alpha_bars[:-1])
        beta_tildes = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bars)
        # beta_tilde_1 is 0; borrow beta_tilde_2 so log-variance interpolation stays finite
        if len(betas) > 1:
            log_clipped = np.log(np.append(beta_tildes[1], beta_tildes[1:]))
        else:
            log_clipped = np.log(betas.copy())

        if source_timesteps is not None:
            source_timesteps = np.array(source_timesteps, dtype=np.int64)
            source_timesteps.setflags(write=False)

        for arr in (betas, alphas, alpha_bars, alpha_bar_prev, beta_tildes, log_clipped):
            arr.setflags(write=False)

        return cls(
            num_steps=len(betas),
            betas=betas,
            alphas=alphas,
            alpha_bars=alpha_bars,
            alpha_bar_prev=alpha_bar_prev,
            beta_tildes=beta_tildes,
            log_beta_tildes_clipped=log_clipped,
            source_timesteps=source_timesteps,
            spec=dict(spec) if spec else None,
        )

    @property
    def is_respaced(self) -> bool:
        return self.source_timesteps is not None

    def check_timestep(self, t: TimestepLike, allow_zero: bool = False) -> np.ndarray:
        """Validate 1-based timesteps and return them as an int array"""
        arr = np.asarray(t)
        if arr.dtype.kind not in "iu":
            raise ValueError(f"timesteps must be integers, got dtype {arr.dtype}")
        low = 0 if allow_zero else 1
        if arr.size and (arr.min() < low or arr.max() > self.num_steps):
            raise ValueError(f"timestep out of range [{low}, {self.num_steps}]: {t}")
        return arr.astype(np.int64)

    def alpha_bar_at(self, t: TimestepLike) -> np.ndarray:
        """alpha_bar_t for t in 0..T, with alpha_bar_0 = 1"""
        t = self.check_timestep(t, allow_zero=True)
        padded = np.append(1.0, self.alpha_bars)
        return padded[t]

    def model_timesteps(self, t: TimestepLike) -> np.ndarray:
        """Map timesteps of this chain onto the chain the model was trained on"""
        t = self.check_timestep(t)
        if self.source_timesteps is None:
            return t
        return self.source_timesteps[t - 1] + 1

    def describe(self) -> Dict:
        return {
            "num_steps": self.num_steps,
            "respaced": self.is_respaced,
            "beta_first": float(self.betas[0]),
            "beta_last": float(self.betas[-1]),
            "alpha_bar_last": float(self.alpha_bars[-1]),
            "spec": self.spec,
        }


def _check_num_steps(num_steps: int) -> int:
    if isinstance(num_steps, bool) or not isinstance(num_steps, (int, np.integer)):
        raise ValueError(f"number of steps must be an integer, got {num_steps!r}")
    if num_steps < 1:
        raise ValueError(f"number of steps must be >= 1, got {num_steps}")
    return int(num_steps)


def make_linear_schedule(num_steps: int) -> NoiseSchedule:
    """
    Linear betas from 1e-4 to 0.02 at T = 1000, scaled by 1000/T otherwise

    Args:
        num_steps: chain length T

    Returns:
        NoiseSchedule of the linear family
    """
    num_steps = _check_num_steps(num_steps)
    scale = LINEAR_REFERENCE_STEPS / num_steps
    betas = np.linspace(LINEAR_BETA_START * scale, LINEAR_BETA_END * scale, num_steps,
                        dtype=np.float64)
    if np.any(betas > MAX_BETA):
        logger.warning(f"Linear schedule with T={num_steps} exceeds beta {MAX_BETA}; clipping")
        betas = np.minimum(betas, MAX_BETA)
    return NoiseSchedule.from_betas(betas, spec={"family": "linear", "steps": num_steps})


def make_cosine_schedule(num_steps: int) -> NoiseSchedule:
    """
    Squared-cosine alpha_bar with offset s = 0.008, betas clipped at 0.999
    """
    num_steps = _check_num_steps(num_steps)
    steps = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    f = np.cos(((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * math.pi / 2) ** 2
    alpha_bar = f / f[0]
    betas = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], MAX_BETA)
    return NoiseSchedule.from_betas(betas, spec={"family": "cosine", "steps": num_steps})


SCHEDULE_FAMILIES = {
    "linear": make_linear_schedule,
    "cosine": make_cosine_schedule,
}


def build_schedule(spec: Dict) -> NoiseSchedule:
    """
    Build a schedule from its config form {family: linear|cosine, steps: T}
    """
    family = spec.get("family")
    if family not in SCHEDULE_FAMILIES:
        raise ValueError(f"Unknown schedule family: {family}. Use 'linear' or 'cosine'")
    return SCHEDULE_FAMILIES[family](spec.get("steps"))


@dataclass(frozen=True)
class SegmentSchedule:
    """Steps allocated to each fifth of the chain, e.g. (90, 60, 60, 20, 20)"""
    segment_counts: Tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.segment_counts)
        if len(counts) != NUM_SEGMENTS:
            raise ValueError(f"segment schedule needs {NUM_SEGMENTS} counts, got {len(counts)}")
        if any(c < 0 for c in counts):
            raise ValueError(f"segment counts must be non-negative: {counts}")
        if sum(counts) == 0:
            raise ValueError("segment schedule allocates no steps")
        object.__setattr__(self, "segment_counts", counts)

    @property
    def total(self) -> int:
        return sum(self.segment_counts)

    @classmethod
    def parse(cls, text: str) -> "SegmentSchedule":
        """Parse the CLI form 'a,b,c,d,e'"""
        try:
            counts = tuple(int(part) for part in text.split(","))
        except ValueError:
            raise ValueError(f"segments must be five comma-separated integers, got {text!r}")
        return cls(counts)


def _evenly_spaced(start: int, width: int, count: int) -> np.ndarray:
    # floor(j * width / count) keeps the first index and spreads the rest evenly
    return start + (np.arange(count, dtype=np.int64) * width) // count


def uniform_timesteps(num_steps: int, count: int) -> np.ndarray:
    """Evenly strided selection of `count` 0-based indices out of `num_steps`"""
    num_steps = _check_num_steps(num_steps)
    if count < 1 or count > num_steps:
        raise ValueError(f"cannot select {count} steps out of {num_steps}")
    return _evenly_spaced(0, num_steps, count)


def segment_to_timesteps(sched: SegmentSchedule, num_steps: int) -> np.ndarray:
    """
    Expand a five-segment allocation into sorted original timesteps

    Args:
        sched: counts per fifth of the chain
        num_steps: original chain length T, divisible by 5

    Returns:
        Ascending 0-based timestep indices without duplicates
    """
    num_steps = _check_num_steps(num_steps)
    if num_steps % NUM_SEGMENTS != 0:
        raise ValueError(f"T={num_steps} is not divisible by {NUM_SEGMENTS}")
    width = num_steps // NUM_SEGMENTS

    pieces = []
    for i, count in enumerate(sched.segment_counts):
        if count > width:
            raise ValueError(f"segment {i} asks for {count} steps but only has {width}")
        if count:
            pieces.append(_evenly_spaced(i * width, width, count))
    return np.concatenate(pieces)


def respace(base: NoiseSchedule, timesteps: Sequence[int]) -> NoiseSchedule:
    """
    Rebuild a schedule on a subset of timesteps, preserving kept marginals

    The new chain's alpha_bar_i equals the base alpha_bar at s_i exactly, and
    beta'_i = 1 - alpha_bar_{s_i} / alpha_bar_{s_{i-1}}.

    Args:
        base: schedule being respaced
        timesteps: strictly ascending 0-based indices into `base`

    Returns:
        Respaced schedule with source_timesteps recorded against the
        original chain
    """
    timesteps = np.asarray(timesteps, dtype=np.int64)
    if timesteps.ndim != 1 or len(timesteps) == 0:
        raise ValueError("respacing needs a non-empty list of timesteps")
    if timesteps[0] < 0 or timesteps[-1] >= base.num_steps:
        raise ValueError(f"respacing indices must lie in [0, {base.num_steps - 1}]")
    if np.any(np.diff(timesteps) <= 0):
        raise ValueError("respacing indices must be strictly ascending")

    kept = base.alpha_bars[timesteps]
    previous = np.append(1.0, kept[:-1])
    betas = 1.0 - kept / previous

    source = timesteps if base.source_timesteps is None else base.source_timesteps[timesteps]
    spec = dict(base.spec or {})
    spec["respaced_steps"] = int(len(timesteps))
    logger.debug(f"Respaced {base.num_steps} -> {len(timesteps)} steps")
    return NoiseSchedule.from_betas(betas, source_timesteps=source, alpha_bars=kept, spec=spec)


def respacing_timesteps(spec: Optional[Dict], num_steps: int) -> Optional[np.ndarray]:
    """
    Resolve a respacing spec into timestep indices

    Specs: {kind: uniform, count: N} or {kind: segments, counts: [a,b,c,d,e]};
    None keeps the full chain.
    """
    if spec is None:
        return None
    kind = spec.get("kind")
    if kind == "uniform":
        return uniform_timesteps(num_steps, int(spec["count"]))
    if kind == "segments":
        return segment_to_timesteps(SegmentSchedule(tuple(spec["counts"])), num_steps)
    raise ValueError(f"Unknown respacing kind: {kind}. Use 'uniform' or 'segments'")


def apply_respacing(base: NoiseSchedule, spec: Optional[Dict]) -> NoiseSchedule:
    """Respace `base` per a config spec; None returns `base` unchanged"""
    timesteps = respacing_timesteps(spec, base.num_steps)
    if timesteps is None:
        return base
    return respace(base, timesteps)
