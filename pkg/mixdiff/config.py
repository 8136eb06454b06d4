"""
Experiment configuration

Defaults live in a SimpleNamespace tree; load_experiment_config() reads a
YAML file, checks every field against the module it configures and returns
a frozen ExperimentConfig. Environment variables are never consulted.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import SimpleNamespace as _SN
from typing import Any, Callable, Dict, Tuple, Union

import yaml

from .mixture import GaussianMixture, mixture_from_spec
from .models import MlpSpec
from .samplers import SamplerConfig
from .schedules import build_schedule, respacing_timesteps
from .training import TrainConfig

logger = logging.getLogger(__name__)

config = _SN()
config.dataset = _SN(preset="benchmark", seed=0)
config.schedule = _SN(family="linear", steps=1000)
config.model = _SN(hidden_widths=[128, 128, 128], embedding_dim=64, group_size=32,
                   conditional=False, learn_variance=True, seed=0)
config.classifier = _SN(hidden_widths=[128, 128, 128], embedding_dim=64, group_size=32, seed=1)
config.training = _SN(batch_size=256, iterations=20000, learning_rate=1e-3, adam_betas=[0.9, 0.999],
                      adam_eps=1e-8, ema_rate=0.999, lambda_vlb=0.001, weight_decay=0.0,
                      seed=0, log_every=1000)
config.classifier_training = _SN(batch_size=256, iterations=10000, learning_rate=3e-4,
                                 adam_betas=[0.9, 0.999], adam_eps=1e-8, ema_rate=0.999,
                                 lambda_vlb=0.0, weight_decay=0.05, seed=1, log_every=1000)
config.sampler = _SN(kind="ancestral", guidance_scale=0.0, temperature=_SN(mode="none", tau=1.0),
                     respacing=None, variance_mode="learned-v", seed=0, allow_experimental=False)
config.metrics = _SN(k=3, reference_size=10000, reference_seed=12345, num_samples=2000,
                     projection_dim=0, scales=[0.0, 1.0, 2.0, 5.0, 10.0])
config.train = _SN(diffusion=True, classifier=True)

REQUIRED_FIELDS = ("dataset", "schedule", "output_dir")


class ConfigError(ValueError):
    """A schema violation located in a config file"""

    def __init__(self, path: Union[str, Path], line: int, field_name: str, problem: str):
        self.path = str(path)
        self.line = line
        self.field = field_name
        self.problem = problem
        super().__init__(f"{self.path}:{line}: {field_name}: {problem}")


@dataclass(frozen=True)
class MetricsConfig:
    k: int = 3
    reference_size: int = 10000
    reference_seed: int = 12345
    num_samples: int = 2000
    projection_dim: int = 0
    scales: Tuple[float, ...] = (0.0, 1.0, 2.0, 5.0, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.reference_size <= self.k or self.num_samples <= self.k:
            raise ValueError("reference_size and num_samples must exceed k")
        if self.projection_dim < 0:
            raise ValueError("projection_dim must be >= 0 (0 disables the projection)")
        if not self.scales or min(self.scales) < 0:
            raise ValueError("scales must be a non-empty list of non-negative values")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment; `canonical` is the fully resolved settings tree"""
    source: Path
    mixture: GaussianMixture
    dataset_seed: int
    schedule: Dict
    model: MlpSpec
    model_seed: int
    classifier: MlpSpec
    classifier_seed: int
    training: TrainConfig
    classifier_training: TrainConfig
    sampler: SamplerConfig
    metrics: MetricsConfig
    output_dir: Path
    train_diffusion: bool = True
    train_classifier: bool = True
    canonical: Dict = field(default_factory=dict)

    def canonical_json(self) -> str:
        return json.dumps(self.canonical, sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _index_lines(node, prefix: Tuple[str, ...], out: Dict[Tuple[str, ...], int]):
    """Record the 1-based source line of every mapping key"""
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            out[path] = key_node.start_mark.line + 1
            _index_lines(value_node, path, out)


class _Reader:
    """Typed access to the parsed document with line-precise errors"""

    def __init__(self, path: Path, lines: Dict[Tuple[str, ...], int]):
        self.path = path
        self.lines = lines

    def line(self, path: Tuple[str, ...]) -> int:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return 1

    def fail(self, path: Tuple[str, ...], problem: str):
        raise ConfigError(self.path, self.line(path), ".".join(path) or "<document>", problem)

    def section(self, data: Dict, name: str, defaults: _SN) -> Dict:
        """Merge a section over its defaults, rejecting unknown keys"""
        raw = data.get(name)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            self.fail((name,), "must be a mapping")
        known = vars(defaults)
        for key in raw:
            if key not in known:
                self.fail((name, str(key)), "unknown field")
        return {key: raw.get(key, default) for key, default in known.items()}

    def number(self, value: Any, path: Tuple[str, ...]) -> float:
        # YAML 1.1 loads 1e-3 as a string
        if isinstance(value, bool):
            self.fail(path, f"expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        self.fail(path, f"expected a number, got {value!r}")

    def integer(self, value: Any, path: Tuple[str, ...]) -> int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        number = self.number(value, path)
        if not number.is_integer():
            self.fail(path, f"expected an integer, got {value!r}")
        return int(number)

    def flag(self, value: Any, path: Tuple[str, ...]) -> bool:
        if not isinstance(value, bool):
            self.fail(path, f"expected true or false, got {value!r}")
        return value

    def text(self, value: Any, path: Tuple[str, ...]) -> str:
        if not isinstance(value, str):
            self.fail(path, f"expected a string, got {value!r}")
        return value

    def integers(self, value: Any, path: Tuple[str, ...]) -> list:
        if not isinstance(value, list):
            self.fail(path, "expected a list")
        return [self.integer(v, path) for v in value]

    def numbers(self, value: Any, path: Tuple[str, ...]) -> list:
        if not isinstance(value, list):
            self.fail(path, "expected a list")
        return [self.number(v, path) for v in value]

    def build(self, path: Tuple[str, ...], factory: Callable, *args, **kwargs):
        try:
            return factory(*args, **kwargs)
        except (ValueError, TypeError, KeyError) as e:
            self.fail(path, str(e))


def _train_config(reader: _Reader, data: Dict, name: str) -> TrainConfig:
    raw = reader.section(data, name, getattr(config, name))
    p = (name,)
    return reader.build(p, TrainConfig,
                        batch_size=reader.integer(raw["batch_size"], p + ("batch_size",)),
                        iterations=reader.integer(raw["iterations"], p + ("iterations",)),
                        learning_rate=reader.number(raw["learning_rate"], p + ("learning_rate",)),
                        adam_betas=tuple(reader.numbers(raw["adam_betas"], p + ("adam_betas",))),
                        adam_eps=reader.number(raw["adam_eps"], p + ("adam_eps",)),
                        ema_rate=reader.number(raw["ema_rate"], p + ("ema_rate",)),
                        lambda_vlb=reader.number(raw["lambda_vlb"], p + ("lambda_vlb",)),
                        weight_decay=reader.number(raw["weight_decay"], p + ("weight_decay",)),
                        seed=reader.integer(raw["seed"], p + ("seed",)),
                        log_every=reader.integer(raw["log_every"], p + ("log_every",)))


def _dataset(reader: _Reader, data: Dict) -> Tuple[GaussianMixture, Dict, int]:
    raw = data["dataset"]
    if not isinstance(raw, dict):
        reader.fail(("dataset",), "must be a mapping")
    allowed = {"preset", "weights", "means", "variances", "seed"}
    for key in raw:
        if key not in allowed:
            reader.fail(("dataset", str(key)), "unknown field")
    seed = reader.integer(raw.get("seed", config.dataset.seed), ("dataset", "seed"))
    if "preset" in raw:
        spec = {"preset": reader.text(raw["preset"], ("dataset", "preset"))}
    else:
        missing = [k for k in ("weights", "means", "variances") if k not in raw]
        if missing:
            reader.fail(("dataset",), f"missing required field '{missing[0]}' "
                                      "(or give a preset)")
        spec = {k: raw[k] for k in ("weights", "means", "variances")}
    mixture = reader.build(("dataset",), mixture_from_spec, spec)
    return mixture, spec, seed


def _sampler(reader: _Reader, data: Dict, steps: int) -> SamplerConfig:
    raw = reader.section(data, "sampler", config.sampler)
    p = ("sampler",)
    temperature = raw["temperature"]
    if isinstance(temperature, _SN):
        temperature = vars(temperature)
    if not isinstance(temperature, dict):
        reader.fail(p + ("temperature",), "must be a mapping")
    for key in temperature:
        if key not in ("mode", "tau"):
            reader.fail(p + ("temperature", str(key)), "unknown field")
    respacing = raw["respacing"]
    if respacing is not None:
        if not isinstance(respacing, dict):
            reader.fail(p + ("respacing",), "must be a mapping")
        respacing = dict(respacing)
        if "count" in respacing:
            respacing["count"] = reader.integer(respacing["count"], p + ("respacing", "count"))
        if "counts" in respacing:
            respacing["counts"] = reader.integers(respacing["counts"], p + ("respacing", "counts"))
        reader.build(p + ("respacing",), respacing_timesteps, respacing, steps)
    return reader.build(
        p, SamplerConfig,
        kind=reader.text(raw["kind"], p + ("kind",)),
        guidance_scale=reader.number(raw["guidance_scale"], p + ("guidance_scale",)),
        temperature_mode=reader.text(temperature.get("mode", "none"), p + ("temperature", "mode")),
        tau=reader.number(temperature.get("tau", 1.0), p + ("temperature", "tau")),
        respacing=respacing,
        seed=reader.integer(raw["seed"], p + ("seed",)),
        variance_mode=reader.text(raw["variance_mode"], p + ("variance_mode",)),
        allow_experimental=reader.flag(raw["allow_experimental"], p + ("allow_experimental",)))


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Parse and validate an experiment file

    Args:
        path: YAML file; a relative output_dir is resolved against the
            file's directory

    Returns:
        Frozen ExperimentConfig

    Raises:
        ConfigError: on any schema violation, with file and line
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(path, 0, "<document>", f"cannot read file: {e}")
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(path, mark.line + 1 if mark else 1, "<document>",
                          str(getattr(e, "problem", e)))

    lines: Dict[Tuple[str, ...], int] = {}
    _index_lines(root, (), lines)
    reader = _Reader(path, lines)
    if not isinstance(data, dict):
        reader.fail((), "top level must be a mapping")
    known = set(REQUIRED_FIELDS) | {"model", "classifier", "training", "classifier_training",
                                    "sampler", "metrics", "train"}
    for key in data:
        if key not in known:
            reader.fail((str(key),), "unknown field")
    for key in REQUIRED_FIELDS:
        if key not in data or data[key] is None:
            reader.fail((key,), "missing required field")

    mixture, dataset_spec, dataset_seed = _dataset(reader, data)

    raw_schedule = reader.section(data, "schedule", config.schedule)
    schedule = {"family": reader.text(raw_schedule["family"], ("schedule", "family")),
                "steps": reader.integer(raw_schedule["steps"], ("schedule", "steps"))}
    reader.build(("schedule",), build_schedule, schedule)

    raw_model = reader.section(data, "model", config.model)
    m = ("model",)
    model = reader.build(m, MlpSpec, kind="denoiser", data_dim=mixture.dim,
                         hidden_widths=tuple(reader.integers(raw_model["hidden_widths"], m + ("hidden_widths",))),
                         embedding_dim=reader.integer(raw_model["embedding_dim"], m + ("embedding_dim",)),
                         group_size=reader.integer(raw_model["group_size"], m + ("group_size",)),
                         num_classes=mixture.num_classes,
                         conditional=reader.flag(raw_model["conditional"], m + ("conditional",)),
                         learn_variance=reader.flag(raw_model["learn_variance"], m + ("learn_variance",)))
    model_seed = reader.integer(raw_model["seed"], m + ("seed",))

    raw_clf = reader.section(data, "classifier", config.classifier)
    c = ("classifier",)
    classifier = reader.build(c, MlpSpec, kind="classifier", data_dim=mixture.dim,
                              hidden_widths=tuple(reader.integers(raw_clf["hidden_widths"], c + ("hidden_widths",))),
                              embedding_dim=reader.integer(raw_clf["embedding_dim"], c + ("embedding_dim",)),
                              group_size=reader.integer(raw_clf["group_size"], c + ("group_size",)),
                              num_classes=mixture.num_classes, learn_variance=False)
    classifier_seed = reader.integer(raw_clf["seed"], c + ("seed",))

    training = _train_config(reader, data, "training")
    classifier_training = _train_config(reader, data, "classifier_training")
    sampler = _sampler(reader, data, schedule["steps"])
    if sampler.variance_mode == "learned-v" and not model.learn_variance:
        reader.fail(("sampler", "variance_mode"), "learned-v needs model.learn_variance: true")

    raw_metrics = reader.section(data, "metrics", config.metrics)
    mp = ("metrics",)
    metrics = reader.build(mp, MetricsConfig,
                           k=reader.integer(raw_metrics["k"], mp + ("k",)),
                           reference_size=reader.integer(raw_metrics["reference_size"], mp + ("reference_size",)),
                           reference_seed=reader.integer(raw_metrics["reference_seed"], mp + ("reference_seed",)),
                           num_samples=reader.integer(raw_metrics["num_samples"], mp + ("num_samples",)),
                           projection_dim=reader.integer(raw_metrics["projection_dim"], mp + ("projection_dim",)),
                           scales=tuple(reader.numbers(raw_metrics["scales"], mp + ("scales",))))

    raw_train = reader.section(data, "train", config.train)
    train_diffusion = reader.flag(raw_train["diffusion"], ("train", "diffusion"))
    train_classifier = reader.flag(raw_train["classifier"], ("train", "classifier"))

    output_dir = Path(reader.text(data["output_dir"], ("output_dir",)))
    if not output_dir.is_absolute():
        output_dir = path.parent / output_dir

    canonical = {
        "dataset": {**dataset_spec, "seed": dataset_seed},
        "schedule": schedule,
        "model": {**model.to_dict(), "seed": model_seed},
        "classifier": {**classifier.to_dict(), "seed": classifier_seed},
        "training": asdict(training),
        "classifier_training": asdict(classifier_training),
        "sampler": asdict(sampler),
        "metrics": asdict(metrics),
        "train": {"diffusion": train_diffusion, "classifier": train_classifier},
    }
    logger.info(f"Loaded config {path}")
    return ExperimentConfig(source=path, mixture=mixture, dataset_seed=dataset_seed,
                            schedule=schedule, model=model, model_seed=model_seed,
                            classifier=classifier, classifier_seed=classifier_seed,
                            training=training, classifier_training=classifier_training,
                            sampler=sampler, metrics=metrics, output_dir=output_dir,
                            train_diffusion=train_diffusion, train_classifier=train_classifier,
                            canonical=json.loads(json.dumps(canonical)))
