"""
Checkpoint files for MLP denoisers and classifiers

Layout: a UTF-8 text header, one field per line, terminated by a line
reading END, followed by every parameter tensor as 64-bit little-endian
floats in declaration order (row-major).

    MIXDIFF-CHECKPOINT 1
    kind: denoiser | classifier
    architecture: <JSON, sorted keys>
    schedule: <JSON, sorted keys>
    training_steps: <int>
    tensor: <name> <dim>,<dim>,...
    ...
    END

The header has no timestamps, so identical runs produce identical bytes.
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .classifiers import MlpClassifier
from .models import MlpDenoiser, MlpNetwork, MlpSpec

logger = logging.getLogger(__name__)

MAGIC = "MIXDIFF-CHECKPOINT"
FORMAT_VERSION = 1
END_MARKER = b"END\n"


@dataclass
class Checkpoint:
    model: MlpNetwork
    schedule_spec: Dict
    training_steps: int

    @property
    def kind(self) -> str:
        return self.model.spec.kind


def build_network(spec: MlpSpec, params=None) -> MlpNetwork:
    """Instantiate the network class matching spec.kind"""
    cls = MlpClassifier if spec.kind == "classifier" else MlpDenoiser
    return cls(spec, params)


def _canonical(obj: Dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(model: MlpNetwork, schedule_spec: Dict, training_steps: int) -> bytes:
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"kind: {model.spec.kind}",
        f"architecture: {_canonical(model.spec.to_dict())}",
        f"schedule: {_canonical(schedule_spec)}",
        f"training_steps: {int(training_steps)}",
    ]
    for name, shape in model.parameter_shapes().items():
        lines.append(f"tensor: {name} {','.join(str(s) for s in shape)}")
    header = ("\n".join(lines) + "\n").encode("utf-8") + END_MARKER
    body = b"".join(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
                    for name in model.parameter_shapes())
    return header + body


def save_checkpoint(path: Union[str, Path], model: MlpNetwork, schedule_spec: Dict,
                    training_steps: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, schedule_spec, training_steps))
    logger.info(f"Checkpoint saved to {path} ({model.spec.kind}, {training_steps} steps)")
    return path


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """
    Parse checkpoint bytes

    Raises:
        ValueError: malformed header, unknown version, or a body whose size
            does not match the declared tensors
    """
    end = data.find(b"\n" + END_MARKER)
    if end < 0:
        raise ValueError(f"{source}: checkpoint header has no END line")
    header = data[:end].decode("utf-8").split("\n")
    body = data[end + 1 + len(END_MARKER):]

    magic, _, version = header[0].partition(" ")
    if magic != MAGIC:
        raise ValueError(f"{source}: not a checkpoint file")
    if version != str(FORMAT_VERSION):
        raise ValueError(f"{source}: unsupported checkpoint version {version}")

    fields: Dict[str, str] = {}
    tensors = []
    for line in header[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            raise ValueError(f"{source}: malformed header line {line!r}")
        if key == "tensor":
            name, _, dims = value.partition(" ")
            tensors.append((name, tuple(int(d) for d in dims.split(",") if d)))
        else:
            fields[key] = value
    for key in ("kind", "architecture", "schedule", "training_steps"):
        if key not in fields:
            raise ValueError(f"{source}: checkpoint header is missing '{key}'")

    spec = MlpSpec.from_dict(json.loads(fields["architecture"]))
    if spec.kind != fields["kind"]:
        raise ValueError(f"{source}: kind {fields['kind']} disagrees with the architecture")
    expected = list(build_network(spec).parameter_shapes().items())
    if tensors != expected:
        raise ValueError(f"{source}: tensor list does not match the architecture")

    total = sum(int(np.prod(shape)) for _, shape in tensors)
    if len(body) != 8 * total:
        raise ValueError(f"{source}: expected {8 * total} bytes of parameters, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params = OrderedDict()
    offset = 0
    for name, shape in tensors:
        size = int(np.prod(shape))
        params[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size

    return Checkpoint(model=build_network(spec, params),
                      schedule_spec=json.loads(fields["schedule"]),
                      training_steps=int(fields["training_steps"]))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes(), str(path))
    logger.info(f"Loaded {checkpoint.kind} checkpoint from {path}")
    return checkpoint
