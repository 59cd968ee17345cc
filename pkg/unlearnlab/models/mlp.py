import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..config import CHECKPOINT_FORMAT_VERSION, DEFAULT_ACTIVATION
from ..errors import CheckpointIo, CorruptPayload, NonFinite, SchemaVersionMismatch, ShapeMismatch
from ..fileio import atomic_write_text, format_float
from ..unified_logger import log_system, log_error


@dataclass
class MlpModel:
    """
    Multilayer perceptron classifier.

    Layer ``i`` maps ``layer_dims[i] -> layer_dims[i + 1]`` as ``x @ W + b``; hidden
    layers apply tanh, the last layer is the linear classifier head. The
    feature representation is the activation of the last hidden layer.
    """

    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = DEFAULT_ACTIVATION
    feature_layer_index: int = field(default=-1)

    def __post_init__(self):
        if len(self.layer_dims) < 3:
            raise ShapeMismatch("an MLP needs at least one hidden layer")
        if self.feature_layer_index < 0:
            self.feature_layer_index = len(self.layer_dims) - 2
        if len(self.weights) != self.num_layers or len(self.biases) != self.num_layers:
            raise ShapeMismatch("parameter count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ShapeMismatch(f"layer {i} has shapes {w.shape}/{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFinite(f"layer {i} has non-finite parameters")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[self.feature_layer_index]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> List[np.ndarray]:
        """Flat parameter list: [W0, b0, W1, b1, ...]."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            feature_layer_index=self.feature_layer_index,
        )

    def equals(self, other: "MlpModel") -> bool:
        """Bit-for-bit parameter equality."""
        if self.layer_dims != other.layer_dims:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters()))


def init_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    bias = rng.uniform(-bound, bound, size=(fan_out,))
    return weight, bias


def init_mlp(layer_dims: Sequence[int], seed: int, activation: str = DEFAULT_ACTIVATION) -> MlpModel:
    """Seeded init, every parameter uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w, b = init_layer(rng, fan_in, fan_out)
        weights.append(w)
        biases.append(b)
    return MlpModel(list(layer_dims), weights, biases, activation=activation)


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "feature_layer_index": model.feature_layer_index,
        "layers": [
            {"weights": [float(v) for v in w.ravel(order="C")], "bias": [float(v) for v in b]}
            for w, b in zip(model.weights, model.biases)
        ],
    }


def model_from_dict(payload: dict) -> MlpModel:
    if not isinstance(payload, dict):
        raise CorruptPayload("checkpoint root is not an object")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise SchemaVersionMismatch(f"checkpoint version {version!r}, expected {CHECKPOINT_FORMAT_VERSION}")
    try:
        dims = [int(d) for d in payload["layer_dims"]]
        weights, biases = [], []
        for i, layer in enumerate(payload["layers"]):
            w = np.array(layer["weights"], dtype=np.float64).reshape(dims[i], dims[i + 1])
            b = np.array(layer["bias"], dtype=np.float64).reshape(dims[i + 1])
            weights.append(w)
            biases.append(b)
        return MlpModel(
            layer_dims=dims,
            weights=weights,
            biases=biases,
            activation=str(payload["activation"]),
            feature_layer_index=int(payload["feature_layer_index"]),
        )
    except (KeyError, IndexError, TypeError, ValueError, ShapeMismatch) as e:
        raise CorruptPayload(f"malformed checkpoint: {e}") from e


def checkpoint_text(model: MlpModel) -> str:
    """JSON document of the model with every parameter written to 17 significant digits."""
    payload = model_to_dict(model)
    layers = payload.pop("layers")

    def number(v):
        text = format_float(v)
        # "-0" would load as the int 0
        return text if any(c in text for c in ".e") else text + ".0"

    def floats(values):
        return "[" + ", ".join(number(v) for v in values) + "]"

    encoded = ", ".join(
        f'{{"weights": {floats(layer["weights"])}, "bias": {floats(layer["bias"])}}}' for layer in layers
    )
    return json.dumps(payload)[:-1] + f', "layers": [{encoded}]}}\n'


def save_checkpoint(model: MlpModel, path: str) -> None:
    """Write a model as a JSON checkpoint."""
    try:
        atomic_write_text(path, checkpoint_text(model))
        log_system(f"Checkpoint saved: {os.path.basename(path)}", dedupe=False)
    except OSError as e:
        log_error(f"Error saving checkpoint {path}: {e}")
        raise CheckpointIo(str(e)) from e


def load_checkpoint(path: str) -> MlpModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            content = f.read()
    except OSError as e:
        log_error(f"Error reading checkpoint {path}: {e}")
        raise CheckpointIo(str(e)) from e

    try:
        payload = json.loads(content)
    except json.JSONDecodeError as e:
        raise CorruptPayload(f"checkpoint is not valid JSON: {e}") from e
    return model_from_dict(payload)


def find_checkpoint(directory: str, name: str) -> Optional[str]:
    path = os.path.join(directory, name)
    return path if os.path.exists(path) else None
