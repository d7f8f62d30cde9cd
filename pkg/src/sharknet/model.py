"""Sequential layer specifications, the SharkNet-X builder and forward pass."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import make_rng
from .tensor import Tensor

GENERA = (
    "Carcharhinus", "Carcharias", "Carcharocles", "Chlamydoselachus", "Cosmopolitodus",
    "Galeocerdo", "Hemipristis", "Notorynchus", "Prionace", "Squatina",
)


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: int = 3
    stride: int = 1
    padding: str = "valid"
    activation: str = "relu"


@dataclass(frozen=True)
class MaxPool2D:
    pool: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "none"


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5


LayerSpec = Union[Conv2D, MaxPool2D, Flatten, Dense, Dropout]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv2D, MaxPool2D, Flatten, Dense, Dropout)}


def _validate_layer(spec: LayerSpec) -> None:
    if isinstance(spec, Conv2D):
        if spec.filters < 1 or spec.kernel < 1 or spec.stride < 1:
            raise ConfigError(f"invalid conv layer {spec}")
        if spec.padding != "valid" or spec.activation not in ("relu", "none"):
            raise ConfigError(f"unsupported conv options {spec}")
    elif isinstance(spec, MaxPool2D):
        if spec.pool < 1 or spec.stride < 1:
            raise ConfigError(f"invalid pooling layer {spec}")
    elif isinstance(spec, Dense):
        if spec.units < 1 or spec.activation not in ("relu", "none"):
            raise ConfigError(f"invalid dense layer {spec}")
    elif isinstance(spec, Dropout):
        if not 0.0 <= spec.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {spec.rate}")
    elif not isinstance(spec, Flatten):
        raise ConfigError(f"unknown layer spec {spec!r}")


@dataclass
class ModelConfig:
    input_shape: tuple
    layers: list
    class_names: list = field(default_factory=lambda: list(GENERA))
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.class_names = list(self.class_names)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class_names must be unique")
        for spec in self.layers:
            _validate_layer(spec)
        last = self.layers[-1] if self.layers else None
        if not isinstance(last, Dense) or last.activation != "none" or last.units != len(self.class_names):
            raise ConfigError("last layer must be a logits Dense layer with one unit per class")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(s).__name__, **asdict(s)} for s in self.layers],
            "class_names": list(self.class_names),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        layers = []
        for item in d["layers"]:
            item = dict(item)
            kind = item.pop("type")
            if kind not in _LAYER_TYPES:
                raise ConfigError(f"unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**item))
        return cls(tuple(d["input_shape"]), layers, list(d["class_names"]), int(d.get("seed", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def layer_shapes(config: ModelConfig) -> list:
    """Output shape (without the batch axis) of every layer, in order.

    Raises :class:`ShapeError` naming the first layer whose spatial output
    would collapse below one pixel.
    """
    shape = tuple(config.input_shape)
    out = []
    for i, spec in enumerate(config.layers):
        name = f"layer {i} ({type(spec).__name__})"
        if isinstance(spec, (Conv2D, MaxPool2D)):
            if len(shape) != 3:
                raise ShapeError(f"{name} needs a spatial input, got {shape}")
            k = spec.kernel if isinstance(spec, Conv2D) else spec.pool
            h, w, c = shape
            if k > h or k > w:
                raise ShapeError(f"{name} collapses spatial size {h}x{w} below 1")
            h, w = T.conv_output_size(h, k, spec.stride), T.conv_output_size(w, k, spec.stride)
            shape = (h, w, spec.filters if isinstance(spec, Conv2D) else c)
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Dense):
            if len(shape) != 1:
                raise ShapeError(f"{name} needs a flat input, got {shape}")
            shape = (spec.units,)
        out.append(shape)
    return out


def layer_parameter_counts(config: ModelConfig) -> list:
    counts = []
    prev = tuple(config.input_shape)
    for spec, shape in zip(config.layers, layer_shapes(config)):
        if isinstance(spec, Conv2D):
            counts.append(spec.kernel * spec.kernel * prev[-1] * spec.filters + spec.filters)
        elif isinstance(spec, Dense):
            counts.append(prev[0] * spec.units + spec.units)
        else:
            counts.append(0)
        prev = shape
    return counts


def sharknet_config(input_shape=(224, 224, 3), num_classes: int = 10, dropout_rate: float = 0.5,
                    seed: int = 0, class_names: Optional[list] = None) -> ModelConfig:
    h, w, _ = input_shape
    if h < 8 or w < 8:
        raise ConfigError(f"input must be at least 8x8, got {h}x{w}")
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if class_names is None:
        class_names = list(GENERA[:num_classes]) if num_classes <= len(GENERA) else [f"class_{i}" for i in range(num_classes)]
    if len(class_names) != num_classes:
        raise ConfigError("class_names length must equal num_classes")
    layers = [
        Conv2D(32, 3), MaxPool2D(2, 2),
        Conv2D(32, 3), MaxPool2D(2, 2),
        Conv2D(64, 3), MaxPool2D(2, 2),
        Flatten(),
        Dense(128, "relu"),
        Dropout(dropout_rate),
        Dense(num_classes, "none"),
    ]
    return ModelConfig(tuple(input_shape), layers, class_names, seed)


class Model:
    """Instantiated parameters for a :class:`ModelConfig`.

    ``parameters`` is a list of ``(layer_index, role, Tensor)`` triples with
    role one of ``kernel``/``weights``/``bias``.
    """

    def __init__(self, config: ModelConfig, parameters: Optional[list] = None):
        self.config = config
        self.training_mode = False
        self.shapes = layer_shapes(config)
        self.parameters = parameters if parameters is not None else self._init_parameters()
        self.dropout_rng = make_rng(config.seed, "dropout")

    def _init_parameters(self) -> list:
        # Glorot-uniform weights, zero biases.
        rng = make_rng(self.config.seed, "init")
        params = []
        prev = tuple(self.config.input_shape)
        for i, (spec, shape) in enumerate(zip(self.config.layers, self.shapes)):
            if isinstance(spec, Conv2D):
                k, cin, f = spec.kernel, prev[-1], spec.filters
                limit = np.sqrt(6.0 / (k * k * cin + k * k * f))
                params.append((i, "kernel", Tensor(rng.uniform(-limit, limit, (k, k, cin, f)), requires_grad=True)))
                params.append((i, "bias", Tensor(np.zeros(f), requires_grad=True)))
            elif isinstance(spec, Dense):
                fan_in, units = prev[0], spec.units
                limit = np.sqrt(6.0 / (fan_in + units))
                params.append((i, "weights", Tensor(rng.uniform(-limit, limit, (fan_in, units)), requires_grad=True)))
                params.append((i, "bias", Tensor(np.zeros(units), requires_grad=True)))
            prev = shape
        return params

    @property
    def named_parameters(self) -> list:
        return [(f"{i}.{role}", t) for i, role, t in self.parameters]

    def param(self, layer: int, role: str) -> Tensor:
        for i, r, t in self.parameters:
            if i == layer and r == role:
                return t
        raise KeyError((layer, role))

    @property
    def class_names(self) -> list:
        return self.config.class_names

    def train(self) -> "Model":
        self.training_mode = True
        return self

    def eval(self) -> "Model":
        self.training_mode = False
        return self

    def count_parameters(self) -> int:
        return sum(t.size for _, _, t in self.parameters)

    def zero_grad(self) -> None:
        for _, _, t in self.parameters:
            t.grad = None

    def state(self) -> list:
        return [t.data.copy() for _, _, t in self.parameters]

    def load_state(self, arrays: list) -> None:
        for (_, _, t), a in zip(self.parameters, arrays):
            t.data = np.array(a, dtype=t.dtype, copy=True)

    def __call__(self, batch, rng=None):
        return forward(self, batch, rng)


def count_parameters(model_or_config) -> int:
    if isinstance(model_or_config, Model):
        return model_or_config.count_parameters()
    return sum(layer_parameter_counts(model_or_config))


def build_sharknet(input_shape=(224, 224, 3), num_classes: int = 10, dropout_rate: float = 0.5,
                   seed: int = 0, class_names: Optional[list] = None) -> Model:
    """Build SharkNet-X: three conv/pool stages, Dense(128), dropout, logits."""
    return Model(sharknet_config(input_shape, num_classes, dropout_rate, seed, class_names))


def _run(model: Model, batch, rng=None, stop_at: Optional[int] = None) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.config.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match model input {model.config.input_shape}")
    params = {(i, r): t for i, r, t in model.parameters}
    for i, spec in enumerate(model.config.layers):
        if isinstance(spec, Conv2D):
            x = T.conv2d(x, params[i, "kernel"], params[i, "bias"], spec.stride, spec.padding)
            if spec.activation == "relu":
                x = T.relu(x)
        elif isinstance(spec, MaxPool2D):
            x = T.maxpool2d(x, spec.pool, spec.stride)
        elif isinstance(spec, Flatten):
            x = T.flatten(x)
        elif isinstance(spec, Dense):
            x = T.dense(x, params[i, "weights"], params[i, "bias"])
            if spec.activation == "relu":
                x = T.relu(x)
        elif isinstance(spec, Dropout):
            x = T.dropout(x, spec.rate, model.training_mode, rng or model.dropout_rng)
        if stop_at is not None and i == stop_at:
            return x
    return x


def forward(model: Model, batch, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits for ``batch`` (N x H x W x C); dropout is active iff training."""
    return _run(model, batch, rng)


def feature_layer_index(model: Model, units: int = 128) -> int:
    dense_idx = [i for i, s in enumerate(model.config.layers) if isinstance(s, Dense)]
    candidates = [i for i in dense_idx[:-1] if model.config.layers[i].units == units]
    if not candidates:
        raise ConfigError(f"model has no hidden {units}-unit dense layer to extract features from")
    return candidates[-1]


def extract_features(model: Model, batch, batch_size: int = 256) -> np.ndarray:
    """Post-ReLU activations of the hidden Dense(128) layer, in inference mode."""
    stop = feature_layer_index(model)
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    was_training = model.training_mode
    model.eval()
    try:
        with T.no_grad():
            chunks = [_run(model, data[s:s + batch_size], stop_at=stop).data
                      for s in range(0, len(data), batch_size)]
    finally:
        model.training_mode = was_training
    return np.concatenate(chunks, axis=0)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = model.training_mode
    model.eval()
    try:
        with T.no_grad():
            out = [forward(model, images[s:s + batch_size]).data for s in range(0, len(images), batch_size)]
    finally:
        model.training_mode = was_training
    return np.concatenate(out, axis=0)
