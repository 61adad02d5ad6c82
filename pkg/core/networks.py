"""
Network Definitions
Feature extractor g, classifier f, domain discriminator D and the
per-class discriminator bank C_k, plus checkpoint save/load
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from core.autodiff import Parameter, Tensor, as_tensor, linear, log_softmax, no_grad, relu
from core.errors import ConfigurationError, ContractError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (7, 7, 7)
ARCHITECTURE_KEY = "__architecture__"
ITERATION_KEY = "__iteration__"


class DenseLayer:
    """Fully connected layer with fan-in uniform init and zero bias."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 name: str, activation: bool = True):
        if in_features <= 0 or out_features <= 0:
            raise ConfigurationError(f"{name}: layer sizes must be positive, got {in_features}x{out_features}")
        bound = np.sqrt(6.0 / in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros((1, out_features)), name=f"{name}.bias")
        self.activation = activation

    def __call__(self, x) -> Tensor:
        out = linear(x, self.weight.tensor, self.bias.tensor)
        return relu(out) if self.activation else out

    def parameters(self) -> list:
        return [self.weight, self.bias]


class MLP:
    """ReLU hidden layers followed by a linear output layer."""

    def __init__(self, input_dim: int, hidden: Sequence[int], output_dim: int,
                 rng: np.random.Generator, name: str):
        self.name = name
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = list(hidden)
        sizes = [input_dim, *self.hidden, output_dim]
        self.layers = [
            DenseLayer(sizes[i], sizes[i + 1], rng, name=f"{name}.{i}", activation=i < len(sizes) - 2)
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x) -> Tensor:
        out = as_tensor(x)
        if out.cols != self.input_dim:
            raise ShapeError(self.name, out.shape, (out.rows, self.input_dim), "input width mismatch")
        for layer in self.layers:
            out = layer(out)
        return out

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class ModelBundle:
    g: MLP
    f: MLP
    d: MLP
    c: list
    hidden: list = field(default_factory=lambda: list(DEFAULT_HIDDEN))

    @property
    def input_dim(self) -> int:
        return self.g.input_dim

    @property
    def feature_dim(self) -> int:
        return self.g.output_dim

    @property
    def num_classes(self) -> int:
        return self.f.output_dim

    def feature_params(self) -> list:
        return self.g.parameters()

    def classifier_params(self) -> list:
        return self.f.parameters()

    def domain_params(self) -> list:
        return self.d.parameters()

    def class_disc_params(self) -> list:
        return [p for head in self.c for p in head.parameters()]

    def parameters(self) -> list:
        return self.feature_params() + self.classifier_params() + self.domain_params() + self.class_disc_params()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
        }

    def parameter_norms(self) -> dict:
        return {name: float(np.linalg.norm(p.values)) for name, p in self.named_parameters().items()}


def init_bundle(
    input_dim: int,
    feature_dim: int,
    num_classes: int,
    hidden_spec: Sequence[int] = DEFAULT_HIDDEN,
    seed: int = 0,
) -> ModelBundle:
    """
    Build g, f, D and one C_k per class from a single seeded generator.

    Layers are initialized in the order g, f, D, C_0 ... C_{K-1}, so the same
    seed always yields the same parameters.
    """
    if num_classes < 2:
        raise ConfigurationError(f"at least two classes are required, got {num_classes}")
    rng = np.random.default_rng(seed)
    hidden = list(hidden_spec)
    return ModelBundle(
        g=MLP(input_dim, hidden, feature_dim, rng, name="g"),
        f=MLP(feature_dim, hidden, num_classes, rng, name="f"),
        d=MLP(feature_dim, hidden, 2, rng, name="d"),
        c=[MLP(feature_dim, hidden, 2, rng, name=f"c{k}") for k in range(num_classes)],
        hidden=hidden,
    )


# Forward passes

def features(bundle: ModelBundle, x) -> Tensor:
    return bundle.g(x)


def classify(bundle: ModelBundle, z) -> Tensor:
    return bundle.f(z)


def discriminate_domain(bundle: ModelBundle, z) -> Tensor:
    """Domain logits; column 0 is source, column 1 is target."""
    return bundle.d(z)


def discriminate_class(bundle: ModelBundle, k: int, z) -> Tensor:
    if not 0 <= k < len(bundle.c):
        raise IndexError(f"class discriminator {k} does not exist (K={len(bundle.c)})")
    return bundle.c[k](z)


def embed(bundle: ModelBundle, x) -> np.ndarray:
    """Raw g-features as an array, never recorded."""
    with no_grad():
        return features(bundle, x).numpy()


def predict_proba(bundle: ModelBundle, x) -> np.ndarray:
    with no_grad():
        return np.exp(log_softmax(classify(bundle, features(bundle, x))).values)


def predict(bundle: ModelBundle, x) -> np.ndarray:
    """argmax of f(g(x)); ties resolve to the lowest class index."""
    return np.argmax(predict_proba(bundle, x), axis=1)


# Checkpoints

def save_checkpoint(bundle: ModelBundle, path: Union[str, Path], iteration: Optional[int] = None) -> Path:
    """
    Write every parameter, its Adam moments and step count to an .npz file.

    Keys are parameter names (e.g. `g.0.weight`) with `.adam_m`, `.adam_v`
    and `.steps` suffixes for optimizer state.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {ARCHITECTURE_KEY: np.array(json.dumps(bundle.architecture()))}
    if iteration is not None:
        arrays[ITERATION_KEY] = np.array(iteration, dtype=np.int64)
    for name, param in bundle.named_parameters().items():
        arrays[name] = param.values
        arrays[f"{name}.adam_m"] = param.adam_m
        arrays[f"{name}.adam_v"] = param.adam_v
        arrays[f"{name}.steps"] = np.array(param.step_count, dtype=np.int64)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    return path


def read_architecture(path: Union[str, Path]) -> dict:
    with np.load(path) as archive:
        if ARCHITECTURE_KEY not in archive.files:
            raise ContractError(f"{path}: not a model checkpoint")
        return json.loads(str(archive[ARCHITECTURE_KEY]))


def load_checkpoint(bundle: ModelBundle, path: Union[str, Path]) -> Optional[int]:
    """
    Restore parameters and optimizer state in place.

    Returns:
        The iteration stored in the checkpoint, if any
    """
    with np.load(path) as archive:
        stored = json.loads(str(archive[ARCHITECTURE_KEY])) if ARCHITECTURE_KEY in archive.files else None
        if stored != bundle.architecture():
            raise ContractError(f"{path}: architecture {stored} does not match bundle {bundle.architecture()}")
        for name, param in bundle.named_parameters().items():
            values = archive[name]
            if values.shape != param.shape:
                raise ShapeError("load_checkpoint", param.shape, values.shape, name)
            param.tensor.values[...] = values
            param.adam_m[...] = archive[f"{name}.adam_m"]
            param.adam_v[...] = archive[f"{name}.adam_v"]
            param.step_count = int(archive[f"{name}.steps"])
            param.zero_grad()
        iteration = int(archive[ITERATION_KEY]) if ITERATION_KEY in archive.files else None
    logger.debug("restored %d parameters from %s", len(bundle.named_parameters()), path)
    return iteration


def load_bundle(path: Union[str, Path]) -> ModelBundle:
    """Rebuild a bundle from a checkpoint alone."""
    arch = read_architecture(path)
    bundle = init_bundle(arch["input_dim"], arch["feature_dim"], arch["num_classes"], arch["hidden"])
    load_checkpoint(bundle, path)
    return bundle
