"""The SSAD network: enhancer MLP -> normalizer -> bias-free classifier.

The anomaly score of a row is the squared norm of the classifier output.
Hidden layers use the recipe's activation except the last, which feeds the
normalizer linearly unless ``final_activation`` is set.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .tensor_core import (
    DEFAULT_EPS,
    DEFAULT_MOMENTUM,
    Activation,
    BatchNormLayer,
    DenseLayer,
    LayerNormLayer,
    as_matrix,
)

CHECKPOINT_FORMAT = "anoonly-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NormalizerKind:
    kind: str = "batchnorm"  # batchnorm | layernorm | none
    affine: bool = False

    def __post_init__(self):
        if self.kind not in ("batchnorm", "layernorm", "none"):
            raise ConfigError(f"unknown normalizer kind {self.kind!r}")
        if self.affine and self.kind != "batchnorm":
            raise ConfigError("only batch norm carries affine parameters")

    @classmethod
    def parse(cls, name: str) -> "NormalizerKind":
        """Accepts the ablation labels: none / ln / bn* / bn."""
        key = name.strip().lower()
        table = {
            "none": cls("none"), "w/o bn": cls("none"), "wo_bn": cls("none"),
            "ln": cls("layernorm"), "layernorm": cls("layernorm"),
            "bn*": cls("batchnorm", False), "bn_star": cls("batchnorm", False),
            "batchnorm": cls("batchnorm", False),
            "bn": cls("batchnorm", True), "bn_affine": cls("batchnorm", True),
        }
        if key not in table:
            raise ConfigError(f"unknown normalizer label {name!r}")
        return table[key]

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "layernorm":
            return "ln"
        return "bn" if self.affine else "bn*"


@dataclass(frozen=True)
class ModelRecipe:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 32)
    rep_dim: int = 16
    activation: str = "relu"
    normalizer: NormalizerKind = field(default_factory=lambda: NormalizerKind("batchnorm", affine=True))
    seed: int = 0
    classifier_bias: bool = False
    final_activation: bool = False
    bn_eps: float = DEFAULT_EPS
    bn_momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if isinstance(self.normalizer, str):
            object.__setattr__(self, "normalizer", NormalizerKind.parse(self.normalizer))
        elif isinstance(self.normalizer, dict):
            object.__setattr__(self, "normalizer", NormalizerKind(**self.normalizer))
        dims = (self.input_dim, self.rep_dim, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all model dims must be >= 1, got {dims}")
        if self.activation not in Activation.NAMES:
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelRecipe":
        return cls(**d)


class SSADModel:
    def __init__(self, recipe: ModelRecipe, enhancer: list[DenseLayer],
                 normalizer, classifier: DenseLayer):
        self.recipe = recipe
        self.enhancer = enhancer
        n = len(enhancer)
        self.activations = [
            Activation(recipe.activation if (i < n - 1 or recipe.final_activation) else "identity")
            for i in range(n)
        ]
        self.normalizer = normalizer
        self.classifier = classifier
        self.mode = "train"
        self.freeze_bn_stats = False
        self._hidden: np.ndarray | None = None
        self._cached = False
        self.input_grad: np.ndarray | None = None

    # -- modes -------------------------------------------------------------
    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    @property
    def hidden_dim(self) -> int:
        return self.enhancer[-1].out_dim if self.enhancer else self.recipe.input_dim

    @property
    def hidden(self) -> np.ndarray:
        """Enhancer output (pre-normalizer) of the last forward."""
        if self._hidden is None:
            raise StateError("no forward pass has run")
        return self._hidden

    # -- forward / backward ------------------------------------------------
    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, self.recipe.input_dim)
        h = x
        for layer, act in zip(self.enhancer, self.activations):
            h = act.forward(layer.forward(h))
        self._hidden = h
        norm = self.normalizer
        if isinstance(norm, BatchNormLayer):
            if self.mode == "eval":
                h = norm.forward_eval(h)
            elif self.freeze_bn_stats:
                h = norm.forward_frozen(h)
            else:
                h = norm.forward_train(h)
        elif isinstance(norm, LayerNormLayer):
            h = norm.forward(h)
        out = self.classifier.forward(h)
        self._cached = self.mode == "train"
        return out

    def score(self, x) -> np.ndarray:
        out = self.forward(x)
        return np.einsum("ij,ij->i", out, out)

    def backward(self, grad_output, grad_hidden=None) -> dict[str, np.ndarray]:
        """Backpropagate ``grad_output`` (d loss / d classifier output).

        ``grad_hidden`` is an optional extra gradient injected at the enhancer
        output, used by the explicit clustering loss. Returns gradients keyed
        by parameter name; the input gradient lands in ``self.input_grad``.
        """
        if not self._cached:
            raise StateError("backward needs a train-mode forward first")
        g = self.classifier.backward(grad_output)
        if self.normalizer is not None:
            g = self.normalizer.backward(g)
        if grad_hidden is not None:
            g = g + as_matrix(grad_hidden, self.hidden_dim)
        for layer, act in zip(reversed(self.enhancer), reversed(self.activations)):
            g = layer.backward(act.backward(g))
        self.input_grad = g
        self._cached = False
        return self.gradients()

    # -- parameter access ----------------------------------------------------
    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in construction order (live references)."""
        out = []
        for i, layer in enumerate(self.enhancer):
            out.append((f"enhancer.{i}.weight", layer.weight))
            out.append((f"enhancer.{i}.bias", layer.bias))
        if isinstance(self.normalizer, BatchNormLayer) and self.normalizer.affine:
            out.append(("normalizer.gamma", self.normalizer.gamma))
            out.append(("normalizer.beta", self.normalizer.beta))
        out.append(("classifier.weight", self.classifier.weight))
        if self.classifier.bias is not None:
            out.append(("classifier.bias", self.classifier.bias))
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        grads = {}
        for i, layer in enumerate(self.enhancer):
            grads[f"enhancer.{i}.weight"] = layer.grad_weight
            grads[f"enhancer.{i}.bias"] = layer.grad_bias
        if isinstance(self.normalizer, BatchNormLayer) and self.normalizer.affine:
            grads["normalizer.gamma"] = self.normalizer.grad_gamma
            grads["normalizer.beta"] = self.normalizer.grad_beta
        grads["classifier.weight"] = self.classifier.grad_weight
        if self.classifier.bias is not None:
            grads["classifier.bias"] = self.classifier.grad_bias
        return grads

    def weight_names(self) -> list[str]:
        """Names of the weight matrices covered by L2 regularization."""
        return [f"enhancer.{i}.weight" for i in range(len(self.enhancer))] + ["classifier.weight"]

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for _, p in self.named_parameters()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.parameter_count():
            raise ShapeError("flat parameter vector has the wrong length")
        i = 0
        for _, p in self.named_parameters():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[name].reshape(-1) for name, _ in self.named_parameters()])

    def copy(self) -> "SSADModel":
        return from_checkpoint(to_checkpoint(self))


def build_model(recipe: ModelRecipe) -> SSADModel:
    rng = np.random.default_rng(recipe.seed)
    enhancer = []
    prev = recipe.input_dim
    for width in recipe.hidden_dims:
        enhancer.append(DenseLayer.init(prev, width, rng, bias=True))
        prev = width
    kind = recipe.normalizer
    if kind.kind == "batchnorm":
        normalizer = BatchNormLayer(prev, eps=recipe.bn_eps, affine=kind.affine,
                                    momentum=recipe.bn_momentum)
    elif kind.kind == "layernorm":
        normalizer = LayerNormLayer(prev, eps=recipe.bn_eps)
    else:
        normalizer = None
    classifier = DenseLayer.init(prev, recipe.rep_dim, rng, bias=recipe.classifier_bias)
    return SSADModel(recipe, enhancer, normalizer, classifier)


def to_checkpoint(model: SSADModel) -> dict:
    ckpt = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "recipe": model.recipe.to_dict(),
        "params": [
            {"name": name, "shape": list(p.shape), "data": p.reshape(-1).tolist()}
            for name, p in model.named_parameters()
        ],
    }
    if isinstance(model.normalizer, BatchNormLayer):
        ckpt["running_mean"] = model.normalizer.running_mean.tolist()
        ckpt["running_var"] = model.normalizer.running_var.tolist()
    return ckpt


def from_checkpoint(ckpt: dict) -> SSADModel:
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigError("unrecognized checkpoint format or version")
    model = build_model(ModelRecipe.from_dict(ckpt["recipe"]))
    params = dict(model.named_parameters())
    names = [entry["name"] for entry in ckpt["params"]]
    if names != list(params):
        raise ConfigError("checkpoint parameter order does not match the recipe")
    for entry in ckpt["params"]:
        target = params[entry["name"]]
        target[...] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    if isinstance(model.normalizer, BatchNormLayer):
        model.normalizer.running_mean = np.asarray(ckpt["running_mean"], dtype=np.float64)
        model.normalizer.running_var = np.asarray(ckpt["running_var"], dtype=np.float64)
    return model


def save_checkpoint(model: SSADModel, path) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(model)))


def load_checkpoint(path) -> SSADModel:
    return from_checkpoint(json.loads(Path(path).read_text()))
