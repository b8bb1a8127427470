"""Sequential CNN classifiers with a feature tap for distillation."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ShapeError, ValidationError
from . import autodiff as ad
from .autodiff import Tensor

LAYER_TYPES = ("conv", "dense", "relu", "maxpool", "flatten")


@dataclass
class ModelSpec:
    """Layer list plus the index of the layer whose output is the feature tap.

    Each layer is a dict with a ``type`` key:

    * ``conv``: ``in``, ``out``, ``kernel``, ``stride`` (1), ``padding`` (0)
    * ``dense``: ``in``, ``out``
    * ``relu``, ``flatten``
    * ``maxpool``: ``size``
    """

    name: str
    layers: list[dict]
    feature_tap: int
    input_shape: tuple[int, ...] = (1, 28, 28)
    n_classes: int = 10

    def __post_init__(self):
        for layer in self.layers:
            if layer.get("type") not in LAYER_TYPES:
                raise ValidationError(f"unknown layer {layer!r}")
        if not 0 <= self.feature_tap < len(self.layers):
            raise ValidationError("feature_tap is not a layer index")
        self.input_shape = tuple(self.input_shape)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": copy.deepcopy(self.layers),
            "feature_tap": self.feature_tap,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], copy.deepcopy(d["layers"]), d["feature_tap"],
                   tuple(d.get("input_shape", (1, 28, 28))), d.get("n_classes", 10))

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer."""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            t = layer["type"]
            if t == "conv":
                c, h, w = shape
                if c != layer["in"]:
                    raise ShapeError(f"conv expects {layer['in']} channels, gets {c}")
                k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("padding", 0)
                shape = (layer["out"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
            elif t == "maxpool":
                c, h, w = shape
                shape = (c, h // layer["size"], w // layer["size"])
            elif t == "flatten":
                shape = (int(np.prod(shape)),)
            elif t == "dense":
                if shape != (layer["in"],):
                    raise ShapeError(f"dense expects ({layer['in']},), gets {shape}")
                shape = (layer["out"],)
            shapes.append(shape)
        return shapes

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.output_shapes()[self.feature_tap]


def _conv(i, o, k=3, p=0):
    return {"type": "conv", "in": i, "out": o, "kernel": k, "stride": 1, "padding": p}


RELU, FLAT = {"type": "relu"}, {"type": "flatten"}


def _pool(s):
    return {"type": "maxpool", "size": s}


def student_spec() -> ModelSpec:
    """1,682 parameters; taps a (12, 4, 4) feature map."""
    return ModelSpec(
        "student",
        [_conv(1, 10, 3, 1), RELU, _pool(2),           # 10 x 14 x 14
         _conv(10, 12, 3, 0), RELU, _pool(3),          # 12 x 4 x 4  <- tap
         _pool(2), FLAT, {"type": "dense", "in": 48, "out": 10}],
        feature_tap=5,
    )


def teacher_spec() -> ModelSpec:
    """6,314 parameters; a 1x1 projection brings the tap to (12, 4, 4)."""
    return ModelSpec(
        "teacher",
        [_conv(1, 16, 3, 1), RELU, _pool(2),           # 16 x 14 x 14
         _conv(16, 36, 3, 0), RELU, _pool(3),          # 36 x 4 x 4
         _conv(36, 12, 1, 0), RELU,                    # 12 x 4 x 4  <- tap
         _pool(2), FLAT, {"type": "dense", "in": 48, "out": 10}],
        feature_tap=7,
    )


def cifar_student_spec() -> ModelSpec:
    """Configuration sketch for 32x32x3 inputs with a (32, 8, 8) tap."""
    return ModelSpec(
        "cifar_student",
        [_conv(3, 32, 3, 1), RELU, _pool(2), _conv(32, 32, 3, 1), RELU, _pool(2),
         _pool(2), FLAT, {"type": "dense", "in": 512, "out": 10}],
        feature_tap=5, input_shape=(3, 32, 32),
    )


ARCHITECTURES = {
    "student": student_spec,
    "teacher": teacher_spec,
    "cifar_student": cifar_student_spec,
}


def get_spec(name: str) -> ModelSpec:
    try:
        return ARCHITECTURES[name]()
    except KeyError:
        raise ValidationError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "Model":
        """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
        spec.output_shapes()
        params = {}
        for idx, layer in enumerate(spec.layers):
            if layer["type"] == "conv":
                shape = (layer["out"], layer["in"], layer["kernel"], layer["kernel"])
                fan_in = layer["in"] * layer["kernel"] ** 2
            elif layer["type"] == "dense":
                shape = (layer["out"], layer["in"])
                fan_in = layer["in"]
            else:
                continue
            bound = math.sqrt(6.0 / fan_in)
            params[f"{idx}.weight"] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
            params[f"{idx}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
        return cls(spec, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze(self) -> "Model":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def clone(self) -> "Model":
        params = {k: Tensor(v.values.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Model(ModelSpec.from_dict(self.spec.to_dict()), params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.values for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if self.params[k].values.shape != v.shape:
                raise ShapeError(f"{k}: expected {self.params[k].values.shape}, got {v.shape}")
            self.params[k].values = np.array(v, dtype=np.float64)
            self.params[k].zero_grad()

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Return ``(tapped features, logits)`` for a batch shaped (N, C, H, W).

        Spatial layers run channels-last internally; the tapped feature and the
        flatten order are channel-major (NCHW).
        """
        x = ad.as_tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"expected input (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}")
        x = ad.transpose(x, (0, 2, 3, 1))
        spatial = True
        feature = None
        for idx, layer in enumerate(self.spec.layers):
            t = layer["type"]
            if t == "conv":
                x = ad.conv2d_nhwc(x, self.params[f"{idx}.weight"], self.params[f"{idx}.bias"],
                                   layer.get("stride", 1), layer.get("padding", 0))
            elif t == "dense":
                x = ad.linear(x, self.params[f"{idx}.weight"], self.params[f"{idx}.bias"])
            elif t == "relu":
                x = ad.relu(x)
            elif t == "maxpool":
                x = ad.maxpool2d_nhwc(x, layer["size"])
            elif t == "flatten":
                x = ad.flatten(ad.transpose(x, (0, 3, 1, 2)))
                spatial = False
            if idx == self.spec.feature_tap:
                feature = ad.transpose(x, (0, 3, 1, 2)) if spatial else x
        return feature, x

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.forward(images[start:start + batch_size])[1].values.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


def parameter_count(model: Model | ModelSpec) -> int:
    """Number of trainable scalars."""
    if isinstance(model, Model):
        return int(sum(p.values.size for p in model.params.values()))
    total = 0
    for layer in model.layers:
        if layer["type"] == "conv":
            total += layer["out"] * (layer["in"] * layer["kernel"] ** 2 + 1)
        elif layer["type"] == "dense":
            total += layer["out"] * (layer["in"] + 1)
    return total
