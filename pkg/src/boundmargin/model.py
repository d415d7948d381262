"""Layered differentiable classifiers (MLP and LeNet) and their checkpoints."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .rng import RngStream
from .tensor import Tensor

CHECKPOINT_SUFFIX = ".bmck"
FORMAT_VERSION = 1

LAYER_KINDS = ("dense", "conv", "pool", "activation", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: str = "max"
    window: int = 2
    activation: str = "relu"

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    class_count: int

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [_layer_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            layers = tuple(LayerSpec(**layer) for layer in d["layers"])
            spec = cls(tuple(d["input_shape"]), layers, int(d["class_count"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model spec: {exc}") from None
        layer_shapes(spec)
        return spec


def _layer_dict(layer: LayerSpec) -> dict:
    defaults = asdict(LayerSpec(layer.kind))
    return {k: v for k, v in asdict(layer).items() if k == "kind" or v != defaults[k]}


def layer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-sample shape after each layer boundary; entry 0 is the input shape.

    Raises ``ConfigError`` when consecutive layers do not compose.
    """
    shape = tuple(spec.input_shape)
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ConfigError(f"layer {i}: dense expects ({layer.in_features},), got {shape}")
            if layer.out_features < 1:
                raise ConfigError(f"layer {i}: width must be >= 1")
            shape = (layer.out_features,)
        elif layer.kind == "conv":
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ConfigError(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
            h = (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise ConfigError(f"layer {i}: conv output would be empty")
            shape = (layer.out_channels, h, w)
        elif layer.kind == "pool":
            if len(shape) != 3 or layer.window > min(shape[1:]):
                raise ConfigError(f"layer {i}: pool window {layer.window} does not fit {shape}")
            h = (shape[1] - layer.window) // layer.stride + 1
            w = (shape[2] - layer.window) // layer.stride + 1
            shape = (shape[0], h, w)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.activation not in T.ACTIVATIONS:
            raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
        shapes.append(shape)
    if shapes[-1] != (spec.class_count,):
        raise ConfigError(f"final layer emits {shapes[-1]}, expected ({spec.class_count},)")
    if spec.class_count < 2:
        raise ConfigError("class_count must be >= 2")
    return shapes


def _param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int, int]]:
    """``(name, shape, fan_in, fan_out)`` for each parameter in canonical order."""
    out = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            fi, fo = layer.in_features, layer.out_features
            out.append((f"{i}.weight", (fi, fo), fi, fo))
            out.append((f"{i}.bias", (fo,), fi, fo))
        elif layer.kind == "conv":
            k2 = layer.kernel * layer.kernel
            fi, fo = layer.in_channels * k2, layer.out_channels * k2
            out.append((f"{i}.weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel), fi, fo))
            out.append((f"{i}.bias", (layer.out_channels,), fi, fo))
    return out


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def frozen(self) -> "Model":
        """Copy whose parameters are constants; input gradients skip weight gradients."""
        return Model(self.spec, {k: Tensor(p.data) for k, p in self.params.items()}, self.seed, self.metadata)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=np.float64).reshape(p.shape)

    def fingerprint(self) -> str:
        h = hashlib.sha256(container.canonical_json(self.spec.to_dict()).encode())
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def predict(self, batch, chunk: int = 512) -> np.ndarray:
        """SoftMax scores for a numpy batch, evaluated without a tape."""
        batch = np.asarray(batch, dtype=np.float64)
        rows = []
        with T.no_grad():
            for start in range(0, batch.shape[0], chunk):
                rows.append(T.softmax(forward(self, batch[start : start + chunk])).data)
        return np.concatenate(rows) if rows else np.zeros((0, self.spec.class_count))


def init_params(spec: ModelSpec, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, drawn from the ``init`` stream."""
    rng = RngStream(seed, "init")
    params = {}
    for name, shape, fan_in, fan_out in _param_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = (2.0 * rng.uniform(shape) - 1.0) * limit
        params[name] = Tensor(data, requires_grad=True)
    return params


def build(spec: ModelSpec, seed: int) -> Model:
    layer_shapes(spec)
    return Model(spec, init_params(spec, seed), seed=int(seed))


def mlp_spec(widths, activation: str = "tanh") -> ModelSpec:
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ConfigError("an MLP needs at least input and output widths")
    if min(widths) < 1:
        raise ConfigError(f"widths must be >= 1, got {widths}")
    layers = []
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(LayerSpec("dense", in_features=fi, out_features=fo))
        if i < len(widths) - 2:
            layers.append(LayerSpec("activation", activation=activation))
    return ModelSpec((widths[0],), tuple(layers), widths[-1])


def build_mlp(widths, activation: str = "tanh", seed: int = 0) -> Model:
    return build(mlp_spec(widths, activation), seed)


def lenet_spec(input_shape=(1, 32, 32), activation: str = "relu", class_count: int = 10) -> ModelSpec:
    if tuple(input_shape) != (1, 32, 32):
        raise ConfigError(f"LeNet expects a 1x32x32 input, got {tuple(input_shape)}")
    act = LayerSpec("activation", activation=activation)
    layers = (
        LayerSpec("conv", in_channels=1, out_channels=6, kernel=5),
        act,
        LayerSpec("pool", pool="max", window=2, stride=2),
        LayerSpec("conv", in_channels=6, out_channels=16, kernel=5),
        act,
        LayerSpec("pool", pool="max", window=2, stride=2),
        LayerSpec("flatten"),
        LayerSpec("dense", in_features=400, out_features=120),
        act,
        LayerSpec("dense", in_features=120, out_features=84),
        act,
        LayerSpec("dense", in_features=84, out_features=class_count),
    )
    return ModelSpec((1, 32, 32), layers, class_count)


def build_lenet(input_shape=(1, 32, 32), activation: str = "relu", seed: int = 0) -> Model:
    return build(lenet_spec(input_shape, activation), seed)


def last_conv_boundary(spec: ModelSpec) -> int:
    """Boundary index just before the first dense layer after the last conv stage."""
    last_conv = max((i for i, layer in enumerate(spec.layers) if layer.kind == "conv"), default=None)
    if last_conv is None:
        raise ConfigError("model has no convolution layer")
    for i in range(last_conv + 1, len(spec.layers)):
        if spec.layers[i].kind in ("flatten", "dense"):
            return i
    raise ConfigError("no fully connected segment follows the last convolution")


def _apply(model: Model, index: int, x: Tensor) -> Tensor:
    layer = model.spec.layers[index]
    if layer.kind == "dense":
        return T.matmul(x, model.params[f"{index}.weight"]) + model.params[f"{index}.bias"]
    if layer.kind == "conv":
        out = T.conv2d(x, model.params[f"{index}.weight"], layer.stride, layer.padding)
        return out + T.reshape(model.params[f"{index}.bias"], (1, layer.out_channels, 1, 1))
    if layer.kind == "pool":
        return T.pool2d(x, layer.pool, layer.window, layer.stride)
    if layer.kind == "flatten":
        return T.reshape(x, (x.shape[0], -1))
    return T.activation(x, layer.activation)


def _run(model: Model, x: Tensor, start: int, stop: int) -> Tensor:
    for i in range(start, stop):
        x = _apply(model, i, x)
    return x


def _as_batch(model: Model, batch, shape: tuple[int, ...]) -> Tensor:
    x = T.as_tensor(batch)
    if x.ndim != len(shape) + 1 or tuple(x.shape[1:]) != tuple(shape):
        raise DimensionError(f"expected batch of shape (B, {', '.join(map(str, shape))}), got {x.shape}")
    return x


def forward(model: Model, batch) -> Tensor:
    """Logits ``B x n``, differentiable w.r.t. the batch and the parameters."""
    x = _as_batch(model, batch, model.spec.input_shape)
    return _run(model, x, 0, len(model.spec.layers))


def forward_split(model: Model, batch, at_layer: int) -> tuple[Tensor, Callable[[Tensor], Tensor]]:
    """Run the first ``at_layer`` layers; return the activation and a resume function."""
    n_layers = len(model.spec.layers)
    if not isinstance(at_layer, (int, np.integer)) or not 0 <= at_layer <= n_layers:
        raise ConfigError(f"layer boundary must be in [0, {n_layers}], got {at_layer!r}")
    shapes = layer_shapes(model.spec)
    x = _as_batch(model, batch, model.spec.input_shape)
    mid = _run(model, x, 0, at_layer)

    def resume(intermediate) -> Tensor:
        h = _as_batch(model, intermediate, shapes[at_layer])
        return _run(model, h, at_layer, n_layers)

    return mid, resume


# -- checkpoints ---------------------------------------------------------------

def save(model: Model, path, metadata: dict | None = None, extras: dict[str, np.ndarray] | None = None) -> None:
    """Write ``model`` (plus optional named extra arrays) as a ``.bmck`` container."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "dtype": "f64le",
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "param_order": list(model.params),
        "param_count": model.parameter_count(),
        "metadata": {**model.metadata, **(metadata or {})},
        "extras": sorted(extras or {}),
    }
    blobs = [(name, p.data) for name, p in model.params.items()]
    blobs += [(f"extra:{name}", np.asarray(extras[name])) for name in sorted(extras or {})]
    container.write(path, manifest, blobs)


@dataclass
class Checkpoint:
    model: Model
    manifest: dict
    extras: dict[str, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    manifest, arrays = container.read(path)
    if manifest.get("format_version") != FORMAT_VERSION or manifest.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a version-{FORMAT_VERSION} checkpoint")
    try:
        spec = ModelSpec.from_dict(manifest["spec"])
        order = manifest["param_order"]
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"{path}: bad manifest ({exc})") from None
    expected = {name: shape for name, shape, _, _ in _param_shapes(spec)}
    if list(expected) != order:
        raise FormatError(f"{path}: parameter order does not match the model spec")
    params = {}
    for name in order:
        if name not in arrays or tuple(arrays[name].shape) != expected[name]:
            raise FormatError(f"{path}: parameter {name!r} missing or mis-shaped")
        params[name] = Tensor(arrays[name], requires_grad=True)
    if sum(p.size for p in params.values()) * 8 != sum(
        b["nbytes"] for b in manifest["blobs"] if not b["name"].startswith("extra:")
    ):
        raise FormatError(f"{path}: parameter byte length mismatch")
    model = Model(spec, params, seed=int(manifest.get("seed", 0)), metadata=dict(manifest.get("metadata", {})))
    extras = {k[len("extra:") :]: v for k, v in arrays.items() if k.startswith("extra:")}
    return Checkpoint(model, manifest, extras)


def load(path) -> Model:
    return load_checkpoint(path).model
