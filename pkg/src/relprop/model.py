"""Portable JSON model format, shape-checked loading, and the forward pass.

The on-disk format (extension ``.lrp.json``) is a single JSON object::

    {"format_version": 1,
     "input_shape": [1, 28, 28], "input_low": -1.0, "input_high": 1.0,
     "class_count": 10, "metadata": {...},
     "layers": [{"type": "dense", "weights": {"shape": [...], "data": [...]},
                 "bias": {...}}, ...]}

Weights are flat JSON number arrays with an explicit shape.  Numbers are
written with the shortest round-trip decimal representation, so a load after
a save reproduces every parameter bit for bit.  Softmax is never part of the
format: the last layer's output is the logit vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    GeometryError,
    InvalidValueError,
    ParseError,
    RelpropError,
    SchemaError,
)
from .tensor import (
    BnParams,
    Tensor,
    as_tensor,
    avgpool,
    batchnorm_forward,
    conv2d_forward,
    conv_output_extent,
    dense_forward,
    flatten,
    maxpool,
    relu,
    _window_pair,
)

PLACEMENT_BEFORE = "before_activation"
PLACEMENT_AFTER = "after_activation"

FORMAT_VERSION = 1
MODEL_SUFFIX = ".lrp.json"


@dataclass(frozen=True)
class Dense:
    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        w = as_tensor(self.weights)
        b = as_tensor(self.bias)
        if w.ndim != 2:
            raise DimensionError(f"dense weights must be rank 2, got {list(w.shape)}")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise DimensionError(
                f"dense bias {list(b.shape)} does not match weight rows {w.shape[0]}"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class Conv2D:
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k = as_tensor(self.kernel)
        b = as_tensor(self.bias)
        if k.ndim != 4:
            raise DimensionError(f"conv kernel must be rank 4, got {list(k.shape)}")
        if b.ndim != 1 or b.shape[0] != k.shape[0]:
            raise DimensionError(
                f"conv bias {list(b.shape)} does not match {k.shape[0]} output channels"
            )
        if int(self.stride) < 1:
            raise InvalidValueError(f"stride must be >= 1, got {self.stride}")
        if int(self.padding) < 0:
            raise InvalidValueError(f"padding must be >= 0, got {self.padding}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "padding", int(self.padding))


@dataclass(frozen=True)
class BatchNorm:
    params: BnParams
    placement: str | None = None
    bypass: bool = False

    def __post_init__(self):
        if self.placement not in (None, PLACEMENT_BEFORE, PLACEMENT_AFTER):
            raise InvalidValueError(
                f"batchnorm placement must be '{PLACEMENT_BEFORE}' or "
                f"'{PLACEMENT_AFTER}', got {self.placement!r}"
            )


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: tuple
    stride: int

    def __post_init__(self):
        object.__setattr__(self, "window", _window_pair(self.window))
        if int(self.stride) < 1:
            raise InvalidValueError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "stride", int(self.stride))


@dataclass(frozen=True)
class AvgPool:
    window: tuple
    stride: int

    def __post_init__(self):
        object.__setattr__(self, "window", _window_pair(self.window))
        if int(self.stride) < 1:
            raise InvalidValueError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "stride", int(self.stride))


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Dense | Conv2D | BatchNorm | ReLU | MaxPool | AvgPool | Flatten


def layer_output_shape(layer: Layer, in_shape: tuple, index: int) -> tuple:
    """Shape produced by one layer, raising with the offending layer index."""
    try:
        if isinstance(layer, Dense):
            if len(in_shape) != 1 or in_shape[0] != layer.weights.shape[1]:
                raise DimensionError(
                    f"dense expects input shape [{layer.weights.shape[1]}], "
                    f"got {list(in_shape)}"
                )
            return (layer.weights.shape[0],)
        if isinstance(layer, Conv2D):
            oc, ic, kh, kw = layer.kernel.shape
            if len(in_shape) != 3 or in_shape[0] != ic:
                raise DimensionError(
                    f"conv expects input shape [{ic}, h, w], got {list(in_shape)}"
                )
            oh = conv_output_extent(in_shape[1], kh, layer.stride, layer.padding)
            ow = conv_output_extent(in_shape[2], kw, layer.stride, layer.padding)
            return (oc, oh, ow)
        if isinstance(layer, BatchNorm):
            n = len(layer.params)
            total = int(np.prod(in_shape))
            if len(in_shape) == 1 and n == in_shape[0]:
                return in_shape
            if len(in_shape) == 3 and n in (in_shape[0], total):
                return in_shape
            raise DimensionError(
                f"batchnorm over {n} channels does not match input {list(in_shape)}"
            )
        if isinstance(layer, (MaxPool, AvgPool)):
            if len(in_shape) != 3:
                raise DimensionError(f"pooling expects rank-3 input, got {list(in_shape)}")
            th, tw = layer.window
            oh = conv_output_extent(in_shape[1], th, layer.stride)
            ow = conv_output_extent(in_shape[2], tw, layer.stride)
            return (in_shape[0], oh, ow)
        if isinstance(layer, Flatten):
            return (int(np.prod(in_shape)),)
        if isinstance(layer, ReLU):
            return in_shape
    except (DimensionError, GeometryError) as e:
        raise type(e)(f"layer {index} ({layer_kind(layer)}): {e}") from None
    raise SchemaError(f"layer {index}: unknown layer object {type(layer).__name__}")


def propagate_shapes(layers, input_shape) -> list:
    """Symbolic shape propagation; returns the layer-boundary shapes (len+1)."""
    shapes = [tuple(int(e) for e in input_shape)]
    for i, layer in enumerate(layers):
        shapes.append(layer_output_shape(layer, shapes[-1], i))
    return shapes


@dataclass
class Network:
    """Ordered layer sequence plus input-bounds metadata; immutable after load."""

    layers: list
    input_shape: tuple
    input_low: float
    input_high: float
    class_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(e) for e in self.input_shape)
        self.input_low = float(self.input_low)
        self.input_high = float(self.input_high)
        self.class_count = int(self.class_count)
        if not self.input_low < self.input_high:
            raise InvalidValueError(
                f"input_low must be below input_high, got [{self.input_low}, {self.input_high}]"
            )
        if self.class_count < 1:
            raise InvalidValueError(f"class_count must be >= 1, got {self.class_count}")
        shapes = propagate_shapes(self.layers, self.input_shape)
        if shapes[-1] != (self.class_count,):
            raise DimensionError(
                f"network output shape {list(shapes[-1])} does not match "
                f"class_count {self.class_count}"
            )
        self.activation_shapes = shapes

    def bn_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]


@dataclass
class ForwardResult:
    logits: Tensor
    activations: list
    pool_argmax: dict


def forward(network: Network, x: Tensor) -> ForwardResult:
    """Run the network, retaining every activation and max-pool winner map."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != network.input_shape:
        raise DimensionError(
            f"input shape {list(x.shape)} does not match network input "
            f"{list(network.input_shape)}"
        )
    activations = [x]
    argmaxes = {}
    for i, layer in enumerate(network.layers):
        x = activations[-1]
        try:
            if isinstance(layer, Dense):
                out = dense_forward(layer.weights, layer.bias, x)
            elif isinstance(layer, Conv2D):
                out = conv2d_forward(layer.kernel, layer.bias, x, layer.stride, layer.padding)
            elif isinstance(layer, BatchNorm):
                out = batchnorm_forward(layer.params, x)
            elif isinstance(layer, ReLU):
                out = relu(x)
            elif isinstance(layer, MaxPool):
                out, argmaxes[i] = maxpool(x, layer.window, layer.stride)
            elif isinstance(layer, AvgPool):
                out = avgpool(x, layer.window, layer.stride)
            elif isinstance(layer, Flatten):
                out = flatten(x)
            else:
                raise SchemaError(f"unknown layer object {type(layer).__name__}")
        except RelpropError as e:
            raise type(e)(f"layer {i} ({layer_kind(layer)}): {e}") from None
        activations.append(out)
    return ForwardResult(activations[-1], activations, argmaxes)


def normalize_pixels(raw: Tensor) -> Tensor:
    """Map raw pixel values in [0, 255] onto [-1, 1]: ((x/255) - 0.5)/0.5."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 255.0):
        bad = arr.min() if arr.min() < 0.0 else arr.max()
        raise InvalidValueError(f"pixel value {bad} outside [0, 255]")
    return (arr / 255.0 - 0.5) / 0.5


# ---------------------------------------------------------------------------
# serialization

_KIND_BY_TYPE = {
    Dense: "dense",
    Conv2D: "conv2d",
    BatchNorm: "batchnorm",
    ReLU: "relu",
    MaxPool: "maxpool",
    AvgPool: "avgpool",
    Flatten: "flatten",
}


def layer_kind(layer: Layer) -> str:
    return _KIND_BY_TYPE.get(type(layer), type(layer).__name__.lower())


def _tensor_to_dict(arr: Tensor) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _tensor_from_dict(obj, where: str) -> Tensor:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected a tensor object with 'shape' and 'data'")
    for key in ("shape", "data"):
        if key not in obj:
            raise SchemaError(f"{where}: missing field '{key}'")
    try:
        return as_tensor(obj["data"], obj["shape"])
    except (DimensionError, InvalidValueError) as e:
        raise type(e)(f"{where}: {e}") from None


def _layer_to_dict(layer: Layer) -> dict:
    d = {"type": layer_kind(layer)}
    if isinstance(layer, Dense):
        d["weights"] = _tensor_to_dict(layer.weights)
        d["bias"] = _tensor_to_dict(layer.bias)
    elif isinstance(layer, Conv2D):
        d["kernel"] = _tensor_to_dict(layer.kernel)
        d["bias"] = _tensor_to_dict(layer.bias)
        d["stride"] = layer.stride
        d["padding"] = layer.padding
    elif isinstance(layer, BatchNorm):
        p = layer.params
        d["gamma"] = _tensor_to_dict(p.gamma)
        d["beta"] = _tensor_to_dict(p.beta)
        d["running_mean"] = _tensor_to_dict(p.running_mean)
        d["running_std"] = _tensor_to_dict(p.running_std)
        if layer.placement is not None:
            d["placement"] = layer.placement
        if layer.bypass:
            d["bypass"] = True
    elif isinstance(layer, (MaxPool, AvgPool)):
        d["window"] = list(layer.window)
        d["stride"] = layer.stride
    return d


def _layer_from_dict(obj, index: int) -> Layer:
    where = f"layers[{index}]"
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    kind = obj.get("type")
    if kind is None:
        raise SchemaError(f"{where}: missing field 'type'")

    def need(key):
        if key not in obj:
            raise SchemaError(f"{where}: missing field '{key}'")
        return obj[key]

    try:
        if kind == "dense":
            return Dense(
                _tensor_from_dict(need("weights"), f"{where}.weights"),
                _tensor_from_dict(need("bias"), f"{where}.bias"),
            )
        if kind == "conv2d":
            return Conv2D(
                _tensor_from_dict(need("kernel"), f"{where}.kernel"),
                _tensor_from_dict(need("bias"), f"{where}.bias"),
                stride=int(obj.get("stride", 1)),
                padding=int(obj.get("padding", 0)),
            )
        if kind == "batchnorm":
            params = BnParams(
                _tensor_from_dict(need("gamma"), f"{where}.gamma"),
                _tensor_from_dict(need("beta"), f"{where}.beta"),
                _tensor_from_dict(need("running_mean"), f"{where}.running_mean"),
                _tensor_from_dict(need("running_std"), f"{where}.running_std"),
            )
            return BatchNorm(
                params,
                placement=obj.get("placement"),
                bypass=bool(obj.get("bypass", False)),
            )
        if kind == "relu":
            return ReLU()
        if kind == "maxpool":
            return MaxPool(tuple(need("window")), int(need("stride")))
        if kind == "avgpool":
            return AvgPool(tuple(need("window")), int(need("stride")))
        if kind == "flatten":
            return Flatten()
    except (DimensionError, InvalidValueError) as e:
        raise type(e)(f"{where}: {e}") from None
    raise SchemaError(f"{where}: unknown layer type {kind!r}")


def network_to_dict(network: Network) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_shape": list(network.input_shape),
        "input_low": network.input_low,
        "input_high": network.input_high,
        "class_count": network.class_count,
        "metadata": network.metadata,
        "layers": [_layer_to_dict(l) for l in network.layers],
    }


def network_from_dict(doc) -> Network:
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    for key in ("input_shape", "input_low", "input_high", "class_count", "layers"):
        if key not in doc:
            raise SchemaError(f"missing field '{key}'")
    if not isinstance(doc["layers"], list):
        raise SchemaError("'layers' must be an array")
    layers = [_layer_from_dict(obj, i) for i, obj in enumerate(doc["layers"])]
    return Network(
        layers=layers,
        input_shape=doc["input_shape"],
        input_low=doc["input_low"],
        input_high=doc["input_high"],
        class_count=doc["class_count"],
        metadata=doc.get("metadata", {}),
    )


def load_model(path) -> Network:
    text = Path(path).read_text(encoding="ascii")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return network_from_dict(doc)


def save_model(network: Network, path) -> None:
    text = json.dumps(network_to_dict(network), allow_nan=False, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="ascii")


def annotate_bypass(network: Network) -> Network:
    """Copy of the network with every BN layer marked relevance-transparent."""
    layers = [
        replace(l, bypass=True) if isinstance(l, BatchNorm) else l for l in network.layers
    ]
    return Network(
        layers,
        network.input_shape,
        network.input_low,
        network.input_high,
        network.class_count,
        dict(network.metadata),
    )
