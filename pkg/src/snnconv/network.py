"""Layer and graph representation plus exact ANN forward/backward semantics.

A :class:`NetworkGraph` is an immutable, strictly sequential list of
:class:`LayerSpec` entries. Activations are channels-first; a batch axis is
prepended internally, and callers may pass either a single sample shaped
``net.input_shape`` or a batch shaped ``(N, *net.input_shape)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Mapping, Sequence

import numpy as np

from . import ops
from .errors import ShapeError, UnsupportedLayerError

AFFINE_KINDS = ("Linear", "Conv2D", "StridedConv2D", "TransposedConv2D")
ACTIVATION_KINDS = ("ReLU", "QuantReLU")
KINDS = AFFINE_KINDS + (
    "BatchNorm",
    "MaxPool2D",
    "AvgPool2D",
    "Upsample2D",
    "ReLU",
    "QuantReLU",
    "Identity",
)
# kinds that act linearly (plus bias) on their input; the SNN evaluates these
# directly on spike tensors
LINEAR_KINDS = AFFINE_KINDS + ("AvgPool2D", "Upsample2D", "Identity", "BatchNorm")
TRAINABLE_KINDS = AFFINE_KINDS + ("AvgPool2D", "Upsample2D", "ReLU", "QuantReLU", "Identity")
ARRAY_PARAMS = ("w", "b", "mean", "var", "gamma", "beta")

_DTYPE = np.float32


def _freeze(value):
    arr = np.array(value, dtype=_DTYPE)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer: a ``kind`` tag and its kind-specific parameters.

    Array parameters (``w``, ``b``, BatchNorm statistics) are stored as
    read-only float32 arrays; scalar settings (stride, kernel, levels, ...)
    are plain Python numbers.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        frozen = {k: (_freeze(v) if k in ARRAY_PARAMS else v) for k, v in self.params.items()}
        object.__setattr__(self, "params", MappingProxyType(frozen))
        _check_params(self)

    def __getitem__(self, key):
        return self.params[key]

    def get(self, key, default=None):
        return self.params.get(key, default)

    def with_params(self, **updates) -> "LayerSpec":
        merged = dict(self.params)
        merged.update(updates)
        return LayerSpec(self.kind, merged)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec) or self.kind != other.kind:
            return False
        if set(self.params) != set(other.params):
            return False
        for key, value in self.params.items():
            ov = other.params[key]
            if isinstance(value, np.ndarray):
                if not isinstance(ov, np.ndarray) or value.shape != ov.shape or not np.array_equal(value, ov):
                    return False
            elif value != ov:
                return False
        return True

    def __hash__(self):
        return hash(self.kind)

    def __repr__(self):
        shown = []
        for k, v in self.params.items():
            shown.append(f"{k}={tuple(v.shape)}" if isinstance(v, np.ndarray) else f"{k}={v!r}")
        return f"LayerSpec({self.kind}, {', '.join(shown)})"


def _check_params(layer: LayerSpec):
    p = layer.params
    kind = layer.kind
    if kind == "BatchNorm":
        if np.any(p["var"] <= 0):
            raise ValueError("BatchNorm variance must be positive")
        n = p["mean"].shape
        for key in ("var", "gamma", "beta"):
            if p[key].shape != n:
                raise ValueError(f"BatchNorm {key} shape {p[key].shape} != mean shape {n}")
    elif kind == "QuantReLU":
        if int(p["levels"]) < 1 or not 0 <= p["offset"] < 1 or not p["clip"] > 0:
            raise ValueError(f"invalid QuantReLU params {dict(p)}: need levels>=1, 0<=offset<1, clip>0")
    elif kind == "Linear":
        if p["w"].ndim != 2 or p["b"].shape != (p["w"].shape[0],):
            raise ValueError(f"Linear weight {p['w'].shape} / bias {p['b'].shape} inconsistent")
    elif kind in ("Conv2D", "StridedConv2D", "TransposedConv2D"):
        w, b, g = p["w"], p["b"], p.get("groups", 1)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"{kind} weight must be (*, *, k, k), got {w.shape}")
        cout = w.shape[1] * g if kind == "TransposedConv2D" else w.shape[0]
        if b.shape != (cout,):
            raise ValueError(f"{kind} bias shape {b.shape} != ({cout},)")
        if w.shape[0] % g:
            raise ValueError(f"{kind} channels {w.shape[0]} not divisible by groups {g}")


# -- constructors -----------------------------------------------------------

def linear(w, b=None) -> LayerSpec:
    w = np.asarray(w, dtype=_DTYPE)
    return LayerSpec("Linear", {"w": w, "b": np.zeros(w.shape[0]) if b is None else b})


def conv2d(w, b=None, stride=1, padding=0, groups=1, strided=False) -> LayerSpec:
    w = np.asarray(w, dtype=_DTYPE)
    kind = "StridedConv2D" if strided else "Conv2D"
    return LayerSpec(kind, {
        "w": w, "b": np.zeros(w.shape[0]) if b is None else b,
        "stride": int(stride), "padding": int(padding), "groups": int(groups),
    })


def conv_transpose2d(w, b=None, stride=2, padding=0, groups=1) -> LayerSpec:
    w = np.asarray(w, dtype=_DTYPE)
    cout = w.shape[1] * groups
    return LayerSpec("TransposedConv2D", {
        "w": w, "b": np.zeros(cout) if b is None else b,
        "stride": int(stride), "padding": int(padding), "groups": int(groups),
    })


def batchnorm(mean, var, gamma=None, beta=None, eps=1e-5) -> LayerSpec:
    mean = np.asarray(mean, dtype=_DTYPE)
    return LayerSpec("BatchNorm", {
        "mean": mean, "var": var,
        "gamma": np.ones_like(mean) if gamma is None else gamma,
        "beta": np.zeros_like(mean) if beta is None else beta,
        "eps": float(eps),
    })


def maxpool2d(kernel=2, stride=None) -> LayerSpec:
    return LayerSpec("MaxPool2D", {"kernel": int(kernel), "stride": int(stride or kernel)})


def avgpool2d(kernel=2, stride=None) -> LayerSpec:
    return LayerSpec("AvgPool2D", {"kernel": int(kernel), "stride": int(stride or kernel)})


def upsample2d(scale=2) -> LayerSpec:
    return LayerSpec("Upsample2D", {"scale": int(scale)})


def relu() -> LayerSpec:
    return LayerSpec("ReLU")


def quant_relu(levels, offset=0.5, clip=1.0) -> LayerSpec:
    return LayerSpec("QuantReLU", {"levels": int(levels), "offset": float(offset), "clip": float(clip)})


def identity() -> LayerSpec:
    return LayerSpec("Identity")


# -- graph -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NetworkGraph:
    """Sequential network. ``meta`` carries provenance such as normalization scales."""

    layers: tuple
    input_shape: tuple
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))
        if any(s <= 0 for s in self.input_shape):
            raise ValueError(f"input shape must be positive, got {self.input_shape}")

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __eq__(self, other):
        return (
            isinstance(other, NetworkGraph)
            and self.input_shape == other.input_shape
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )

    def __hash__(self):
        return hash((self.input_shape, len(self.layers)))

    def with_layers(self, layers: Sequence[LayerSpec], **meta_updates) -> "NetworkGraph":
        meta = dict(self.meta)
        meta.update(meta_updates)
        return replace(self, layers=tuple(layers), meta=meta)

    def with_meta(self, **meta_updates) -> "NetworkGraph":
        return self.with_layers(self.layers, **meta_updates)

    @property
    def output_shape(self):
        return validate(self)[-1] if self.layers else self.input_shape

    def activation_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in ACTIVATION_KINDS]


# -- shape checking --------------------------------------------------------

def layer_output_shape(layer: LayerSpec, shape: tuple, index: int = 0) -> tuple:
    """Output sample shape of ``layer`` for input ``shape``, or :class:`ShapeError`."""
    kind, p = layer.kind, layer.params
    if kind in ("ReLU", "QuantReLU", "Identity"):
        return shape
    if kind == "Linear":
        expected = p["w"].shape[1]
        if math.prod(shape) != expected:
            raise ShapeError(index, (expected,), shape)
        return (p["w"].shape[0],)
    if kind == "BatchNorm":
        if not shape or shape[0] != p["mean"].shape[0]:
            raise ShapeError(index, (p["mean"].shape[0], "..."), shape)
        return shape
    if len(shape) != 3:
        raise ShapeError(index, ("C", "H", "W"), shape)
    c, h, w = shape
    if kind in ("Conv2D", "StridedConv2D"):
        wt, g = p["w"], p.get("groups", 1)
        k, s, pad = wt.shape[2], p["stride"], p["padding"]
        if c != wt.shape[1] * g:
            raise ShapeError(index, (wt.shape[1] * g, h, w), shape)
        ho, wo = ops.conv_out_size(h, k, s, pad), ops.conv_out_size(w, k, s, pad)
        if ho < 1 or wo < 1:
            raise ShapeError(index, ("C", f">={k - 2 * pad}", f">={k - 2 * pad}"), shape)
        return (wt.shape[0], ho, wo)
    if kind == "TransposedConv2D":
        wt, g = p["w"], p.get("groups", 1)
        if c != wt.shape[0]:
            raise ShapeError(index, (wt.shape[0], h, w), shape)
        k, s, pad = wt.shape[2], p["stride"], p["padding"]
        return (wt.shape[1] * g, ops.tconv_out_size(h, k, s, pad), ops.tconv_out_size(w, k, s, pad))
    if kind in ("MaxPool2D", "AvgPool2D"):
        k, s = p["kernel"], p["stride"]
        if h < k or w < k:
            raise ShapeError(index, (c, f">={k}", f">={k}"), shape)
        return (c, ops.conv_out_size(h, k, s, 0), ops.conv_out_size(w, k, s, 0))
    if kind == "Upsample2D":
        return (c, h * p["scale"], w * p["scale"])
    raise ValueError(f"no shape rule for {kind}")


def validate(net: NetworkGraph) -> list:
    """Per-layer output shapes; raises :class:`ShapeError` at the first inconsistency.

    An empty network echoes its input shape as the single entry.
    """
    shape = net.input_shape
    if not net.layers:
        return [shape]
    shapes = []
    for i, layer in enumerate(net.layers):
        shape = layer_output_shape(layer, shape, i)
        shapes.append(shape)
    return shapes


# -- forward / backward ----------------------------------------------------

def _batched(net: NetworkGraph, x):
    x = np.asarray(x)
    if x.shape == net.input_shape:
        return x[None], False
    if x.shape[1:] == net.input_shape:
        return x, True
    raise ShapeError(0, net.input_shape, x.shape)


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Apply one layer to a batched input, in ``x``'s dtype."""
    kind, p = layer.kind, layer.params
    dt = x.dtype
    if kind == "Linear":
        return x.reshape(x.shape[0], -1) @ p["w"].astype(dt).T + p["b"].astype(dt)
    if kind in ("Conv2D", "StridedConv2D"):
        return ops.conv2d(x, p["w"], p["b"], p["stride"], p["padding"], p.get("groups", 1))
    if kind == "TransposedConv2D":
        return ops.conv_transpose2d(x, p["w"], p["b"], p["stride"], p["padding"], p.get("groups", 1))
    if kind == "BatchNorm":
        scale = p["gamma"].astype(dt) / np.sqrt(p["var"].astype(dt) + dt.type(p["eps"]))
        shift = p["beta"].astype(dt) - p["mean"].astype(dt) * scale
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        return x * scale.reshape(bshape) + shift.reshape(bshape)
    if kind == "MaxPool2D":
        return ops.max_pool2d(x, p["kernel"], p["stride"])
    if kind == "AvgPool2D":
        return ops.avg_pool2d(x, p["kernel"], p["stride"])
    if kind == "Upsample2D":
        return ops.upsample_nearest(x, p["scale"])
    if kind == "ReLU":
        return np.maximum(x, dt.type(0))
    if kind == "QuantReLU":
        return ops.quant_clip(x, p["levels"], p["offset"], p["clip"])
    if kind == "Identity":
        return x
    raise ValueError(f"no forward rule for {kind}")


def forward(net: NetworkGraph, x, dtype=np.float32) -> list:
    """Activations after every layer (same batching as ``x``).

    ``dtype`` selects the compute precision; parameters are always stored at
    float32. Raises :class:`ShapeError` naming the offending layer.
    """
    xb, batched = _batched(net, x)
    validate(net)
    h = xb.astype(dtype)
    outs = []
    for layer in net.layers:
        h = layer_forward(layer, h)
        outs.append(h if batched else h[0])
    return outs


def predict(net: NetworkGraph, x, dtype=np.float32) -> np.ndarray:
    """Final-layer output only."""
    xb, batched = _batched(net, x)
    h = xb.astype(dtype)
    for layer in net.layers:
        h = layer_forward(layer, h)
    return h if batched else h[0]


def layer_backward(layer: LayerSpec, x, y, dy, index=0, pool_grad=False):
    """Returns ``(dx, grads)`` for one layer given its input, output and upstream gradient."""
    kind, p = layer.kind, layer.params
    grads = {}
    if kind == "Linear":
        xf = x.reshape(x.shape[0], -1)
        w = p["w"].astype(dy.dtype)
        grads = {"w": dy.T @ xf, "b": dy.sum(axis=0)}
        return (dy @ w).reshape(x.shape), grads
    if kind in ("Conv2D", "StridedConv2D"):
        s, pad, g = p["stride"], p["padding"], p.get("groups", 1)
        dx = ops.conv2d_grad_input(dy, p["w"], x.shape[2:], s, pad, g)
        grads = {"w": ops.conv2d_grad_weight(dy, x, p["w"].shape, s, pad, g), "b": dy.sum(axis=(0, 2, 3))}
        return dx, grads
    if kind == "TransposedConv2D":
        dx, dw = ops.conv_transpose2d_backward(dy, x, p["w"], p["stride"], p["padding"], p.get("groups", 1))
        return dx, {"w": dw, "b": dy.sum(axis=(0, 2, 3))}
    if kind == "AvgPool2D":
        return ops.avg_pool2d_backward(dy, x.shape[2:], p["kernel"], p["stride"]), grads
    if kind == "MaxPool2D" and pool_grad:
        return ops.max_pool2d_backward(dy, x, p["kernel"], p["stride"]), grads
    if kind == "Upsample2D":
        return ops.upsample_nearest_backward(dy, p["scale"]), grads
    if kind == "ReLU":
        return dy * (x > 0), grads
    if kind == "QuantReLU":
        # straight-through inside the unclipped interval
        return dy * ((x > 0) & (x < p["clip"])), grads
    if kind == "Identity":
        return dy, grads
    raise UnsupportedLayerError(index, kind)


def backward(net: NetworkGraph, x, grad_out, activations=None, pool_grad=False):
    """Parameter gradients of ``sum(grad_out * output)`` for every layer.

    Returns a list aligned with ``net.layers``; each entry maps parameter name
    to gradient (empty for parameter-free layers). MaxPool2D and BatchNorm
    raise :class:`UnsupportedLayerError` unless ``pool_grad`` is set, which
    enables first-argmax routing through max pools for pre-replacement
    training (BatchNorm is never trainable here).
    """
    for i, layer in enumerate(net.layers):
        if layer.kind not in TRAINABLE_KINDS and not (pool_grad and layer.kind == "MaxPool2D"):
            raise UnsupportedLayerError(i, layer.kind)
    xb, batched = _batched(net, x)
    xb = xb.astype(_DTYPE)
    if activations is None:
        activations = forward(net, xb)
    dy = np.asarray(grad_out, dtype=_DTYPE)
    if not batched and dy.ndim == len(activations[-1].shape) - 1:
        dy = dy[None]
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer_in = activations[i - 1] if i > 0 else xb
        dy, grads[i] = layer_backward(net.layers[i], layer_in, activations[i], dy, i, pool_grad)
    return grads


def num_parameters(net: NetworkGraph) -> int:
    return sum(v.size for layer in net.layers for k, v in layer.params.items() if k in ("w", "b"))
