"""Quant-ReLU activation and quantization-aware finetuning."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import network as nw
from . import ops
from .training import train

DIRECTIONS = ("relu->quant", "quant->relu")


@dataclass(frozen=True)
class QuantConfig:
    """Quant-ReLU grid plus finetuning hyperparameters.

    ``levels`` should equal the simulation step budget T; ``offset=0.5``
    rounds to the nearest level (the counterpart of a half-threshold initial
    membrane potential), ``offset=0`` floors.
    """

    levels: int = 64
    offset: float = 0.5
    clip: float = 1.0
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if int(self.levels) < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if not 0 <= self.offset < 1:
            raise ValueError(f"offset must be in [0, 1), got {self.offset}")
        if not self.clip > 0:
            raise ValueError(f"clip must be > 0, got {self.clip}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid training hyperparameters")

    def layer(self) -> nw.LayerSpec:
        return nw.quant_relu(self.levels, self.offset, self.clip)

    def to_dict(self):
        return asdict(self)


def quant_relu(x, cfg: QuantConfig):
    """clip(floor(x * levels + offset) / levels, 0, clip); scalars or arrays."""
    if np.isscalar(x):
        return float(ops.quant_clip(np.float64(x), cfg.levels, cfg.offset, cfg.clip))
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return ops.quant_clip(arr, cfg.levels, cfg.offset, cfg.clip)


def swap_activations(net: nw.NetworkGraph, direction: str, cfg: QuantConfig | None = None) -> nw.NetworkGraph:
    """Replace every ReLU with Quant-ReLU(cfg) or every Quant-ReLU with ReLU."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if direction == "relu->quant":
        if cfg is None:
            raise ValueError("relu->quant needs a QuantConfig")
        src, new = "ReLU", cfg.layer()
    else:
        src, new = "QuantReLU", nw.relu()
    if not any(layer.kind == src for layer in net.layers):
        return net
    return net.with_layers([new if layer.kind == src else layer for layer in net.layers])


def set_levels(net: nw.NetworkGraph, levels: int, offset: float | None = None) -> nw.NetworkGraph:
    """Copy of ``net`` with every Quant-ReLU re-gridded to ``levels`` steps."""
    out = []
    for layer in net.layers:
        if layer.kind == "QuantReLU":
            upd = {"levels": int(levels)}
            if offset is not None:
                upd["offset"] = float(offset)
            layer = layer.with_params(**upd)
        out.append(layer)
    return net.with_layers(out)


def finetune(net: nw.NetworkGraph, X, y, cfg: QuantConfig, loss="ce", on_epoch=None):
    """Quantization-aware training of a Quant-ReLU network.

    Every activation must already be Quant-ReLU with ``cfg``'s grid. Returns
    ``(net, history)``; see :func:`snnconv.training.train`.
    """
    expected = cfg.layer()
    for i, layer in enumerate(net.layers):
        if layer.kind == "ReLU" or (layer.kind == "QuantReLU" and layer != expected):
            raise ValueError(f"layer {i} is {layer!r}; finetune expects {expected!r} activations")
    return train(net, X, y, loss=loss, epochs=cfg.epochs, lr=cfg.lr, momentum=cfg.momentum,
                 batch_size=cfg.batch_size, seed=cfg.seed, on_epoch=on_epoch)
