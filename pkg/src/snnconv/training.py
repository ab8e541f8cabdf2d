"""Minibatch SGD with momentum over the fixed layer set."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import network as nw
from .errors import TrainingDivergedError, UnsupportedLayerError

log = logging.getLogger(__name__)

LOSSES = ("ce", "mse")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float | None


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(out, target, loss):
    """Mean loss over the batch and its gradient w.r.t. ``out``."""
    n = out.shape[0]
    if loss == "ce":
        p = softmax(out.astype(np.float64))
        idx = np.asarray(target, dtype=int)
        value = -np.mean(np.log(p[np.arange(n), idx] + 1e-12))
        grad = p
        grad[np.arange(n), idx] -= 1.0
        return value, (grad / n).astype(np.float32)
    diff = out.astype(np.float64) - np.asarray(target, dtype=np.float64).reshape(out.shape)
    return 0.5 * np.mean(np.sum(diff.reshape(n, -1) ** 2, axis=1)), (diff / n).astype(np.float32)


def _mutable(net):
    return [SimpleNamespace(kind=layer.kind, params={k: (np.array(v, dtype=np.float32) if isinstance(v, np.ndarray) else v)
                                                      for k, v in layer.params.items()})
            for layer in net.layers]


def _run(layers, x):
    acts = []
    h = x
    for layer in layers:
        h = nw.layer_forward(layer, h)
        acts.append(h)
    return acts


def evaluate(net, X, y, loss, batch_size=256):
    """(mean loss, accuracy or None) over a dataset."""
    total, correct, n = 0.0, 0, X.shape[0]
    for s in range(0, n, batch_size):
        out = nw.predict(net, X[s:s + batch_size])
        value, _ = loss_and_grad(out, y[s:s + batch_size], loss)
        total += value * out.shape[0]
        if loss == "ce":
            correct += int(np.sum(out.argmax(axis=1) == y[s:s + batch_size]))
    return total / n, (correct / n if loss == "ce" else None)


def train(net, X, y, *, loss="ce", epochs=10, lr=0.05, momentum=0.9, batch_size=32, seed=0,
          pool_grad=False, on_epoch=None):
    """Train a copy of ``net``; returns ``(trained_net, history)``.

    ``history[0]`` holds the loss before any update (epoch 0). Raises
    :class:`TrainingDivergedError` as soon as a batch loss is not finite.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y)
    nw.validate(net)
    for i, layer in enumerate(net.layers):
        if layer.kind not in nw.TRAINABLE_KINDS and not (pool_grad and layer.kind == "MaxPool2D"):
            raise UnsupportedLayerError(i, layer.kind)

    history = [EpochStats(0, *evaluate(net, X, y, loss))]
    if on_epoch:
        on_epoch(history[0])
    if epochs == 0:
        return net, history

    layers = _mutable(net)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items() if k in ("w", "b")} for layer in layers]
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    # overflow is caught by the finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n)
            for bi, s in enumerate(range(0, n, batch_size)):
                idx = order[s:s + batch_size]
                xb = X[idx]
                acts = _run(layers, xb)
                value, dy = loss_and_grad(acts[-1], y[idx], loss)
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, bi, value)
                for li in range(len(layers) - 1, -1, -1):
                    layer_in = acts[li - 1] if li > 0 else xb
                    dy, grads = nw.layer_backward(layers[li], layer_in, acts[li], dy, li, pool_grad)
                    for key, g in grads.items():
                        v = velocity[li][key]
                        v *= momentum
                        v -= lr * g.astype(np.float32)
                        layers[li].params[key] += v
            trained = net.with_layers([nw.LayerSpec(layer.kind, layer.params) for layer in layers])
            stats = EpochStats(epoch, *evaluate(trained, X, y, loss))
            if not np.isfinite(stats.loss):
                raise TrainingDivergedError(epoch, -1, stats.loss)
            history.append(stats)
            log.info("epoch %d loss %.5f acc %s", epoch, stats.loss, stats.accuracy)
            if on_epoch:
                on_epoch(stats)
    return trained, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for row in history:
            writer.writerow([row.epoch, f"{row.loss:.6f}", "" if row.accuracy is None else f"{row.accuracy:.6f}"])
