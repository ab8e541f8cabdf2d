"""Toy architectures used by the CLI, the reference network and the acceptance suite."""

import numpy as np

from . import network as nw


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def _act(kind, levels=64, offset=0.5):
    return nw.relu() if kind == "ReLU" else nw.quant_relu(levels, offset)


def mlp(sizes, act="ReLU", seed=0, input_shape=None, levels=64):
    """Dense net; every hidden layer followed by ``act``, linear output."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nw.linear(_he(rng, (b, a), a), np.zeros(b)))
        if i < len(sizes) - 2:
            layers.append(_act(act, levels))
    return nw.NetworkGraph(layers, input_shape or (sizes[0],))


def pattern_convnet(pool=True, act="ReLU", seed=0, channels=8, classes=10, levels=64):
    """1x8x8 input: conv3x3 -> act -> [maxpool 2x2] -> conv3x3 -> act -> linear."""
    rng = np.random.default_rng(seed)
    c = channels
    layers = [
        nw.conv2d(_he(rng, (c, 1, 3, 3), 9), np.zeros(c), padding=1),
        _act(act, levels),
    ]
    if pool:
        layers.append(nw.maxpool2d(2))
        side = 4
    else:
        side = 8
    layers += [
        nw.conv2d(_he(rng, (2 * c, c, 3, 3), 9 * c), np.zeros(2 * c), padding=1),
        _act(act, levels),
        nw.linear(_he(rng, (classes, 2 * c * side * side), 2 * c * side * side), np.zeros(classes)),
    ]
    return nw.NetworkGraph(layers, (1, 8, 8))


def detector(act="ReLU", seed=0, size=32, levels=64):
    """1x32x32 input: three stride-2 convolutions then a 4-output box head."""
    rng = np.random.default_rng(seed)
    layers = [
        nw.conv2d(_he(rng, (8, 1, 3, 3), 9), np.zeros(8), stride=2, padding=1),     # 16x16
        _act(act, levels),
        nw.conv2d(_he(rng, (16, 8, 3, 3), 72), np.zeros(16), stride=2, padding=1),  # 8x8
        _act(act, levels),
        nw.conv2d(_he(rng, (16, 16, 3, 3), 144), np.zeros(16), stride=2, padding=1),  # 4x4
        _act(act, levels),
        nw.linear(_he(rng, (64, 256), 256), np.zeros(64)),
        _act(act, levels),
        nw.linear(rng.normal(0, 0.01, (4, 64)), np.full(4, 0.3)),
    ]
    return nw.NetworkGraph(layers, (1, size, size))


def with_batchnorm(net, calibration, seed=0, eps=1e-5):
    """Insert a BatchNorm after every affine layer without changing the function.

    Statistics come from ``calibration`` activations; the preceding layer's
    parameters are pre-compensated so that fusing the BN back recovers the
    original affine map (up to float32 rounding). Produces BN-bearing
    networks for exercising the fusion stage.
    """
    rng = np.random.default_rng(seed)
    acts = nw.forward(net, calibration, dtype=np.float64)
    layers = []
    for i, layer in enumerate(net.layers):
        if layer.kind not in ("Linear", "Conv2D", "StridedConv2D"):
            layers.append(layer)
            continue
        a = acts[i]
        axes = (0,) if a.ndim == 2 else (0, 2, 3)
        mean = a.mean(axis=axes)
        var = a.var(axis=axes) + 1e-3
        gamma = rng.uniform(0.5, 2.0, mean.shape)
        beta = rng.normal(0, 0.1, mean.shape)
        scale = gamma / np.sqrt(var + eps)
        # choose w0, b0 such that BN(w0 x + b0) == w x + b
        w = layer["w"].astype(np.float64) / scale.reshape((-1,) + (1,) * (layer["w"].ndim - 1))
        b = (layer["b"].astype(np.float64) - beta) / scale + mean
        layers.append(layer.with_params(w=w, b=b))
        layers.append(nw.batchnorm(mean, var, gamma, beta, eps))
    return net.with_layers(layers)
