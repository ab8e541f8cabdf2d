"""Stage functions shared by the CLI and the acceptance suite.

Stage order: train, replace, fuse, finetune (normalize, swap to Quant-ReLU,
quantization-aware training), convert, simulate, verify, report.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import datasets, models, quant, transform
from . import network as nw
from . import snn as sim
from .config import PipelineConfig
from .training import train


def load_data(cfg: PipelineConfig):
    """``(X, y, X_test, y_test, calibration)`` for the configured dataset."""
    d, seed = cfg.data, cfg.run["seed"]
    X, y = datasets.make(d["dataset"], d["train_size"], seed)
    Xt, yt = datasets.make(d["dataset"], d["test_size"], seed + 1)
    return X, y, Xt, yt, X[: d["calibration_size"]]


def build_model(cfg: PipelineConfig, input_shape, outputs):
    m, seed = cfg.model, cfg.run["seed"]
    if m["arch"] == "mlp":
        sizes = [int(np.prod(input_shape))] + list(m["hidden"]) + [outputs]
        return models.mlp(sizes, seed=seed, input_shape=tuple(input_shape))
    if m["arch"] == "convnet":
        if tuple(input_shape) != (1, 8, 8):
            raise ValueError("the convnet architecture expects 1x8x8 inputs")
        return models.pattern_convnet(pool=True, seed=seed, classes=outputs)
    if tuple(input_shape) != (1, 32, 32):
        raise ValueError("the detector architecture expects 1x32x32 inputs")
    return models.detector(seed=seed)


def _outputs(y, loss):
    return int(np.max(y)) + 1 if loss == "ce" else y.shape[1]


def output_scale(net: nw.NetworkGraph) -> float:
    norm = net.meta.get("normalization")
    return float(norm["lambdas"][-1]) if norm and norm.get("lambdas") else 1.0


def stage_train(cfg, X, y, calibration):
    t = cfg.train
    net = build_model(cfg, X.shape[1:], _outputs(y, t["loss"]))
    pool_grad = any(layer.kind == "MaxPool2D" for layer in net.layers)
    net, history = train(net, X, y, loss=t["loss"], epochs=t["epochs"], lr=t["lr"], momentum=t["momentum"],
                         batch_size=t["batch_size"], seed=cfg.run["seed"], pool_grad=pool_grad)
    if cfg.model["batchnorm"]:
        net = models.with_batchnorm(net, calibration, seed=cfg.run["seed"])
    return net, history


def stage_replace(cfg, net):
    r = cfg.replace
    return transform.replace_downsampling(net, init=r["init"], kernel=r["kernel"],
                                          add_activation=r["add_activation"], seed=cfg.run["seed"])


def stage_fuse(cfg, net):
    return transform.fuse_batchnorm(net)


def stage_finetune(cfg, net, X, y, calibration):
    """Normalize, swap every ReLU for Quant-ReLU and finetune.

    Regression targets are divided by the output scale so the normalized
    network keeps predicting in normalized units.
    """
    qcfg = cfg.quant_config()
    net, scales = transform.normalize_weights(net, calibration, cfg.normalize["percentile"])
    net = quant.swap_activations(net, "relu->quant", qcfg)
    loss = cfg.train["loss"]
    target = y / scales.output_scale if loss == "mse" else y
    pool_grad = any(layer.kind == "MaxPool2D" for layer in net.layers)
    net, history = train(net, X, target, loss=loss, epochs=qcfg.epochs, lr=qcfg.lr, momentum=qcfg.momentum,
                         batch_size=qcfg.batch_size, seed=qcfg.seed, pool_grad=pool_grad)
    acts = nw.forward(net, calibration, dtype=np.float64)
    net = net.with_meta(calib_max=[float(acts[s].max()) for s in scales.sites], quant=qcfg.to_dict())
    return net, history


def sim_settings(cfg):
    s = cfg.sim
    return {"v0": s["v0"], "v_th": s["v_th"], "readout": s["readout"], "maxpool": s["maxpool"]}


def stage_convert(cfg, net):
    levels = [layer["levels"] for layer in net.layers if layer.kind == "QuantReLU"]
    T = cfg.sim["T"]
    if levels and any(lv != T for lv in levels):
        warnings.warn(f"Quant-ReLU grid ({levels[0]} levels) differs from simulation T={T}; "
                      "rates will not match the quantized activations", stacklevel=2)
    return sim.convert(net, **sim_settings(cfg))
