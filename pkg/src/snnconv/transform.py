"""Graph-to-graph rewrites for conversion: BN fusion, pool/upsample replacement,
data-based weight normalization, and per-layer firing-rate profiling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from . import ops
from .errors import NormalizationError, TransformError

FUSABLE = ("Linear", "Conv2D", "StridedConv2D")
SUPPORTED_POOLS = ((2, 2),)
INIT_POLICIES = ("avg-init", "random-init")


@dataclass(frozen=True)
class ScaleFactors:
    """Per-site activation scales used to rewrite weights.

    ``sites`` are the layer indices whose outputs were measured (every
    activation layer, plus the final layer when it is not an activation).
    """

    lambdas: tuple
    percentile: float
    sites: tuple
    input_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.percentile <= 100:
            raise ValueError(f"percentile must be in (0, 100], got {self.percentile}")
        if any(lam <= 0 for lam in self.lambdas):
            raise ValueError("scale factors must be positive")

    def to_dict(self):
        return {
            "lambdas": [float(v) for v in self.lambdas],
            "percentile": float(self.percentile),
            "sites": [int(s) for s in self.sites],
            "input_scale": float(self.input_scale),
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(tuple(obj["lambdas"]), obj["percentile"], tuple(obj["sites"]), obj.get("input_scale", 1.0))

    @property
    def output_scale(self):
        return self.lambdas[-1] if self.lambdas else 1.0


# -- BN fusion ---------------------------------------------------------------

def _fuse_pair(affine: nw.LayerSpec, bn: nw.LayerSpec) -> nw.LayerSpec:
    p = bn.params
    scale = p["gamma"].astype(np.float64) / np.sqrt(p["var"].astype(np.float64) + p["eps"])
    w = affine["w"].astype(np.float64)
    b = affine["b"].astype(np.float64)
    w = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
    b = (b - p["mean"]) * scale + p["beta"]
    return affine.with_params(w=w, b=b)


def fuse_batchnorm(net: nw.NetworkGraph) -> nw.NetworkGraph:
    """Fold every BatchNorm into the affine layer right before it.

    w' = w * gamma / sqrt(var + eps); b' = (b - mean) * gamma / sqrt(var + eps) + beta.
    """
    out = []
    for i, layer in enumerate(net.layers):
        if layer.kind != "BatchNorm":
            out.append(layer)
            continue
        if not out or out[-1].kind not in FUSABLE:
            prev = out[-1].kind if out else "input"
            raise TransformError(f"BatchNorm at layer {i} follows {prev}; it must follow one of {FUSABLE}")
        if out[-1]["w"].shape[0] != layer["mean"].shape[0]:
            raise TransformError(f"BatchNorm at layer {i} has {layer['mean'].shape[0]} channels, "
                                 f"preceding layer has {out[-1]['w'].shape[0]}")
        out[-1] = _fuse_pair(out[-1], layer)
    if len(out) == len(net.layers):
        return net
    fused = net.with_layers(out)
    nw.validate(fused)
    return fused


# -- layer replacement -------------------------------------------------------

def _replacement_kernel(channels, kernel, init, rng):
    if init == "avg-init":
        return ops.avg_kernel(channels, kernel)
    return rng.normal(1.0 / kernel**2, 0.5 / kernel**2, (channels, 1, kernel, kernel))


def replace_downsampling(net: nw.NetworkGraph, init="avg-init", kernel=2, add_activation=True, seed=0):
    """Swap 2x2/stride-2 max pools for per-channel strided convolutions and
    nearest upsampling for per-channel transposed convolutions.

    ``kernel`` is the strided-convolution window (2, or 3 with padding 1).
    With ``add_activation`` the nearest preceding activation is cloned after
    each new strided convolution so the replacement becomes its own spiking
    layer. The indices of the new strided layers are recorded in
    ``meta['replaced_layers']``.
    """
    if init not in INIT_POLICIES:
        raise TransformError(f"unknown init policy {init!r}; expected one of {INIT_POLICIES}")
    if kernel not in (2, 3):
        raise TransformError(f"replacement kernel must be 2 or 3, got {kernel}")
    if not any(layer.kind in ("MaxPool2D", "Upsample2D") for layer in net.layers):
        return net
    rng = np.random.default_rng(seed)
    shapes = [net.input_shape] + nw.validate(net)
    out, replaced = [], []
    last_act = None
    for i, layer in enumerate(net.layers):
        channels = shapes[i][0]
        if layer.kind in nw.ACTIVATION_KINDS:
            last_act = layer
        if layer.kind == "MaxPool2D":
            cfg = (layer["kernel"], layer["stride"])
            if cfg not in SUPPORTED_POOLS:
                raise TransformError(
                    f"MaxPool2D at layer {i} has kernel/stride {cfg}; supported: "
                    + ", ".join(f"kernel={k} stride={s}" for k, s in SUPPORTED_POOLS))
            w = _replacement_kernel(channels, kernel, init, rng)
            replaced.append(len(out))
            out.append(nw.conv2d(w, np.zeros(channels), stride=2, padding=(kernel - 1) // 2,
                                 groups=channels, strided=True))
            if add_activation and last_act is not None:
                out.append(last_act)
        elif layer.kind == "Upsample2D":
            s = layer["scale"]
            if init == "avg-init":
                w = np.ones((channels, 1, s, s))
            else:
                w = rng.normal(1.0, 0.25, (channels, 1, s, s))
            out.append(nw.conv_transpose2d(w, np.zeros(channels), stride=s, groups=channels))
        else:
            out.append(layer)
    result = net.with_layers(out, replaced_layers=replaced)
    nw.validate(result)
    return result


# -- data-based normalization ------------------------------------------------

def normalization_sites(net: nw.NetworkGraph):
    sites = net.activation_indices()
    if net.layers and (not sites or sites[-1] != len(net.layers) - 1):
        sites.append(len(net.layers) - 1)
    return sites


def _stack(calibration):
    if isinstance(calibration, np.ndarray):
        return calibration
    return np.stack([np.asarray(c) for c in calibration])


def normalize_weights(net: nw.NetworkGraph, calibration, percentile=99.9):
    """Rescale weights so activations at every site fall in [0, 1].

    For consecutive sites with scales lam_prev and lam, the first weighted
    layer between them becomes w * lam_prev / lam, b / lam; later weighted
    layers in the same stretch only have their bias divided by lam. Returns
    ``(normalized_net, ScaleFactors)``.
    """
    for i, layer in enumerate(net.layers):
        if layer.kind == "BatchNorm":
            raise TransformError(f"layer {i} is BatchNorm; fuse before normalizing")
    xs = _stack(calibration)
    if xs.shape[0] == 0:
        raise TransformError("calibration set is empty")
    if xs.shape == net.input_shape:
        xs = xs[None]
    acts = nw.forward(net, xs, dtype=np.float64)
    sites = normalization_sites(net)

    layers = list(net.layers)
    lambdas = []
    prev_lam, start = 1.0, 0
    for site in sites:
        weighted = [j for j in range(start, site + 1) if layers[j].kind in nw.AFFINE_KINDS]
        if not weighted:
            lam = prev_lam
        else:
            lam = float(np.percentile(acts[site], percentile))
            if not lam > 0:
                raise NormalizationError(site, lam)
            first = weighted[0]
            layers[first] = layers[first].with_params(
                w=layers[first]["w"].astype(np.float64) * (prev_lam / lam),
                b=layers[first]["b"].astype(np.float64) / lam,
            )
            for j in weighted[1:]:
                layers[j] = layers[j].with_params(b=layers[j]["b"].astype(np.float64) / lam)
        lambdas.append(lam)
        prev_lam, start = lam, site + 1

    scales = ScaleFactors(tuple(lambdas), float(percentile), tuple(sites))
    normalized = net.with_layers(layers, normalization=scales.to_dict())
    new_acts = nw.forward(normalized, xs, dtype=np.float64)
    calib_max = [float(new_acts[s].max()) for s in sites]
    return normalized.with_meta(calib_max=calib_max), scales


# -- firing-rate profile -----------------------------------------------------

def firing_rate_profile(trace, buckets=10):
    """Per-IF-site firing-rate summary: mean, min, max and a histogram over [0, 1]."""
    rows = []
    edges = np.linspace(0.0, 1.0, buckets + 1)
    for site, rates in enumerate(trace.rates):
        r = np.asarray(rates, dtype=np.float64).reshape(-1)
        hist = np.histogram(r, bins=edges)[0] if r.size else np.zeros(buckets, dtype=int)
        rows.append({
            "site": site,
            "layer": int(trace.site_layers[site]),
            "mean_rate": float(r.mean()) if r.size else 0.0,
            "min_rate": float(r.min()) if r.size else 0.0,
            "max_rate": float(r.max()) if r.size else 0.0,
            "buckets": [int(c) for c in hist],
        })
    return rows


def write_profile_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        nb = len(rows[0]["buckets"]) if rows else 0
        writer.writerow(["site", "layer", "mean_rate", "min_rate", "max_rate"] + [f"bucket_{i}" for i in range(nb)])
        for row in rows:
            writer.writerow([row["site"], row["layer"], f"{row['mean_rate']:.6f}", f"{row['min_rate']:.6f}",
                             f"{row['max_rate']:.6f}"] + row["buckets"])


def diff_profiles(before, after):
    """Pair two profiles site-by-site (rows may differ in count) for reporting."""
    out = []
    for i in range(max(len(before), len(after))):
        a = before[i] if i < len(before) else None
        b = after[i] if i < len(after) else None
        out.append({
            "site": i,
            "before_mean": None if a is None else a["mean_rate"],
            "after_mean": None if b is None else b["mean_rate"],
            "delta": None if a is None or b is None else b["mean_rate"] - a["mean_rate"],
        })
    return out
