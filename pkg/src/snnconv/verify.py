"""Closed-form oracles for the IF/rate relationship and ANN-vs-SNN error reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from . import snn as sim
from .errors import ConversionError
from .quant import set_levels

# same guard as the simulator's firing test
FLOOR_EPS = sim.FIRE_EPS


def closed_form_rate(z, T, v0=0.0, v_th=1.0):
    """Firing rate of one IF neuron driven by constant input ``z`` for T steps.

    clip(floor(z*T/v_th + v0/v_th) / T, 0, 1); 0 for negative input.
    """
    if z < 0:
        return 0.0
    n = math.floor(z * T / v_th + v0 / v_th + FLOOR_EPS)
    return min(max(n, 0), T) / T


def closed_form_count(z, T, v0=0.0, v_th=1.0):
    return round(closed_form_rate(z, T, v0, v_th) * T)


def approx_rate(r_prev, w, b, v_final, T, v0=0.0, v_th=1.0):
    """Rate approximation r~ = w . r_prev + b - (V(T) - v0) / T (scaled by 1/v_th).

    With ``v0=0`` this is the textbook form; passing the initial potential
    credits it back so the floor identity below holds for any V0.
    """
    r_prev = np.asarray(r_prev, dtype=np.float64)
    drive = np.asarray(w, dtype=np.float64) @ r_prev.reshape(-1) + np.asarray(b, dtype=np.float64)
    return (drive - (np.asarray(v_final, dtype=np.float64).reshape(-1) - v0) / T) / v_th


def rate_from_approx(r_tilde, T):
    """floor(r~ * T) / T.

    r~ * T is an integer up to accumulated rounding, so the floor is taken
    after a 1e-6 nudge.
    """
    return np.floor(np.asarray(r_tilde) * T + 1e-6) / T


def approx_rates(snn: sim.SNNNetwork, trace: sim.SimTrace):
    """r~ for every IF site of a single-sample trace, using each stage's own affine map."""
    out = []
    prev = np.asarray(trace.input_rate, dtype=np.float64)
    for st, v in zip(snn.stages, trace.v_final):
        drive = st.apply(prev[None])[0]
        out.append((drive - (v - trace.v0) / trace.T) / trace.v_th)
        prev = trace.counts[len(out) - 1] / trace.T
    return out


def floor_identity_grid(zs=None, Ts=None, v0s=(0.0, 0.5)):
    """Simulate a single IF neuron over a grid and compare spike counts with the floor formula.

    Returns the list of mismatching ``(z, T, v0, simulated, expected)``.
    """
    zs = np.round(np.arange(0, 101) * 0.01, 2) if zs is None else np.asarray(zs, dtype=np.float64)
    Ts = [2**k for k in range(9)] if Ts is None else list(Ts)
    net = nw.NetworkGraph([nw.linear([[1.0]]), nw.relu()], (1,), {"calib_max": [1.0], "normalization": {"sites": [1]}})
    mismatches = []
    for v0 in v0s:
        snn = sim.convert(net, v0=v0, readout="spike-count")
        for T in Ts:
            trace, _ = sim.run(snn, zs[:, None], T)
            counts = trace.counts[0][:, 0]
            for z, n in zip(zs, counts):
                expected = min(max(math.floor(float(z) * T + v0 + FLOOR_EPS), 0), T)
                if int(n) != expected:
                    mismatches.append((float(z), T, v0, int(n), expected))
    return mismatches


def quantization_error_stats(T, offset, n=100_000, seed=0):
    """Monte-Carlo mean |q(u) - u| for u ~ U[0, 1), and the floor-to-this ratio.

    Returns ``(mean_abs_err, ratio)`` where ratio = err(offset=0) / err(offset).
    Both errors use the same samples.
    """
    if n < 10_000:
        raise ValueError("need at least 1e4 samples")
    u = np.random.default_rng(seed).random(n)

    def err(off):
        q = np.clip(np.floor(u * T + off) / T, 0.0, 1.0)
        return float(np.mean(np.abs(q - u)))

    mine = err(offset)
    return mine, err(0.0) / mine


# -- task metrics -------------------------------------------------------------

def accuracy(outputs, labels):
    return float(np.mean(np.asarray(outputs).argmax(axis=1) == np.asarray(labels)))


def box_iou(pred, gt):
    """IoU of (cx, cy, w, h) boxes, rowwise."""
    pred, gt = np.atleast_2d(pred).astype(np.float64), np.atleast_2d(gt).astype(np.float64)

    def corners(b):
        w, h = np.abs(b[:, 2]), np.abs(b[:, 3])
        return b[:, 0] - w / 2, b[:, 1] - h / 2, b[:, 0] + w / 2, b[:, 1] + h / 2, w * h

    ax0, ay0, ax1, ay1, aa = corners(pred)
    bx0, by0, bx1, by1, ba = corners(gt)
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = aa + ba - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def mean_iou(pred, gt):
    return float(np.mean(box_iou(pred, gt)))


def ap50(pred, gt, scores=None):
    """Single-class AP at IoU 0.5 with one ground-truth box per image.

    Detections are ranked by ``scores`` (uniform if absent) and the
    precision/recall curve is integrated with all-point interpolation.
    """
    ious = box_iou(pred, gt)
    n = len(ious)
    scores = np.ones(n) if scores is None else np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = (ious[order] >= 0.5).astype(np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, n + 1)
    recall = ctp / n
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mprec[idx + 1]))


METRICS = {
    "accuracy": accuracy,
    "iou": mean_iou,
}


# -- ANN vs SNN -------------------------------------------------------------

@dataclass
class ErrorReport:
    """Per-site |r - x| statistics between SNN rates and ANN activations."""

    T: int
    sites: list
    output_mean_err: float
    output_max_err: float
    metric_name: str | None = None
    snn_metric: float | None = None
    ann_metric: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_site_err(self):
        return float(np.mean([s["mean_err"] for s in self.sites])) if self.sites else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["site", "layer", "max_err", "mean_err", "residual_mean", "residual_max", "mean_rate", "T"])
            for s in self.sites:
                writer.writerow([s["site"], s["layer"], f"{s['max_err']:.6g}", f"{s['mean_err']:.6g}",
                                 f"{s['residual_mean']:.6g}", f"{s['residual_max']:.6g}", f"{s['mean_rate']:.6g}", self.T])
            writer.writerow(["output", "", f"{self.output_max_err:.6g}", f"{self.output_mean_err:.6g}", "", "", "", self.T])

    def summary(self):
        lines = [f"T = {self.T}"]
        for s in self.sites:
            lines.append(f"  site {s['site']} (layer {s['layer']}): mean |r-x| {s['mean_err']:.5f}, "
                         f"max {s['max_err']:.5f}, mean |V(T)/T| {s['residual_mean']:.5f}, mean rate {s['mean_rate']:.4f}")
        lines.append(f"  output: mean |err| {self.output_mean_err:.5f}, max {self.output_max_err:.5f}")
        if self.metric_name:
            lines.append(f"  {self.metric_name}: SNN {self.snn_metric:.4f}, ANN {self.ann_metric:.4f}")
        return "\n".join(lines)


def _check_same_architecture(ann, snn):
    if sim.architecture_signature(ann) != snn.signature:
        raise ConversionError("ANN and SNN architectures do not match")


def compare_ann_snn(ann, snn, inputs, T, labels=None, metric=None, encoder="constant-current", seed=0,
                    output_scale=1.0):
    """Run both networks on ``inputs`` and report rate-vs-activation errors.

    ``metric`` ('accuracy' or 'iou') is evaluated against ``labels`` on both
    outputs after multiplying by ``output_scale`` (the last normalization
    scale, for regression heads).
    """
    _check_same_architecture(ann, snn)
    xs = np.asarray(inputs, dtype=np.float64)
    if xs.shape == tuple(ann.input_shape):
        xs = xs[None]
    acts = nw.forward(ann, xs, dtype=np.float64)
    trace, out = sim.run(snn, xs, T, encoder=encoder, seed=seed)
    rows = []
    for i, (layer, rate, v) in enumerate(zip(trace.site_layers, trace.rates, trace.v_final)):
        diff = np.abs(rate - acts[layer])
        res = np.abs(v / T)
        rows.append({
            "site": i, "layer": layer,
            "max_err": float(diff.max()) if diff.size else 0.0,
            "mean_err": float(diff.mean()) if diff.size else 0.0,
            "residual_mean": float(res.mean()) if res.size else 0.0,
            "residual_max": float(res.max()) if res.size else 0.0,
            "mean_rate": float(rate.mean()) if rate.size else 0.0,
        })
    ref_index = snn.accumulator.pre_index if snn.accumulator is not None else trace.site_layers[-1]
    ann_out = acts[ref_index] if ref_index >= 0 else xs
    odiff = np.abs(out - ann_out)
    report = ErrorReport(T, rows, float(odiff.mean()), float(odiff.max()))
    if metric is not None and labels is not None:
        fn = METRICS[metric]
        report.metric_name = metric
        report.snn_metric = fn(out * output_scale, labels)
        report.ann_metric = fn(ann_out * output_scale, labels)
    report.extra["trace"] = trace
    return report


def sweep_T(ann, snn_factory, inputs, T_list, labels=None, metric=None, match_levels=False, **kw):
    """One :func:`compare_ann_snn` row per T.

    ``snn_factory`` is either a converted network or a callable returning a
    fresh one. With ``match_levels`` the ANN's Quant-ReLU grid is set to T
    for each row before comparing.
    """
    T_list = list(T_list)
    if not T_list:
        raise ValueError("T list is empty")
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError(f"T list must be strictly ascending, got {T_list}")
    rows = []
    for T in T_list:
        ref = set_levels(ann, T) if match_levels else ann
        snn = snn_factory() if callable(snn_factory) else snn_factory
        rep = compare_ann_snn(ref, snn, inputs, T, labels=labels, metric=metric, **kw)
        rows.append({
            "T": T,
            "metric": rep.snn_metric,
            "ann_metric": rep.ann_metric,
            "output_mean_err": rep.output_mean_err,
            "site_mean_err": rep.mean_site_err,
        })
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "metric", "ann_metric", "output_mean_err", "site_mean_err"])
        for r in rows:
            writer.writerow([r["T"], "" if r["metric"] is None else f"{r['metric']:.6f}",
                             "" if r["ann_metric"] is None else f"{r['ann_metric']:.6f}",
                             f"{r['output_mean_err']:.6g}", f"{r['site_mean_err']:.6g}"])
