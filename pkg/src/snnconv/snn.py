"""Clock-driven integrate-and-fire simulation of a converted network.

Each activation layer of the source ANN becomes an IF site. The linear
layers between two sites (affine, pooling, upsampling, identity) are applied
directly to the previous site's binary spikes to form the per-step membrane
increment U, which already includes the bias. A site fires when
V + U - V_th >= 0 and then subtracts V_th from its membrane.

Membranes and increments are kept in float64 so that exact spike-count
identities survive long simulations.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field

from pathlib import Path

import numpy as np

from . import network as nw
from .errors import ConversionError, SimulationError

READOUTS = ("spike-count", "membrane-accumulate")
# A membrane within FIRE_EPS * V_th below threshold counts as reaching it, so
# decimal inputs such as 0.35 that sum to the threshold in exact arithmetic
# are not lost to binary rounding.
FIRE_EPS = 1e-9
ENCODERS = ("constant-current", "bernoulli", "spikes")


@dataclass
class IFLayerState:
    """Membrane potentials of one IF site (batched: ``V.shape == (N, *shape)``)."""

    shape: tuple
    v_th: float = 1.0
    v0: float = 0.0
    V: np.ndarray | None = None

    def reset(self, batch=1):
        self.V = np.full((batch,) + tuple(self.shape), float(self.v0), dtype=np.float64)


@dataclass(frozen=True)
class Stage:
    """Linear layers feeding one IF site (or the output accumulator)."""

    layers: tuple
    layer_index: int      # ANN index of the activation (or last layer) this stage ends at
    pre_index: int        # ANN index whose output equals this stage's increment U
    shape: tuple

    def apply(self, x):
        for layer in self.layers:
            x = nw.layer_forward(layer, x)
        return x


def architecture_signature(net: nw.NetworkGraph):
    shapes = nw.validate(net) if net.layers else []
    return tuple(("act" if layer.kind in nw.ACTIVATION_KINDS else layer.kind, tuple(s))
                 for layer, s in zip(net.layers, shapes))


@dataclass
class SNNNetwork:
    stages: list
    sites: list
    readout: str
    input_shape: tuple
    accumulator: Stage | None = None
    signature: tuple = ()
    v0: float = 0.0
    v_th: float = 1.0
    counts: list = field(default_factory=list)
    sum_u: list = field(default_factory=list)
    acc: np.ndarray | None = None
    batch: int = 1

    @property
    def site_layers(self):
        return [st.layer_index for st in self.stages]

    def weights(self):
        """All affine parameter arrays, stage by stage (accumulator last)."""
        stages = self.stages + ([self.accumulator] if self.accumulator else [])
        return [(k, layer.params[k]) for st in stages for layer in st.layers for k in ("w", "b") if k in layer.params]


def convert(net: nw.NetworkGraph, v0=0.5, v_th=1.0, readout="auto", strict=False, maxpool="error") -> SNNNetwork:
    """Map a fused, replaced and normalized ANN onto IF neurons.

    ``readout='auto'`` picks spike-count when the network ends in an
    activation and membrane-accumulate otherwise. With membrane-accumulate a
    trailing activation is turned into the threshold-free accumulator.
    ``maxpool='avg'`` substitutes average pooling for any remaining max pool
    (the classic fallback, used for baselines); the default refuses.
    """
    if not 0 <= v0 < v_th:
        raise ValueError(f"initial potential must lie in [0, v_th), got v0={v0}, v_th={v_th}")
    if readout == "auto":
        readout = "spike-count" if net.layers and net.layers[-1].kind in nw.ACTIVATION_KINDS else "membrane-accumulate"
    if readout not in READOUTS:
        raise ValueError(f"readout must be one of {READOUTS}")
    layers = list(net.layers)
    for i, layer in enumerate(layers):
        if layer.kind == "MaxPool2D":
            if maxpool != "avg":
                raise ConversionError(f"layer {i} is MaxPool2D, which has no IF equivalent; replace it first")
            layers[i] = nw.avgpool2d(layer["kernel"], layer["stride"])
        elif layer.kind == "BatchNorm":
            raise ConversionError(f"layer {i} is BatchNorm; fuse it before conversion")
    _check_normalized(net, strict)

    shapes = nw.validate(net)
    stages, pending = [], []
    for i, layer in enumerate(layers):
        if layer.kind in nw.ACTIVATION_KINDS:
            stages.append(Stage(tuple(pending), i, i - 1 if pending else (stages[-1].layer_index if stages else -1),
                                tuple(shapes[i])))
            pending = []
        else:
            pending.append(layer)
    accumulator = None
    if pending:
        if readout == "spike-count":
            raise ConversionError("spike-count readout needs the network to end in an activation layer")
        accumulator = Stage(tuple(pending), len(layers) - 1, len(layers) - 1, tuple(shapes[-1]))
    elif readout == "membrane-accumulate":
        if not stages:
            raise ConversionError("network has no layers to simulate")
        accumulator = stages.pop()
    if not stages and accumulator is None:
        raise ConversionError("network has no layers to simulate")

    snn = SNNNetwork(
        stages=stages,
        sites=[IFLayerState(st.shape, float(v_th), float(v0)) for st in stages],
        readout=readout,
        input_shape=net.input_shape,
        accumulator=accumulator,
        signature=architecture_signature(net),
        v0=float(v0),
        v_th=float(v_th),
    )
    reset_states(snn)
    return snn


def _check_normalized(net, strict):
    calib_max = net.meta.get("calib_max")
    if calib_max is None:
        msg = "network carries no normalization record; activations may exceed the [0, 1] rate range"
        if strict:
            raise ConversionError(msg)
        warnings.warn(msg, stacklevel=3)
        return
    # only IF sites are rate-limited; a trailing linear readout may exceed 1,
    # and a Quant-ReLU clipped at <= 1 is bounded whatever the stale record says
    acts = set(net.activation_indices())
    bounded = {i for i, layer in enumerate(net.layers) if layer.kind == "QuantReLU" and layer["clip"] <= 1.0}
    over = [(s, m) for s, m in zip(net.meta["normalization"]["sites"], calib_max)
            if s in acts and s not in bounded and m > 1.0 + 1e-6]
    if over:
        msg = "calibration activations exceed 1 at " + ", ".join(f"layer {s} (max {m:.4g})" for s, m in over)
        if strict:
            raise ConversionError(msg)
        warnings.warn(msg, stacklevel=3)


def reset_states(snn: SNNNetwork, batch=None):
    """Set every membrane to its initial potential and zero all counters."""
    if batch is not None:
        snn.batch = int(batch)
    for site in snn.sites:
        site.reset(snn.batch)
    snn.counts = [np.zeros((snn.batch,) + tuple(s.shape), dtype=np.int32) for s in snn.sites]
    snn.sum_u = [np.zeros((snn.batch,) + tuple(s.shape), dtype=np.float64) for s in snn.sites]
    if snn.accumulator is not None:
        snn.acc = np.zeros((snn.batch,) + tuple(snn.accumulator.shape), dtype=np.float64)


def step(snn: SNNNetwork, input_t) -> list:
    """Advance one time step; returns the binary spike tensor of every IF site.

    ``input_t`` is batched ``(snn.batch, *input_shape)`` and is fed to the
    first stage's linear layers (analog current or spikes alike).
    """
    h = np.asarray(input_t, dtype=np.float64)
    spikes = []
    for st, site, count, su in zip(snn.stages, snn.sites, snn.counts, snn.sum_u):
        u = st.apply(h)
        if not np.all(np.isfinite(u)):
            raise SimulationError(f"non-finite membrane increment at layer {st.layer_index}")
        site.V += u
        fired = site.V >= site.v_th * (1.0 - FIRE_EPS)
        site.V -= site.v_th * fired
        count += fired
        su += u
        h = fired.astype(np.float64)
        spikes.append(fired)
    if snn.accumulator is not None:
        u = snn.accumulator.apply(h)
        if not np.all(np.isfinite(u)):
            raise SimulationError(f"non-finite membrane increment at layer {snn.accumulator.layer_index}")
        snn.acc += u
    return spikes


@dataclass
class SimTrace:
    """Outcome of one simulation of ``T`` steps (batched over inputs)."""

    T: int
    counts: list
    v_final: list
    sum_u: list
    site_layers: list
    v0: float
    v_th: float
    input_rate: np.ndarray
    output: np.ndarray
    batched: bool = True
    spikes: list | None = None

    @property
    def rates(self):
        return [c / self.T for c in self.counts]

    @property
    def residuals(self):
        """Re = V(T) / T per site."""
        return [v / self.T for v in self.v_final]

    def conservation_error(self):
        """Max over neurons of |sum U - (V_th N + V(T) - V0)|, per site."""
        return [float(np.max(np.abs(su - (self.v_th * n + v - self.v0)), initial=0.0))
                for su, n, v in zip(self.sum_u, self.counts, self.v_final)]

    def sample(self, i):
        """Single-sample view of a batched trace."""
        return SimTrace(
            self.T, [c[i] for c in self.counts], [v[i] for v in self.v_final], [s[i] for s in self.sum_u],
            list(self.site_layers), self.v0, self.v_th, self.input_rate[i], self.output[i], False,
            None if self.spikes is None else [[s[i] for s in step_sp] for step_sp in self.spikes],
        )


def _encode(x, encoder, T, rng, batched):
    if encoder == "constant-current":
        for _ in range(T):
            yield x
    elif encoder == "bernoulli":
        for _ in range(T):
            yield (rng.random(x.shape) < x).astype(np.float64)
    else:
        for t in range(T):
            yield x[t]


def run(snn: SNNNetwork, x, T, encoder="constant-current", seed=0, record_spikes=False, debug=False):
    """Reset, simulate ``T`` steps and read out.

    ``x`` is one sample or a batch for the analog encoders; for
    ``encoder='spikes'`` it is a binary array with a leading time axis of
    length ``T``. Returns ``(SimTrace, output)`` where output is the last
    site's firing rate (spike-count) or the accumulator potential divided by
    T (membrane-accumulate). ``debug`` asserts membrane conservation.
    """
    if int(T) != T or T < 1:
        raise SimulationError(f"T must be a positive integer, got {T}")
    if encoder not in ENCODERS:
        raise ValueError(f"encoder must be one of {ENCODERS}")
    T = int(T)
    x = np.asarray(x, dtype=np.float64)
    frame_shape = x.shape[1:] if encoder == "spikes" else x.shape
    if encoder == "spikes" and x.shape[0] != T:
        raise SimulationError(f"spike input has {x.shape[0]} steps, expected T={T}")
    if tuple(frame_shape) == tuple(snn.input_shape):
        batched = False
        x = x[:, None] if encoder == "spikes" else x[None]
    elif tuple(frame_shape[1:]) == tuple(snn.input_shape):
        batched = True
    else:
        raise SimulationError(f"input shape {frame_shape} does not match network input {snn.input_shape}")
    batch = x.shape[1] if encoder == "spikes" else x.shape[0]
    reset_states(snn, batch)

    rng = np.random.default_rng(seed)
    input_sum = np.zeros((batch,) + tuple(snn.input_shape))
    recorded = [] if record_spikes else None
    for inp in _encode(x, encoder, T, rng, batched):
        input_sum += inp
        sp = step(snn, inp)
        if record_spikes:
            recorded.append([s.copy() for s in sp])

    if snn.readout == "spike-count":
        output = snn.counts[-1] / T
    else:
        output = snn.acc / T
    trace = SimTrace(
        T=T,
        counts=[c.copy() for c in snn.counts],
        v_final=[s.V.copy() for s in snn.sites],
        sum_u=[s.copy() for s in snn.sum_u],
        site_layers=snn.site_layers,
        v0=snn.v0,
        v_th=snn.v_th,
        input_rate=input_sum / T,
        output=output,
        batched=True,
        spikes=recorded,
    )
    if debug:
        for site, err in enumerate(trace.conservation_error()):
            if err > 1e-5:
                raise SimulationError(f"membrane conservation violated at site {site}: error {err:.3g}")
    if not batched:
        trace = trace.sample(0)
        output = output[0]
    return trace, output


# -- trace export -------------------------------------------------------------

def write_trace_csv(trace: SimTrace, path):
    """One row per neuron: layer, neuron index, N, r, V(T) (plus sample index when batched)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        head = ["layer", "neuron", "N", "r", "V_T"]
        writer.writerow(["sample"] + head if trace.batched else head)
        for site, (n, v) in enumerate(zip(trace.counts, trace.v_final)):
            layer = trace.site_layers[site]
            samples = range(n.shape[0]) if trace.batched else [None]
            for s in samples:
                nn_ = (n[s] if s is not None else n).reshape(-1)
                vv = (v[s] if s is not None else v).reshape(-1)
                for k in range(nn_.size):
                    row = [layer, k, int(nn_[k]), f"{nn_[k] / trace.T:.6f}", repr(float(vv[k]))]
                    writer.writerow(([s] + row) if s is not None else row)


TRACE_MAGIC = b"SNNT"
TRACE_VERSION = 1


def write_trace_binary(trace: SimTrace, path):
    """Compact binary trace; layout documented in ``docs/formats.md``."""
    t = trace if trace.batched else _as_batched(trace)
    batch = t.counts[0].shape[0] if t.counts else 1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHIIIdd", TRACE_MAGIC, TRACE_VERSION, t.T, len(t.counts), batch, t.v0, t.v_th))
        for layer, n, v in zip(t.site_layers, t.counts, t.v_final):
            shape = n.shape[1:]
            fh.write(struct.pack("<iB", layer, len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(np.ascontiguousarray(n, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_trace_binary(path) -> dict:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sHIIIdd")
    magic, version, T, nsites, batch, v0, v_th = struct.unpack_from("<4sHIIIdd", data, 0)
    if magic != TRACE_MAGIC or version != TRACE_VERSION:
        raise SimulationError("not a trace file")
    off = head
    layers, counts, vfinal = [], [], []
    for _ in range(nsites):
        layer, nd = struct.unpack_from("<iB", data, off)
        off += 5
        shape = struct.unpack_from(f"<{nd}I", data, off)
        off += 4 * nd
        size = batch * int(np.prod(shape))
        counts.append(np.frombuffer(data, "<i4", size, off).reshape((batch,) + shape))
        off += 4 * size
        vfinal.append(np.frombuffer(data, "<f8", size, off).reshape((batch,) + shape))
        off += 8 * size
        layers.append(layer)
    if off != len(data):
        raise SimulationError("trailing bytes in trace file")
    return {"T": T, "v0": v0, "v_th": v_th, "site_layers": layers, "counts": counts, "v_final": vfinal}


def _as_batched(trace):
    return SimTrace(trace.T, [c[None] for c in trace.counts], [v[None] for v in trace.v_final],
                    [s[None] for s in trace.sum_u], trace.site_layers, trace.v0, trace.v_th,
                    trace.input_rate[None], np.asarray(trace.output)[None], True)
