"""JSON network files.

Layout (see ``docs/formats.md``)::

    {
      "format": "snnconv-network", "version": 1,
      "input_shape": [1, 8, 8],
      "layers": [
        {"kind": "Conv2D", "stride": 1, "padding": 1, "groups": 1,
         "w": {"shape": [4, 1, 3, 3], "dtype": "<f4", "data": "<base64>"},
         "b": {...}},
        {"kind": "QuantReLU", "levels": 64, "offset": 0.5, "clip": 1.0}
      ],
      "normalization": {"lambdas": [...], "percentile": 99.9},   # optional
      "metadata": {...}                                          # optional
    }

Array payloads are little-endian float32, base64-encoded, row-major.
"""

import base64
import json
from pathlib import Path

import numpy as np

from .errors import SNNConvError
from .network import ARRAY_PARAMS, LayerSpec, NetworkGraph

FORMAT = "snnconv-network"
VERSION = 1


def encode_array(arr) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "<f4",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(obj) -> np.ndarray:
    if obj.get("dtype", "<f4") != "<f4":
        raise SNNConvError(f"unsupported array dtype {obj['dtype']!r}")
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return arr.reshape(obj["shape"])


def network_to_dict(net: NetworkGraph) -> dict:
    layers = []
    for layer in net.layers:
        entry = {"kind": layer.kind}
        for key, value in layer.params.items():
            entry[key] = encode_array(value) if key in ARRAY_PARAMS else value
        layers.append(entry)
    out = {"format": FORMAT, "version": VERSION, "input_shape": list(net.input_shape), "layers": layers}
    meta = dict(net.meta)
    if "normalization" in meta:
        out["normalization"] = meta.pop("normalization")
    if meta:
        out["metadata"] = meta
    return out


def network_from_dict(obj: dict) -> NetworkGraph:
    if obj.get("format") != FORMAT:
        raise SNNConvError(f"not a network file (format={obj.get('format')!r})")
    if obj.get("version") != VERSION:
        raise SNNConvError(f"unsupported network file version {obj.get('version')!r}")
    layers = []
    for entry in obj["layers"]:
        params = {k: (decode_array(v) if k in ARRAY_PARAMS else v) for k, v in entry.items() if k != "kind"}
        layers.append(LayerSpec(entry["kind"], params))
    meta = dict(obj.get("metadata", {}))
    if "normalization" in obj:
        meta["normalization"] = obj["normalization"]
    return NetworkGraph(layers, tuple(obj["input_shape"]), meta)


def dumps(net: NetworkGraph) -> str:
    return json.dumps(network_to_dict(net), indent=1, sort_keys=False) + "\n"


def loads(text: str) -> NetworkGraph:
    try:
        return network_from_dict(json.loads(text))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, SNNConvError):
            raise
        raise SNNConvError(f"malformed network file: {exc}") from None


def save(net: NetworkGraph, path) -> Path:
    path = Path(path)
    path.write_text(dumps(net))
    return path


def load(path) -> NetworkGraph:
    return loads(Path(path).read_text())


# -- converted networks ----------------------------------------------------------

SNN_FORMAT = "snnconv-snn"
SNN_KEYS = ("v0", "v_th", "readout", "maxpool")


def snn_to_dict(net: NetworkGraph, v0, v_th, readout, maxpool="error") -> dict:
    """A converted network is its ANN plus the IF settings used to convert it."""
    return {"format": SNN_FORMAT, "version": VERSION, "v0": float(v0), "v_th": float(v_th),
            "readout": readout, "maxpool": maxpool, "network": network_to_dict(net)}


def save_snn(path, net: NetworkGraph, **settings) -> Path:
    path = Path(path)
    path.write_text(json.dumps(snn_to_dict(net, **settings), indent=1) + "\n")
    return path


def load_snn(path):
    """Returns ``(network, settings)``; pass both to :func:`snnconv.snn.convert`."""
    try:
        obj = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise SNNConvError(f"malformed converted-network file: {exc}") from None
    if obj.get("format") != SNN_FORMAT:
        raise SNNConvError(f"not a converted-network file (format={obj.get('format')!r})")
    if obj.get("version") != VERSION:
        raise SNNConvError(f"unsupported converted-network file version {obj.get('version')!r}")
    try:
        settings = {k: obj[k] for k in SNN_KEYS}
    except KeyError as exc:
        raise SNNConvError(f"converted-network file lacks {exc}") from None
    return network_from_dict(obj["network"]), settings
