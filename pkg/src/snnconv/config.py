"""Pipeline configuration: one INI file of ``key = value`` sections plus overrides.

Every section and key is declared in :data:`SCHEMA` with its type and valid
range; unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
import copy
from pathlib import Path

from .errors import ConfigError
from .quant import QuantConfig

STAGES = ("train", "replace", "fuse", "finetune", "convert", "simulate", "verify", "report")


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(",", " ").split()]


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return parse


def _range(kind, lo=None, hi=None, lo_open=False):
    def parse(v):
        x = kind(v)
        if lo is not None and (x < lo or (lo_open and x == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}, got {x}")
        if hi is not None and x > hi:
            raise ValueError(f"must be <= {hi}, got {x}")
        return x
    return parse


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (_range(int, 0), 0),
        "out": (str, "artifacts"),
        "input_network": (str, ""),
    },
    "stages": {name: (_bool, True) for name in STAGES},
    "data": {
        "dataset": (_choice("separable", "patterns", "scenes"), "patterns"),
        "train_size": (_range(int, 1), 600),
        "test_size": (_range(int, 1), 200),
        "calibration_size": (_range(int, 1), 200),
    },
    "model": {
        "arch": (_choice("mlp", "convnet", "detector"), "mlp"),
        "hidden": (_ints, [48, 32]),
        "batchnorm": (_bool, True),
    },
    "train": {
        "loss": (_choice("ce", "mse"), "ce"),
        "epochs": (_range(int, 0), 15),
        "lr": (_range(float, 0, lo_open=True), 0.05),
        "momentum": (_range(float, 0, 0.999), 0.9),
        "batch_size": (_range(int, 1), 32),
    },
    "replace": {
        "init": (_choice("avg-init", "random-init"), "avg-init"),
        "kernel": (_range(int, 2, 3), 2),
        "add_activation": (_bool, True),
    },
    "normalize": {
        "percentile": (_range(float, 0, 100, lo_open=True), 99.9),
    },
    "quant": {
        "levels": (_range(int, 1), 64),
        "offset": (_range(float, 0, 0.999), 0.5),
        "clip": (_range(float, 0, lo_open=True), 1.0),
        "epochs": (_range(int, 0), 8),
        "lr": (_range(float, 0, lo_open=True), 0.02),
        "momentum": (_range(float, 0, 0.999), 0.9),
        "batch_size": (_range(int, 1), 32),
    },
    "sim": {
        "T": (_range(int, 1), 64),
        "v0": (_range(float, 0, 0.999), 0.5),
        "v_th": (_range(float, 0, lo_open=True), 1.0),
        "readout": (_choice("auto", "spike-count", "membrane-accumulate"), "auto"),
        "encoder": (_choice("constant-current", "bernoulli"), "constant-current"),
        "maxpool": (_choice("error", "avg"), "error"),
        "sweep": (_ints, [32, 64, 128, 256]),
    },
}


class PipelineConfig:
    """Validated nested mapping ``section -> key -> value``; attribute access by section."""

    def __init__(self, values=None):
        self._values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        self._values = copy.deepcopy(self._values)
        for sec, keys in (values or {}).items():
            for key, raw in keys.items():
                self.set(sec, key, raw)

    def set(self, section, key, raw):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        parser = SCHEMA[section][key][0]
        try:
            self._values[section][key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None

    def override(self, assignment):
        """Apply a ``section.key=value`` string."""
        name, sep, raw = assignment.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
        self.set(section, key.strip(), raw.strip())

    def __getattr__(self, name):
        values = self.__dict__.get("_values", {})
        if name in values:
            return dict(values[name])
        raise AttributeError(name)

    def to_dict(self):
        return copy.deepcopy(self._values)

    def quant_config(self) -> QuantConfig:
        q = self._values["quant"]
        return QuantConfig(levels=q["levels"], offset=q["offset"], clip=q["clip"], epochs=q["epochs"],
                           lr=q["lr"], momentum=q["momentum"], batch_size=q["batch_size"],
                           seed=self._values["run"]["seed"])

    def dumps(self):
        lines = []
        for sec, keys in self._values.items():
            lines.append(f"[{sec}]")
            for k, v in keys.items():
                if isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = str(v).lower()
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def loads(text) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return PipelineConfig({sec: dict(parser[sec]) for sec in parser.sections()})


def load(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def reference_path() -> Path:
    return Path(__file__).parent / "data" / "reference.ini"


def reference_network_path() -> Path:
    """Finetuned network produced by running the pipeline on :func:`reference_path`."""
    return Path(__file__).parent / "data" / "reference.json"
