"""``snnconv`` command-line entry point.

Exit codes: 0 ok, 1 usage or configuration error, 2 stage failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, plots, serialize, spikeio, transform, verify
from . import network as nw
from . import snn as sim
from . import pipeline as pl
from .config import STAGES, PipelineConfig
from .config import load as load_config
from .errors import ConfigError, SNNConvError
from .training import write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_STAGE, EXIT_VERIFY = 0, 1, 2, 3
log = logging.getLogger("snnconv")


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


class StageFailed(Exception):
    def __init__(self, stage, exc):
        self.stage = stage
        super().__init__(f"stage {stage} failed: {exc}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- artifact naming --------------------------------------------------------------

ARTIFACTS = {
    "train": "train.json",
    "replace": "replace.json",
    "fuse": "fuse.json",
    "finetune": "finetune.json",
    "convert": "convert.snn.json",
}
NET_STAGES = ("train", "replace", "fuse", "finetune")


def _out_dir(cfg):
    return Path(cfg.run["out"])


def _attach_log(out):
    """Timestamped sidecar log; artifacts themselves carry no timestamps."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "pipeline.log"
    for h in log.handlers:
        if isinstance(h, logging.FileHandler) and Path(h.baseFilename) == path.resolve():
            return
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)


def _detach_log():
    for h in list(log.handlers):
        if isinstance(h, logging.FileHandler):
            h.close()
            log.removeHandler(h)


def _target(args, cfg, stage):
    if getattr(args, "output", None):
        path = Path(args.output)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return out / ARTIFACTS[stage]


def _load_net(path):
    net = serialize.load(path)
    nw.validate(net)
    return net


def _load_snn(path):
    net, settings = serialize.load_snn(path)
    nw.validate(net)
    return net, settings, sim.convert(net, **settings)


# -- inputs -----------------------------------------------------------------------

def _sim_input(path, snn, T):
    """Returns ``(x, encoder)`` from a .spk, .pgm or .npy file."""
    path = Path(path)
    if path.suffix == ".spk":
        stream = spikeio.read_spk(path)
        if stream.T != T:
            raise ValueError(f"stream has {stream.T} steps but T={T}")
        sp = stream.spikes().astype(np.float64)
        return sp.reshape((T,) + tuple(snn.input_shape)), "spikes"
    if path.suffix == ".pgm":
        img = spikeio.read_pgm(path)
        return img.reshape(snn.input_shape), None
    return np.load(path), None


# -- subcommands ------------------------------------------------------------------

def cmd_train(args, cfg):
    X, y, _, _, calib = pl.load_data(cfg)
    net, history = pl.stage_train(cfg, X, y, calib)
    path = serialize.save(net, _target(args, cfg, "train"))
    write_history_csv(history, path.with_suffix(".history.csv"))
    print(f"trained: loss {history[-1].loss:.4f} -> {path}")


def cmd_replace(args, cfg):
    if args.init:
        cfg.set("replace", "init", args.init)
    if args.kernel:
        cfg.set("replace", "kernel", args.kernel)
    net = pl.stage_replace(cfg, _load_net(args.network))
    path = serialize.save(net, _target(args, cfg, "replace"))
    print(f"replaced {len(net.meta.get('replaced_layers', []))} layer(s) -> {path}")


def cmd_fuse(args, cfg):
    net = pl.stage_fuse(cfg, _load_net(args.network))
    path = serialize.save(net, _target(args, cfg, "fuse"))
    print(f"fused -> {path}")


def cmd_finetune(args, cfg):
    if args.levels:
        cfg.set("quant", "levels", args.levels)
    X, y, _, _, calib = pl.load_data(cfg)
    net, history = pl.stage_finetune(cfg, _load_net(args.network), X, y, calib)
    path = serialize.save(net, _target(args, cfg, "finetune"))
    write_history_csv(history, path.with_suffix(".history.csv"))
    print(f"finetuned: loss {history[-1].loss:.4f} -> {path}")


def cmd_convert(args, cfg):
    for key in ("v0", "v_th", "readout", "maxpool", "T"):
        val = getattr(args, key, None)
        if val is not None:
            cfg.set("sim", key, val)
    net = _load_net(args.network)
    pl.stage_convert(cfg, net)
    path = serialize.save_snn(_target(args, cfg, "convert"), net, **pl.sim_settings(cfg))
    print(f"converted (V0={cfg.sim['v0']}) -> {path}")


def cmd_simulate(args, cfg):
    T = args.T or cfg.sim["T"]
    _, _, snn = _load_snn(args.snn)
    encoder = args.encoder or cfg.sim["encoder"]
    if args.input:
        x, forced = _sim_input(args.input, snn, T)
        encoder = forced or encoder
    else:
        _, _, x, _, _ = pl.load_data(cfg)
    trace, _ = sim.run(snn, x, T, encoder=encoder, seed=cfg.run["seed"], debug=args.debug)
    prefix = Path(args.output) if args.output else _out_dir(cfg) / "simulate"
    prefix.parent.mkdir(parents=True, exist_ok=True)
    sim.write_trace_csv(trace, prefix.with_suffix(".trace.csv"))
    sim.write_trace_binary(trace, prefix.with_suffix(".trace.bin"))
    for row in transform.firing_rate_profile(trace):
        print(f"site {row['site']} (layer {row['layer']}): mean rate {row['mean_rate']:.4f}")


def cmd_encode(args, cfg):
    if args.images:
        frames = [spikeio.read_pgm(p) for p in args.images]
    else:
        frames, _ = spikeio.synth_detection_scene(cfg.run["seed"], 1)
    if args.encoder == "integrate":
        stream = spikeio.encode_integrate(frames, args.threshold, args.T)
    else:
        stream = spikeio.encode_bernoulli(frames, cfg.run["seed"], args.T)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    spikeio.write_spk(stream, out)
    print(f"{stream.width}x{stream.height}, T={stream.T}, {int(stream.spikes().sum())} spikes -> {out}")


def cmd_reconstruct(args, cfg):
    stream = spikeio.read_spk(args.stream)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    spikeio.write_pgm(spikeio.reconstruct_gray(stream), out, maxval=args.maxval)
    print(f"reconstructed -> {out}")


def _labels_metric(cfg, yt):
    return (yt, "accuracy") if cfg.train["loss"] == "ce" else (yt, "iou")


def cmd_verify(args, cfg):
    if args.floor_grid:
        bad = verify.floor_identity_grid()
        if bad:
            for z, T, v0, n, e in bad[:20]:
                print(f"mismatch z={z} T={T} V0={v0}: simulated {n}, expected {e}")
            raise VerificationFailed(f"{len(bad)} grid point(s) disagree with the floor formula")
        print("floor-identity grid: all points match")
    if args.quant_ratio:
        err, ratio = verify.quantization_error_stats(args.T or 10, args.offset, n=args.samples, seed=cfg.run["seed"])
        err0, _ = verify.quantization_error_stats(args.T or 10, 0.0, n=args.samples, seed=cfg.run["seed"])
        print(f"T={args.T or 10}: floor error {err0:.5f}, offset {args.offset:g} error {err:.5f}, ratio {ratio:.4f}")
    if args.check:
        for path in args.check:
            _check_artifact(Path(path))
            print(f"ok: {path}")
    if args.compare or args.sweep:
        net_path, snn_path = args.compare or args.sweep
        ann = _load_net(net_path)
        _, settings, snn = _load_snn(snn_path)
        _, _, Xt, yt, _ = pl.load_data(cfg)
        labels, metric = _labels_metric(cfg, yt)
        scale = pl.output_scale(ann)
        if sim.architecture_signature(ann) != snn.signature:
            raise VerificationFailed("ANN and SNN architectures do not match")
        out = _out_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        if args.compare:
            T = args.T or cfg.sim["T"]
            rep = verify.compare_ann_snn(ann, snn, Xt, T, labels, metric, cfg.sim["encoder"], cfg.run["seed"], scale)
            rep.write_csv(out / "verify.report.csv")
            print(rep.summary())
        else:
            Ts = args.Ts or cfg.sim["sweep"]
            rows = verify.sweep_T(ann, snn, Xt, Ts, labels, metric, match_levels=args.match_levels,
                                  encoder=cfg.sim["encoder"], seed=cfg.run["seed"], output_scale=scale)
            verify.write_sweep_csv(rows, out / "verify.sweep.csv")
            for r in rows:
                print(f"T={r['T']}: output mean |err| {r['output_mean_err']:.5f}, {metric} {r['metric']:.4f}")
    if not (args.floor_grid or args.quant_ratio or args.check or args.compare or args.sweep):
        raise UsageError("verify: choose at least one of --floor-grid, --quant-ratio, --compare, --sweep, --check")


def _check_artifact(path):
    if not path.exists():
        raise VerificationFailed(f"missing artifact {path}")
    try:
        if path.suffix == ".spk":
            spikeio.read_spk(path)
        elif path.name.endswith(".snn.json"):
            _load_snn(path)
        elif path.suffix == ".json":
            _load_net(path)
        elif path.name.endswith(".trace.bin"):
            sim.read_trace_binary(path)
        elif path.suffix == ".pgm":
            spikeio.read_pgm(path)
        else:
            raise VerificationFailed(f"do not know how to check {path}")
    except (SNNConvError, ValueError) as exc:
        raise VerificationFailed(f"{path}: {exc}") from None


def cmd_report(args, cfg):
    if args.rate_curve:
        out = Path(args.output or f"rate_curve_T{args.rate_curve}.svg")
        plots.write(plots.rate_curve_svg(args.rate_curve), out)
        print(f"rate curve -> {out}")
        return
    _write_report(Path(args.directory or cfg.run["out"]), cfg.sim["T"])


def _write_report(out, T):
    if not out.is_dir():
        raise FileNotFoundError(f"no artifact directory {out}")
    lines = []
    plots.write(plots.rate_curve_svg(T), out / "report.rate_curve.svg")
    sweep = out / "verify.sweep.csv"
    if sweep.exists():
        with open(sweep) as fh:
            rows = [{"T": int(r["T"]), "output_mean_err": float(r["output_mean_err"]),
                     "metric": float(r["metric"]) if r["metric"] else None} for r in csv.DictReader(fh)]
        plots.write(plots.sweep_svg(rows, "output_mean_err", "mean |r - x|"), out / "report.error_vs_T.svg")
        if all(r["metric"] is not None for r in rows):
            plots.write(plots.sweep_svg(rows, "metric", "task metric"), out / "report.metric_vs_T.svg")
        lines += [f"T={r['T']}: mean |r - x| {r['output_mean_err']:.5f}" for r in rows]
    trace = out / "simulate.trace.bin"
    if trace.exists():
        t = sim.read_trace_binary(trace)
        for layer, n in zip(t["site_layers"], t["counts"]):
            lines.append(f"layer {layer}: mean rate {n.mean() / t['T']:.4f}")
    (out / "report.summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


# -- pipeline -----------------------------------------------------------------------

def cmd_pipeline(args, cfg):
    enabled = [s for s in STAGES if cfg.stages[s]]
    if not enabled:
        print("all stages disabled; nothing to do")
        return
    out = _out_dir(cfg)
    _attach_log(out)
    log.info("pipeline start, stages: %s, seed %d", ", ".join(enabled), cfg.run["seed"])
    (out / "config.ini").write_text(cfg.dumps())
    X, y, Xt, yt, calib = pl.load_data(cfg)
    net, snn, trace = None, None, None

    def previous_net(stage):
        nonlocal net
        if net is not None:
            return net
        upto = NET_STAGES.index(stage) if stage in NET_STAGES else len(NET_STAGES)
        for s in reversed(NET_STAGES[:upto]):
            if (out / ARTIFACTS[s]).exists():
                log.info("%s: reusing %s", stage, out / ARTIFACTS[s])
                return _load_net(out / ARTIFACTS[s])
        if cfg.run["input_network"]:
            return _load_net(cfg.run["input_network"])
        raise FileNotFoundError(f"no input network for stage {stage}; enable an earlier stage or set run.input_network")

    def run_stage(name, fn):
        log.info("%s: start", name)
        try:
            result = fn()
        except (SNNConvError, ValueError, OSError, ArithmeticError) as exc:
            log.error("%s: %s", name, exc)
            raise StageFailed(name, exc) from exc
        log.info("%s: done", name)
        return result

    if cfg.stages["train"]:
        net, hist = run_stage("train", lambda: pl.stage_train(cfg, X, y, calib))
        serialize.save(net, out / ARTIFACTS["train"])
        write_history_csv(hist, out / "train.history.csv")
    if cfg.stages["replace"]:
        net = run_stage("replace", lambda: pl.stage_replace(cfg, previous_net("replace")))
        serialize.save(net, out / ARTIFACTS["replace"])
    if cfg.stages["fuse"]:
        net = run_stage("fuse", lambda: pl.stage_fuse(cfg, previous_net("fuse")))
        serialize.save(net, out / ARTIFACTS["fuse"])
    if cfg.stages["finetune"]:
        net, hist = run_stage("finetune", lambda: pl.stage_finetune(cfg, previous_net("finetune"), X, y, calib))
        serialize.save(net, out / ARTIFACTS["finetune"])
        write_history_csv(hist, out / "finetune.history.csv")
    if cfg.stages["convert"]:
        ann = net = previous_net("convert") if net is None else net
        snn = run_stage("convert", lambda: pl.stage_convert(cfg, ann))
        serialize.save_snn(out / ARTIFACTS["convert"], ann, **pl.sim_settings(cfg))

    def converted():
        nonlocal net, snn
        if snn is None:
            net, _, snn = _load_snn(out / ARTIFACTS["convert"])
        return net, snn

    if cfg.stages["simulate"]:
        def simulate():
            _, s = converted()
            return sim.run(s, Xt, cfg.sim["T"], encoder=cfg.sim["encoder"], seed=cfg.run["seed"])[0]
        trace = run_stage("simulate", simulate)
        sim.write_trace_csv(trace, out / "simulate.trace.csv")
        sim.write_trace_binary(trace, out / "simulate.trace.bin")
        transform.write_profile_csv(transform.firing_rate_profile(trace), out / "simulate.profile.csv")
    if cfg.stages["verify"]:
        def run_verify():
            ann, s = converted()
            labels, metric = _labels_metric(cfg, yt)
            kw = {"encoder": cfg.sim["encoder"], "seed": cfg.run["seed"], "output_scale": pl.output_scale(ann)}
            rep = verify.compare_ann_snn(ann, s, Xt, cfg.sim["T"], labels, metric, **kw)
            rows = verify.sweep_T(ann, s, Xt, cfg.sim["sweep"], labels, metric, match_levels=True, **kw)
            return rep, rows
        rep, rows = run_stage("verify", run_verify)
        rep.write_csv(out / "verify.report.csv")
        (out / "verify.report.txt").write_text(rep.summary() + "\n")
        verify.write_sweep_csv(rows, out / "verify.sweep.csv")
        print(rep.summary())
    if cfg.stages["report"]:
        run_stage("report", lambda: _write_report(out, cfg.sim["T"]))
    log.info("pipeline done")


# -- argument parsing ----------------------------------------------------------------

COMMANDS = {
    "train": cmd_train, "replace": cmd_replace, "fuse": cmd_fuse, "finetune": cmd_finetune,
    "convert": cmd_convert, "simulate": cmd_simulate, "encode": cmd_encode, "reconstruct": cmd_reconstruct,
    "verify": cmd_verify, "pipeline": cmd_pipeline, "report": cmd_report,
}


def _ints(text):
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI config file (default: built-in defaults)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override run.seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="artifact directory (run.out)")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE",
                        help="override any config key; flags win over the config file")

    p = _Parser(prog="snnconv", parents=[common], description="ANN to SNN conversion toolkit")
    p.add_argument("--version", action="version", version=f"snnconv {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    s = add("train", "train the configured ReLU network")
    s.add_argument("-o", "--output")
    s = add("replace", "replace max-pool / upsample layers")
    s.add_argument("network")
    s.add_argument("-o", "--output")
    s.add_argument("--init", choices=("avg-init", "random-init"))
    s.add_argument("--kernel", type=int, choices=(2, 3))
    s = add("fuse", "fold BatchNorm into the preceding layer")
    s.add_argument("network")
    s.add_argument("-o", "--output")
    s = add("finetune", "normalize, swap to Quant-ReLU and finetune")
    s.add_argument("network")
    s.add_argument("-o", "--output")
    s.add_argument("--levels", type=int)
    s = add("convert", "map a finetuned network onto IF neurons")
    s.add_argument("network")
    s.add_argument("-o", "--output")
    s.add_argument("--v0", type=float)
    s.add_argument("--v-th", dest="v_th", type=float)
    s.add_argument("--readout", choices=sim.READOUTS + ("auto",))
    s.add_argument("--maxpool", choices=("error", "avg"))
    s.add_argument("-T", type=int, help="intended step budget (warns if it differs from the Quant-ReLU grid)")
    s = add("simulate", "run a converted network")
    s.add_argument("snn")
    s.add_argument("--input", help=".spk stream, .pgm image or .npy array (default: configured test split)")
    s.add_argument("-T", type=int)
    s.add_argument("--encoder", choices=("constant-current", "bernoulli"))
    s.add_argument("-o", "--output", help="output prefix for .trace.csv / .trace.bin")
    s.add_argument("--debug", action="store_true", help="assert membrane conservation")
    s = add("encode", "encode gray images into a .spk stream")
    s.add_argument("images", nargs="*", help="PGM frames (default: one synthetic scene)")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--encoder", choices=("integrate", "bernoulli"), default="integrate")
    s.add_argument("--threshold", type=float, default=1.0)
    s.add_argument("-T", type=int, default=64)
    s = add("reconstruct", "reconstruct a gray image from a .spk stream")
    s.add_argument("stream")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--maxval", type=int, default=255)
    s = add("verify", "oracle checks and ANN/SNN comparisons")
    s.add_argument("--floor-grid", action="store_true", help="single-neuron floor-formula grid")
    s.add_argument("--eq11-grid", dest="floor_grid", action="store_true", help=argparse.SUPPRESS)
    s.add_argument("--quant-ratio", action="store_true", help="floor vs round quantization error")
    s.add_argument("--offset", type=float, default=0.5)
    s.add_argument("--samples", type=int, default=1_000_000)
    s.add_argument("--compare", nargs=2, metavar=("NETWORK", "SNN"))
    s.add_argument("--sweep", nargs=2, metavar=("NETWORK", "SNN"))
    s.add_argument("--Ts", type=_ints, help="sweep step budgets, ascending")
    s.add_argument("--match-levels", action="store_true", help="regrid the ANN's Quant-ReLU to each T")
    s.add_argument("--check", nargs="+", metavar="ARTIFACT", help="reload and re-validate artifacts")
    s.add_argument("-T", type=int)
    add("pipeline", "run every enabled stage of the configured flow")
    s = add("report", "summaries and SVG plots")
    s.add_argument("directory", nargs="?")
    s.add_argument("--rate-curve", type=int, metavar="T", help="only plot IF rate vs input at this T")
    s.add_argument("-o", "--output")
    return p


def _make_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    for assignment in getattr(args, "set", []) or []:
        cfg.override(assignment)
    if getattr(args, "seed", None) is not None:
        cfg.set("run", "seed", args.seed)
    if getattr(args, "out", None) is not None:
        cfg.set("run", "out", args.out)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("snnconv: a subcommand is required (see --help)")
        cfg = _make_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"snnconv: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"snnconv: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailed as exc:
        print(f"snnconv: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except StageFailed as exc:
        print(f"snnconv: {exc} (earlier artifacts kept)", file=sys.stderr)
        return EXIT_STAGE
    except (SNNConvError, ValueError, OSError, ArithmeticError) as exc:
        print(f"snnconv: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    finally:
        _detach_log()


if __name__ == "__main__":
    sys.exit(main())
