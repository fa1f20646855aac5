"""Command-line entry point: train, simulate, variance-report, gen-data.

Options resolve as command-line flags, then ``--config`` file entries
(``key = value`` lines), then defaults.  Outputs go under ``--out``, or
``$BANDITGNN_OUT`` when the flag is absent.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

from . import harness
from .bandit import PlayMode, PolicyState
from .errors import (BanditGNNError, ContractError, DataError, NumericError, ParameterError,
                     ParseError, StructuralError, UsageError)
from .graph import generate_synthetic, save_graph
from .model import ModelParams

OUT_ENV = "BANDITGNN_OUT"
DEFAULT_OUT = "runs"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if str(text).lower() in ("", "none", "auto") else int(text)


def _opt_float(text):
    return None if str(text).lower() in ("", "none", "auto") else float(text)


def _opt_mode(text):
    return None if str(text).lower() in ("", "none", "auto") else PlayMode(text).value


_SYNTH = {
    "n": (int, 100, "synthetic graph: number of vertices"),
    "classes": (int, 3, "synthetic graph: number of classes"),
    "avg_degree": (float, 6.0, "synthetic graph: expected degree"),
    "feature_dim": (int, 16, "synthetic graph: feature dimension"),
    "homophily": (float, 0.8, "synthetic graph: fraction of intra-class edges"),
}

_TRAIN = {
    "dataset": (str, "cora", "'cora', 'synthetic' or a dataset directory"),
    "arch": (str, "gcn", "architecture: gcn or attentive"),
    "k": (int, 1, "neighbors sampled per vertex"),
    "mode": (lambda s: PlayMode(s).value, "single_play", "single_play or multiple_play"),
    "sampler": (str, "bandit", "bandit or uniform"),
    "epochs": (int, 200, "training epochs"),
    "batch_size": (int, 256, "labeled vertices per step"),
    "hidden": (int, 16, "hidden width"),
    "lr": (float, 0.01, "Adam learning rate"),
    "weight_decay": (float, 5e-4, "decoupled weight decay"),
    "dropout": (float, 0.5, "dropout rate on layer inputs"),
    "eta": (float, 0.4, "uniform mixing rate of the bandit"),
    "T": (_opt_int, None, "bandit horizon; none = epochs x steps per epoch"),
    "delta": (_opt_float, None, "bandit learning rate; none = scheduled from T"),
    "seed": (int, 0, "random seed"),
    "debug": (_bool, False, "assert sampling closure and update locality each step"),
    **_SYNTH,
}

SUBCOMMANDS = {
    "train": ("train a GNN with a bandit neighbor sampler", _TRAIN),
    "simulate": ("run one bandit row against a synthetic reward stream", {
        "n": (int, 8, "number of arms"),
        "k": (int, 2, "plays per step"),
        "T": (int, 10000, "horizon"),
        "stream": (str, "skewed", "uniform, skewed, drifting or switch"),
        "mode": (_opt_mode, None, "single_play, multiple_play or none (by k)"),
        "eta": (float, 0.4, "uniform mixing rate"),
        "delta": (_opt_float, None, "learning rate; none = scheduled"),
        "seed": (int, 0, "random seed"),
    }),
    "variance-report": ("per-vertex effective variance under uniform, bandit and oracle q", {
        "run": (str, None, "directory holding model.json and policy.json from train"),
        "dataset": _TRAIN["dataset"],
        **_SYNTH,
        "seed": (int, 0, "seed of the synthetic graph"),
    }),
    "gen-data": ("write a synthetic stochastic-block dataset", {
        **_SYNTH,
        "seed": (int, 0, "random seed"),
    }),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="banditgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (help_text, options) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value file (default: none)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or {DEFAULT_OUT})")
        for key, (conv, default, text) in options.items():
            flag = "--" + key.replace("_", "-")
            if conv is _bool:
                p.add_argument(flag, dest=key, nargs="?", const=True, type=_bool,
                               help=f"{text} (default: {default})")
            else:
                p.add_argument(flag, dest=key, type=conv, help=f"{text} (default: {default})")
    return parser


def read_config_file(path, options) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in options:
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        try:
            values[key] = options[key][0](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{no}: bad value for {key}: {exc}") from exc
    return values


def resolve(argv) -> tuple[str, dict, Path]:
    """Subcommand, fully-resolved options and output directory."""
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command", None)
    if command is None:
        raise UsageError("missing command; choose one of " + ", ".join(SUBCOMMANDS))
    options = SUBCOMMANDS[command][1]
    resolved = {key: entry[1] for key, entry in options.items()}
    config_path = args.pop("config", None)
    if config_path is not None:
        resolved.update(read_config_file(config_path, options))
    out = args.pop("out", None) or os.environ.get(OUT_ENV) or DEFAULT_OUT
    resolved.update(args)
    return command, resolved, Path(out)


def write_manifest(out: Path, command: str, options: dict) -> None:
    lines = [f"command = {command}"] + [f"{k} = {v}" for k, v in sorted(options.items())]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _synthetic_kwargs(opts):
    return dict(num_nodes=opts["n"], avg_degree=opts["avg_degree"],
                num_classes=opts["classes"], feature_dim=opts["feature_dim"],
                seed=opts["seed"], homophily=opts["homophily"])


def _graph(opts):
    if opts["dataset"] == "synthetic":
        return harness.resolve_graph("synthetic", **_synthetic_kwargs(opts))
    return harness.resolve_graph(opts["dataset"])


def cmd_train(opts, out: Path) -> str:
    cfg = harness.TrainConfig(**{f: opts[f] for f in (
        "epochs", "batch_size", "k", "hidden", "lr", "weight_decay", "dropout", "eta", "T",
        "delta", "mode", "arch", "sampler", "seed", "debug")})
    res = harness.train(cfg, _graph(opts), out)
    return (f"test_accuracy={res.test_accuracy:.4f} test_micro_f1={res.test_f1:.4f} "
            f"best_val={res.best_val:.4f} best_epoch={res.best_epoch} "
            f"clip_events={res.policy.clip_events} out={out}")


def cmd_simulate(opts, out: Path) -> str:
    trace = harness.simulate_regret(opts["n"], opts["k"], opts["T"], opts["stream"],
                                    opts["seed"], opts["mode"], opts["eta"], opts["delta"])
    trace.write_csv(out / "regret.csv")
    return (f"cum_Ve={trace.cum_ve[-1]:.6g} cum_Ve_star={trace.cum_ve_star[-1]:.6g} "
            f"bound={trace.bound[-1]:.6g} holds={trace.holds()} mode={trace.mode.value} "
            f"out={out}")


def cmd_variance_report(opts, out: Path) -> str:
    if opts["run"] is None:
        raise UsageError("variance-report needs --run pointing at a train output directory")
    run = Path(opts["run"])
    model_path, policy_path = run / "model.json", run / "policy.json"
    for p in (model_path, policy_path):
        if not p.is_file():
            raise UsageError(f"missing checkpoint {p}; run 'banditgnn train' first")
    params = ModelParams.load(model_path)
    policy = PolicyState.load(policy_path)
    graph = _graph(opts)
    if policy.row_offsets[-1] != graph.num_edges or policy.num_vertices != graph.num_nodes:
        raise StructuralError("policy checkpoint does not match the dataset's graph")
    if params.attentive:
        graph = graph.with_weights("attentive")
    rows = harness.variance_report(graph, params, policy)
    harness.write_variance_report(out / "variance.csv", rows)
    n = max(len(rows), 1)
    means = [sum(getattr(r, c) for r in rows) / n for c in ("uniform", "bandit", "oracle")]
    return ("mean_Ve uniform={:.6g} bandit={:.6g} oracle={:.6g} ".format(*means)
            + f"vertices={len(rows)} out={out}")


def cmd_gen_data(opts, out: Path) -> str:
    graph = generate_synthetic(**_synthetic_kwargs(opts))
    save_graph(graph, out)
    return f"vertices={graph.num_nodes} edges={graph.num_edges} out={out}"


COMMANDS = {
    "train": cmd_train,
    "simulate": cmd_simulate,
    "variance-report": cmd_variance_report,
    "gen-data": cmd_gen_data,
}


def run(argv=None) -> int:
    """Execute a command; returns the process exit status."""
    try:
        command, opts, out = resolve(argv)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, command, opts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            summary = COMMANDS[command](opts, out)
    except (UsageError, ParameterError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, StructuralError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BanditGNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(summary)
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())
