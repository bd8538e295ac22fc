"""Command line entry point: ``deep-pursuit <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numeric incident.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import time
from pathlib import Path

from .adversarial import epsilon_sweep
from .checkpoint import checkpoint_load
from .config import ExperimentConfig, mode_label, parse_config, parse_config_text, parse_number_list
from .dictionary import dictionary_metrics
from .exceptions import CheckpointError, ConfigError, DataError, NumericIncident, TopologyError
from .experiments import TRACE_FIELDS, load_datasets, pursuit_mode, run_experiment, trace_rows, write_table
from .operators import NetworkOperators
from .pursuit import PursuitConfig, run_pursuit
from .records import CSV_FIELDS, RunRecord

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SMOKE_CONFIG = """\
[network]
arch = dense
dims = 8, 16
classes = 2

[pursuit]
modes = L-TP, L-BP, DP, DP-res
T = 2
norm = pure

[train]
epochs = 5
batch_size = 20
lr = 0.1
train_samples = 200
test_samples = 200
seeds = 0

[attack]

[output]
timestamp = false
"""

log = logging.getLogger("deep_pursuit")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train/sweep")
    p.add_argument("--mode", required=True, help="L-TP, L-BP, DP or DP-res")
    p.add_argument("--T", type=int, default=None, help="pursuit iterations (default: first configured)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deep-pursuit", description="Unrolled pursuit networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("train", "train every configured cell and save checkpoints"),
                           ("sweep", "train, then run the epsilon sweep, metrics and traces")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output root (default from [output] dir)")

    p = sub.add_parser("attack", help="FGSM epsilon sweep on a saved checkpoint")
    _add_model_args(p)
    p.add_argument("--epsilons", default=None, help="comma list, fractions allowed (default from config)")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")

    p = sub.add_parser("metrics", help="coherence, frame potential and Welch bound of a checkpoint")
    _add_model_args(p)

    p = sub.add_parser("trace", help="per-iteration objective and per-layer residuals")
    _add_model_args(p)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")

    p = sub.add_parser("smoke", help="tiny built-in end-to-end run")
    p.add_argument("--out", default=None, help="output root (default: a temporary directory)")
    return parser


def _load_model(args, cfg: ExperimentConfig):
    label = mode_label(args.mode)
    spec = cfg.network_spec(label)
    params = checkpoint_load(args.checkpoint, spec)
    T = args.T if args.T is not None else (0 if label == "L-TP" else cfg.pursuit.T[0])
    return label, params, PursuitConfig(T=T, mode=pursuit_mode(label), alpha=cfg.pursuit.alpha)


def _cmd_run(args, sweep: bool) -> int:
    cfg = parse_config(args.config)
    result = run_experiment(cfg, out_dir=args.out, sweep=sweep)
    print(result.run_dir)
    for err in result.errors:
        print(f"skipped: {err}", file=sys.stderr)
    return EXIT_OK


def _emit(fields, rows, out) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            write_table(fh, fields, rows)
    else:
        write_table(sys.stdout, fields, rows)


def _cmd_attack(args) -> int:
    cfg = parse_config(args.config)
    label, params, pconf = _load_model(args, cfg)
    epsilons = cfg.attack.epsilons
    if args.epsilons:
        try:
            epsilons = parse_number_list(args.epsilons)
        except ValueError as exc:
            raise ConfigError(f"--epsilons: {exc}") from exc
    _, test = load_datasets(cfg)
    rows = epsilon_sweep(test.as_tuple(), params, pconf, sorted(set((0.0,) + tuple(epsilons))),
                         mode_label=label, seed=params.seed, config_hash=cfg.hash())
    _emit(CSV_FIELDS, [{f: getattr(r, f) for f in CSV_FIELDS} for r in rows], args.out)
    return EXIT_OK


def _cmd_metrics(args) -> int:
    cfg = parse_config(args.config)
    _, params, _ = _load_model(args, cfg)
    print(json.dumps(dictionary_metrics(params), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_trace(args) -> int:
    cfg = parse_config(args.config)
    label, params, pconf = _load_model(args, cfg)
    _, test = load_datasets(cfg)
    n = args.samples or cfg.attack.trace_samples
    traced = PursuitConfig(T=pconf.T, mode=pconf.mode, alpha=pconf.alpha, trace=True)
    state = run_pursuit(test.images[:n], params, traced, NetworkOperators(params))
    rec = RunRecord(config_hash=cfg.hash(), seed=params.seed, mode=label, T=pconf.T)
    _emit(TRACE_FIELDS, trace_rows(rec, state), args.out)
    return EXIT_OK


def _cmd_smoke(args) -> int:
    cfg = parse_config_text(SMOKE_CONFIG, "<smoke>")
    start = time.perf_counter()
    if args.out is None:
        with tempfile.TemporaryDirectory() as tmp:
            result = run_experiment(cfg, out_dir=tmp)
            modes = sorted({r.mode for r in result.records})
    else:
        result = run_experiment(cfg, out_dir=args.out)
        modes = sorted({r.mode for r in result.records})
        print(result.run_dir)
    print(f"smoke: {len(result.records)} rows for modes {', '.join(modes)} "
          f"in {time.perf_counter() - start:.1f}s")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"train": lambda: _cmd_run(args, sweep=False), "sweep": lambda: _cmd_run(args, sweep=True),
                "attack": lambda: _cmd_attack(args), "metrics": lambda: _cmd_metrics(args),
                "trace": lambda: _cmd_trace(args), "smoke": lambda: _cmd_smoke(args)}
    try:
        return handlers[args.command]()
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericIncident as exc:
        print(f"numeric incident: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
