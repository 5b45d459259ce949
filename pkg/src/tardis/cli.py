"""Experiment runner.

Subcommands: train, eval, simulate-paths, probe-gradients, gradcheck,
gen-data. Exit codes: 0 success, 1 usage error, 2 numerical failure. Report
paths write delimited output (CSV/JSONL) and render a matplotlib figure next
to it unless --no-plot is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

GRADCHECK_THRESHOLD = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tardis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training configuration")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None,
                   help="copy task: evaluate at this sequence length")
    p.add_argument("--n-examples", type=int, default=256)
    p.add_argument("--with-aux", action="store_true",
                   help="also report the read-only auxiliary head's loss")

    p = sub.add_parser("simulate-paths", help="wormhole chain-length simulations")
    p.add_argument("--model-kind", required=True,
                   choices=("tardis-uniform", "uMANN", "urMANN"))
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n-sims", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t0", type=int, default=None)
    p.add_argument("--t1", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("probe-gradients", help="long-range Jacobian norm probes")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--d-r", type=int, default=12)
    p.add_argument("--gaps", default="10,20,40", help="comma-separated t1-t0 gaps")
    p.add_argument("--t0", type=int, default=5)
    p.add_argument("--policy", default="oracle", choices=("oracle", "uniform"))
    p.add_argument("--activation", default="linear", choices=("linear", "tanh"))
    p.add_argument("--w-norm", type=float, default=0.9)
    p.add_argument("--memory-gain", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", required=True,
                   choices=("ops", "controller", "full-step", "gumbel-st"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt one analytic gradient; the check must fail")

    p = sub.add_parser("gen-data", help="write stroke digit records to a CSV file")
    p.add_argument("--n-digits", type=int, default=50,
                   help="number of digit records to emit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _cmd_train(args) -> int:
    from .checkpoint import model_arrays, model_manifest, save_checkpoint
    from .config import parse_config_file
    from .training import DivergenceError, train_run

    path = Path(args.config)
    if not path.exists():
        print(f"train: config file not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = parse_config_file(path)
    except ValueError as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        config.seed = args.seed

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    with open(metrics_path, "w") as fh:
        def sink(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            print(json.dumps(record, sort_keys=True))

        try:
            result = train_run(config, metrics_sink=sink)
        except DivergenceError as exc:
            dump_path = out_dir / "divergence_dump.json"
            dump_path.write_text(json.dumps(exc.dump, sort_keys=True, indent=2))
            print(f"train: {exc} (dump: {dump_path})", file=sys.stderr)
            return EXIT_NUMERICAL

    save_checkpoint(out_dir / "checkpoint.trds", model_arrays(result.model),
                    model_manifest(result.model, config, step=result.steps_run))
    if not args.no_plot and result.metrics:
        from .plots import save_training_curves

        save_training_curves(result.metrics, out_dir / "curves.png")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, restore_model
    from .config import RunConfig, build_task
    from .training import evaluate

    path = Path(args.checkpoint)
    if not path.exists():
        print(f"eval: checkpoint not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    arrays, manifest = load_checkpoint(path)
    model = restore_model(arrays, manifest)
    config = RunConfig(**manifest["config"])
    if args.max_len is not None:
        config.max_len = max(config.max_len, args.max_len)
    task = build_task(config)
    seed = args.seed if args.seed is not None else config.seed
    metrics = evaluate(model, task, seed, n_examples=args.n_examples,
                       length=args.max_len, with_aux=args.with_aux)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .analysis import PATH_CSV_FIELDS, path_stats_rows, simulate_paths

    try:
        stats = simulate_paths(args.model_kind, args.T, args.k, args.n_sims,
                               seed=args.seed, t0=args.t0, t1=args.t1)
    except ValueError as exc:
        print(f"simulate-paths: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PATH_CSV_FIELDS)
        writer.writeheader()
        writer.writerows(path_stats_rows(stats))
    if not args.no_plot:
        from .plots import save_path_stats_figure

        save_path_stats_figure(stats, out.with_suffix(".png"))
    print(f"mean chain length: {stats.mean_chain_len:.4f} (T/k-1 = {args.T / args.k - 1:.4f})")
    return EXIT_OK


PROBE_CSV_FIELDS = ("policy", "gap", "t0", "t1", "norm_full", "norm_recurrent",
                    "norm_memory")


def _cmd_probe(args) -> int:
    from .analysis import jacobian_probe, make_probe_model
    from .rng import substream

    try:
        gaps = [int(g) for g in args.gaps.split(",") if g.strip()]
    except ValueError:
        print(f"probe-gradients: bad --gaps {args.gaps!r}", file=sys.stderr)
        return EXIT_USAGE
    if not gaps:
        print("probe-gradients: no gaps given", file=sys.stderr)
        return EXIT_USAGE

    memory_model = make_probe_model(args.d, args.d_r, args.seed,
                                    spectral_norm_w=args.w_norm,
                                    memory_gain=args.memory_gain,
                                    activation=args.activation)
    rows = []
    try:
        for gap in gaps:
            t0, t1 = args.t0, args.t0 + gap
            inputs = substream(args.seed, f"probe-inputs/{gap}").normal(
                size=(t1, args.d)) * 0.1
            for policy, model in (("none", memory_model), (args.policy, memory_model)):
                probe = jacobian_probe(model, t0, t1, inputs,
                                       read_policy=policy, seed=args.seed)
                rows.append({"policy": policy, "gap": gap, "t0": t0, "t1": t1,
                             "norm_full": probe.norm_full,
                             "norm_recurrent": probe.norm_recurrent,
                             "norm_memory": probe.norm_memory})
    except FloatingPointError as exc:
        print(f"probe-gradients: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PROBE_CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    if not args.no_plot:
        from .plots import save_probe_figure

        save_probe_figure(rows, out.with_suffix(".png"))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .checks import run_scope

    results = run_scope(args.scope, seed=args.seed, corrupt=args.inject_fault)
    worst = 0.0
    for name in sorted(results):
        err = results[name]
        worst = max(worst, err)
        print(f"{name:40s} max rel err {err:.3e}")
    print(f"worst: {worst:.3e} (threshold {GRADCHECK_THRESHOLD:.0e})")
    return EXIT_OK if worst < GRADCHECK_THRESHOLD else EXIT_NUMERICAL


def _cmd_gen_data(args) -> int:
    from .rng import substream
    from .tasks import GLYPH_TEMPLATES, _jitter_glyph, write_stroke_file

    rng = substream(args.seed, "gen-data")
    digits = []
    for _ in range(args.n_digits):
        label, quads = GLYPH_TEMPLATES[int(rng.integers(len(GLYPH_TEMPLATES)))]
        digits.append((label, _jitter_glyph(quads, rng)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_stroke_file(out, digits)
    print(f"wrote {len(digits)} digit records to {out}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "simulate-paths": _cmd_simulate,
    "probe-gradients": _cmd_probe,
    "gradcheck": _cmd_gradcheck,
    "gen-data": _cmd_gen_data,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"tardis: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"tardis {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"tardis {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
