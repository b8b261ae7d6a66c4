"""``tmr`` command line: pretrain, verify, bench, probe."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import (BUFFER_KEYS, ConfigError, TrainConfig, config_key, format_value,
                     parse_pairs, read_config_file)

log = logging.getLogger("tmr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage already; keep that but name the problem clearly
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: config error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _flag(key):
    return "--" + key.replace("_", "-")


def _add_config_flags(p):
    g = p.add_argument_group("config keys (each overrides the config file)")
    g.add_argument("--config", metavar="PATH", help="key = value file; flags override it")
    for f in fields(TrainConfig):
        key = config_key(f.name)
        ch = f.metadata.get("choices")
        extra = f" {{{', '.join(ch)}}}" if ch else ""
        g.add_argument(_flag(key), dest=f"cfg:{key}", metavar="V", default=None,
                       help=f"{f.metadata['help']}{extra} (key {key}, default {format_value(f.default)})")


def resolve_config(args):
    """Config file, then flags. Collects every problem before raising."""
    pairs = read_config_file(args.config) if getattr(args, "config", None) else []
    explicit = []
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            explicit.append((k[4:], v))
    cfg = parse_pairs(pairs + explicit)
    cfg.validate()
    return cfg, {k for k, _ in pairs + explicit}


def build_parser():
    p = _Parser(prog="tmr", description="Replaced-token-detection pretraining with a prioritized replay buffer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("pretrain", help="run pretraining; writes metrics.csv, report.json, checkpoints")
    _add_config_flags(sp)

    sv = sub.add_parser("verify", help="run a property suite and print measured vs tolerance")
    sv.add_argument("suite", choices=("sampling", "gradients", "buffer", "drift"))
    sv.add_argument("--drift-steps", type=int, default=2000, help="training steps for the drift suite")
    _add_config_flags(sv)

    sb = sub.add_parser("bench", help="time 100-iteration runs of each weight-update strategy")
    sb.add_argument("--iterations", type=int, default=100)
    sb.add_argument("--rounds", type=int, default=1, help="interleaved repetitions; fastest kept")
    sb.add_argument("--output", metavar="CSV", help="also write the table here")
    _add_config_flags(sb)

    sq = sub.add_parser("probe", help="fine-tune on a classification task from several checkpoints")
    sq.add_argument("checkpoints", nargs="+", help="manifest paths or glob patterns")
    sq.add_argument("--task", help="label<TAB>text file (default: bundled probe task)")
    sq.add_argument("--seeds", type=int, default=3, help="fine-tuning seeds per checkpoint")
    sq.add_argument("--probe-epochs", type=int, default=3, help="fine-tuning epochs")
    sq.add_argument("--probe-lr", type=float, default=5e-4, help="peak fine-tuning learning rate")
    sq.add_argument("--output", metavar="CSV", help="comparison table path (default: stdout)")
    _add_config_flags(sq)
    return p


def cmd_pretrain(args):
    from .trainer import TrainingAborted, run_pretraining
    cfg, given = resolve_config(args)
    for w in cfg.warnings():
        log.warning(w)
    if cfg.mode == "electra_baseline":
        ignored = sorted(given & set(BUFFER_KEYS))
        if ignored:
            log.warning("mode electra_baseline has no buffer; ignoring %s", ", ".join(ignored))

    def progress(m):
        if m.step % cfg.eval_every == 0:
            log.info("step %d loss_g %.4f loss_d %.4f exact_recovery %.4f",
                     m.step, m.loss_g, m.loss_d, m.drift_exact_recovery)

    try:
        report = run_pretraining(cfg, progress=progress)
    except TrainingAborted as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    print(f"wrote {Path(cfg.out_dir) / 'metrics.csv'} ({len(report.metrics)} rows)")
    for c in report.checkpoints:
        print(f"checkpoint {c}")
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_suite
    cfg, _ = resolve_config(args)
    ok = run_suite(args.suite, steps=args.drift_steps, seed=cfg.seed)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args):
    from .trainer import bench_strategies
    cfg, _ = resolve_config(args)
    rows, ok = bench_strategies(cfg, steps=args.iterations, rounds=args.rounds)
    cols = ("strategy", "seconds_per_100_iters", "backward_calls_per_step")
    w = csv.DictWriter(sys.stdout, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.output:
        with open(args.output, "w", newline="", encoding="utf-8") as fh:
            cw = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            cw.writeheader()
            cw.writerows(rows)
    print(f"ordering grad_norm > grad_bound > loss_diff, loss_diff <= 1.10 x baseline: "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK


def cmd_probe(args):
    from .probe import compare_checkpoints, expand_checkpoints, write_comparison
    cfg, _ = resolve_config(args)
    try:
        paths = expand_checkpoints(args.checkpoints)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = compare_checkpoints(paths, args.task, seeds=seeds, epochs=args.probe_epochs,
                               lr=args.probe_lr, jobs=cfg.jobs)
    write_comparison(rows, args.output or sys.stdout)
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "verify": cmd_verify, "bench": cmd_bench, "probe": cmd_probe}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
