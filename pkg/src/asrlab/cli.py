"""Command-line interface.

Subcommands: synth, train-base, finetune, eval, sweep, analyze, report,
verify. Option precedence: flags > environment (ASRLAB_SEED,
ASRLAB_WORKERS, ASRLAB_OUT) > config file. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, DivergenceError
from .harness import (
    ENV_OUT,
    ENV_WORKERS,
    cmd_analyze,
    cmd_eval,
    cmd_finetune,
    cmd_report,
    cmd_sweep,
    cmd_synth,
    cmd_train_base,
    cmd_verify,
    load_config,
    workspace,
)
from .train import FreezeMask


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=False, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--workers", type=int, default=None, help="parallel sweep workers")
    parser.add_argument("--out", default=None, help="workspace root directory")


def _out_root(args) -> Path:
    out = args.out or os.environ.get(ENV_OUT) or "runs"
    return Path(out)


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get(ENV_WORKERS)
    return max(1, int(env)) if env else 1


def _config(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_config(args.config, seed_override=args.seed)


def build_parser() -> _Parser:
    parser = _Parser(prog="asrlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("synth", "synthesize the corpus for a config"),
        ("train-base", "train the base model for a config"),
        ("sweep", "run all configured finetune sweep cells"),
        ("analyze", "phoneme error analysis against standard speech"),
        ("report", "emit WER tables and budget/layer curves"),
        ("verify", "recompute reports from the results log and diff"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)

    p = sub.add_parser("finetune", help="finetune one speaker under one mask/budget")
    _common(p)
    p.add_argument("--speaker", required=True)
    p.add_argument("--mask", required=True, help="comma-separated groups, e.g. enc.0,joint")
    p.add_argument("--budget", default="all", help="'all', seconds, or 'NN%%'")

    p = sub.add_parser("eval", help="decode a split with a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--hyps-out", default=None)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        cfg = _config(args)
        manifest = cmd_synth(cfg, _out_root(args))
        dur = sum(r.duration_s for r in manifest.records)
        print(f"corpus {cfg.name}: {len(manifest.records)} utterances, {dur/60.0:.1f} min audio")
    elif args.command == "train-base":
        cfg = _config(args)
        record = cmd_train_base(cfg, _out_root(args))
        print(
            f"base {cfg.name}: dev {record.init_dev_loss:.2f} -> {record.final_dev_loss:.3f}, "
            f"test WER {record.test_wer:.3f}, steps {record.steps}"
        )
    elif args.command == "finetune":
        cfg = _config(args)
        mask = FreezeMask(frozenset(args.mask.split(",")))
        record = cmd_finetune(cfg, _out_root(args), args.speaker, mask, _budget_arg(args.budget))
        if record.error:
            print(f"finetune failed: {record.error}", file=sys.stderr)
            return 2
        print(
            f"finetune {args.speaker} mask={mask.label} budget={args.budget}: "
            f"WER {record.base_test_wer:.3f} -> {record.test_wer:.3f} "
            f"(rel {record.rel_improvement:.1%})"
        )
    elif args.command == "sweep":
        cfg = _config(args)
        records = cmd_sweep(cfg, _out_root(args), workers=_workers(args))
        done = [r for r in records if r.kind == "finetune" and r.error is None]
        failed = [r for r in records if r.error]
        print(f"sweep {cfg.name}: {len(done)} cells complete, {len(failed)} failed")
        for r in failed:
            print(f"  FAILED {r.plan_key}: {r.error}", file=sys.stderr)
    elif args.command == "eval":
        summary = cmd_eval(args.ckpt, args.manifest, args.corpus_dir, args.split, args.hyps_out)
        print(json.dumps(summary, sort_keys=True, indent=1))
    elif args.command == "analyze":
        cfg = _config(args)
        report = cmd_analyze(cfg, _out_root(args))
        kl = report["kl_produced"]
        print(
            f"analysis {cfg.name}: KL(base||standard) {kl['base_vs_standard']:.4f}, "
            f"KL(finetuned||standard) {kl['finetuned_vs_standard']:.4f}"
        )
        top = report["top_missed"]
        print(f"top missed phonemes: {' '.join(top['phonemes'])} (share {top['share']:.1%})")
    elif args.command == "report":
        cfg = _config(args)
        report = cmd_report(cfg, _out_root(args))
        ws = workspace(_out_root(args), cfg)
        for row in report["table1"]:
            print(
                f"{row['group']}: base {row['base_wer']:.3f} -> finetuned "
                f"{row['finetuned_wer']:.3f} (rel {row['mean_rel_improvement']:.1%})"
            )
        if report["e0_vs_full_encoder"]:
            cmp = report["e0_vs_full_encoder"]
            print(f"enc.0+joint achieves {cmp['ratio']:.1%} of full-encoder+joint improvement")
        print(f"reports written to {ws.reports_dir}")
    elif args.command == "verify":
        cfg = _config(args)
        checks = cmd_verify(cfg, _out_root(args))
        ok = True
        for name, passed, detail in checks:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
            ok &= passed
        if not ok:
            return 2
    return 0


def _budget_arg(value: str):
    if value == "all" or value.endswith("%"):
        return value
    return float(value)


def main() -> None:
    try:
        raise SystemExit(run())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(1)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        raise SystemExit(2)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        raise SystemExit(3)


if __name__ == "__main__":
    main()
