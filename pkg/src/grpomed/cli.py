"""``grpomed`` command line: train, search, ablate, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 check failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import experiment as ex
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DivergenceError, UsageError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK = 4


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (defaults are used when omitted)")
    common.add_argument("--seed", type=_u64, help="master seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("--workers", type=_positive, default=None, help="worker count (default 1)")

    p = argparse.ArgumentParser(prog="grpomed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="embed, cluster and train the policy")
    t.add_argument("--timing", action="store_true", help="record wall_ms (breaks byte-identical reruns)")

    s = sub.add_parser("search", parents=[common], help="GA + MCTS treatment search for one patient")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--patient", type=int, required=True)

    a = sub.add_parser("ablate", parents=[common], help="ppo_reduction or fairness_sweep")
    a.add_argument("--mode", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--corrupt-gradient", choices=ex.MODULES, help=argparse.SUPPRESS)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def cmd_train(cfg, args):
    try:
        outcome = ex.run_train(cfg, record_time=args.timing)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    log = outcome.result.log
    if log:
        print(f"final mean return: {log[-1].mean_return:.6f} (iteration {log[-1].iteration})")
    else:
        print("final mean return: n/a (0 iterations)")
    print(f"wrote {cfg.output_dir}")
    return EXIT_OK


def cmd_search(cfg, args):
    ckpt = ex.load_checkpoint(args.checkpoint)
    report, _ = ex.run_search(cfg, ckpt, args.patient, workers=cfg.workers)
    print(f"patient {report.patient_id}: selected candidate {report.selected} of {len(report.candidates)}")
    print(f"actions: {' '.join(str(a) for a in report.best_actions)}")
    print(f"estimate: {report.best_value:.6f}")
    return EXIT_OK


def cmd_ablate(cfg, args):
    if args.mode not in ex.ABLATION_MODES:
        print(f"error: unknown mode {args.mode!r}; choose one of: {', '.join(ex.ABLATION_MODES)}", file=sys.stderr)
        return EXIT_CONFIG
    if args.mode == "ppo_reduction":
        worst, rows, _ = ex.run_ppo_reduction(cfg)
        print(f"ppo_reduction: {len(rows)} minibatches, max |grpo - ppo| = {worst:.3e}")
        return EXIT_OK if worst < 1e-10 else EXIT_CHECK
    table, _ = ex.run_fairness_sweep(cfg, workers=cfg.workers)
    for r in table:
        print(f"alpha3={r['alpha3']:g}: fairness_gap={r['fairness_gap']:.4f} final_mean_return={r['final_mean_return']:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    worst, failing = ex.run_gradcheck(cfg, corrupt=args.corrupt_gradient)
    for m in ex.MODULES:
        status = "FAIL" if m in failing else "ok"
        print(f"{m}: max relative error {worst[m]:.3e} [{status}]")
    if failing:
        print(f"error: gradient check failed for {', '.join(failing)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"train": cmd_train, "search": cmd_search, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
