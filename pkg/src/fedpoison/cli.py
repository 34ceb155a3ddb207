"""``fedpoison`` command line: train, sweep, detect, analyze, oracle."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from fedpoison import experiment, oracles
from fedpoison.attacks import AttackKind
from fedpoison.errors import FedPoisonError

log = logging.getLogger("fedpoison")


def _load_spec(args):
    spec = experiment.parse_config(args.config)
    cfg = spec.config
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.threads is not None:
        cfg = cfg.with_(threads=args.threads)
    return replace(spec, config=cfg)


def cmd_train(args):
    spec = _load_spec(args)
    res = experiment.train(spec, args.out_dir, args.gradient_log)
    m = res.metrics
    print(f"{spec.report} epoch {m.epoch}: hr5={m.hr:.4f} ndcg5={m.ndcg:.4f}")
    return 0


def cmd_sweep(args):
    spec = _load_spec(args)
    if args.seed is not None:
        spec = replace(spec, sweep=replace(spec.sweep, seeds=(args.seed,)))
    table, failures = experiment.sweep(spec, args.out_dir, args.jobs)
    sys.stdout.write(table)
    for f in failures:
        print(f"failed: {f['cell']}: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


def cmd_detect(args):
    spec = _load_spec(args)
    attacks = [AttackKind(a) for a in args.attack] if args.attack else None
    outcomes = experiment.detect(spec, args.out_dir, attacks, phase2=not args.no_phase2)
    for o in outcomes:
        line = f"{o.attack.value}: detector accuracy {o.accuracy:.3f}"
        if o.phase2 is not None:
            line += f", filtered-run hr5={o.phase2.metrics.hr:.4f}"
        print(line)
    return 0


def cmd_analyze(args):
    spec = _load_spec(args)
    _, proj = experiment.analyze(spec, args.out_dir, args.model)
    print(f"wrote hardness.csv and pca.csv to {args.out_dir} "
          f"(explained variance {proj.explained_variance[0]:.3f}, "
          f"{proj.explained_variance[1]:.3f})")
    return 0


def cmd_oracle(args):
    results = oracles.run_all(args.check or None, seed=args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="fedpoison", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, type=Path, help="INI experiment config")
            sp.add_argument("--out-dir", type=Path, default=Path("out"))
            sp.add_argument("--threads", type=int, default=None,
                            help="client threads per round (results do not depend on it)")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="run one configuration")
    common(sp)
    sp.add_argument("--gradient-log", type=Path, default=None,
                    help="write per-(round, client) updates plus a role sidecar")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="attack x defense x ratio grid over seeds")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("detect", help="two-phase malicious-update detection")
    common(sp)
    sp.add_argument("--attack", action="append", choices=[k.value for k in AttackKind],
                    help="attack to run the protocol for (repeatable)")
    sp.add_argument("--no-phase2", action="store_true", help="stop after detector training")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("analyze", help="hardness profile and PCA of client updates")
    common(sp)
    sp.add_argument("--model", type=Path, default=None, help="checkpoint to analyse instead of "
                                                            "training")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("oracle", help="brute-force equivalence checks")
    common(sp, needs_config=False)
    sp.add_argument("--check", action="append", choices=list(oracles.ALL_CHECKS))
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedPoisonError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
