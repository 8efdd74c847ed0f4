"""Command-line entry point: ``dmgnn {train,evaluate,aggregate,chat,describe,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .episode import METRIC_FIELDS, OracleAgent, PolicyAgent
from .harness import (
    ConfigError,
    ExperimentConfig,
    PRESETS,
    aggregate,
    chat,
    describe,
    evaluate,
    gradient_check,
    load_config,
    load_policy,
    preset,
    train,
)
from .learn import MODES
from .ontology import load_ontology
from .policy import POLICY_KINDS


def _ontology(args):
    onto = load_ontology(args.ontology)
    return onto.restrict(args.domains.split(",")) if args.domains else onto


def _cmd_train(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for key in ("policy", "mode", "train_dialogues", "eval_every", "eval_dialogues"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.domains:
        overrides["domains"] = tuple(args.domains.split(","))
    if args.ontology:
        overrides["ontology"] = args.ontology
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    cfg = replace(cfg, **overrides) if overrides else cfg
    run = train(cfg, args.out)
    print(f"run directory: {run}")
    print((run / "metrics.csv").read_text(encoding="utf-8"), end="")
    return 0


def _cmd_evaluate(args) -> int:
    domains = args.domains.split(",") if args.domains else None
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            rep = evaluate(args.checkpoint, args.n, args.seed, args.ontology, domains, fh)
    else:
        rep = evaluate(args.checkpoint, args.n, args.seed, args.ontology, domains)
    print(json.dumps({"n": rep.n, **{k: getattr(rep, k) for k in METRIC_FIELDS}}, indent=1))
    return 0


def _cmd_aggregate(args) -> int:
    rows = aggregate(args.runs, args.out)
    if args.out is None:
        for r in rows:
            print(",".join(r))
    else:
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_chat(args) -> int:
    if args.checkpoint in (None, "oracle"):
        onto = _ontology(args)
        agent = OracleAgent()
    else:
        policy, onto, _ = load_policy(args.checkpoint, args.ontology)
        agent = PolicyAgent(policy, "greedy")
    chat(agent, onto, sys.stdin, sys.stdout, args.seed, args.dump_features)
    return 0


def _cmd_describe(args) -> int:
    describe(_ontology(args), sys.stdout)
    return 0


def _cmd_gradcheck(args) -> int:
    onto = _ontology(args)
    worst = 0.0
    for kind in POLICY_KINDS:
        for mode in MODES:
            errs = [gradient_check(kind, mode, onto, args.seed + k) for k in range(args.seeds)]
            worst = max(worst, *errs)
            status = "ok" if max(errs) <= args.tol else "FAIL"
            print(f"{kind:<8} {mode:<6} max rel err {max(errs):.3e} {status}")
    return 0 if worst <= args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmgnn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--ontology", help="ontology JSON (default: bundled 7-domain ontology)")
        p.add_argument("--domains", help="comma-separated domain restriction")
        p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("train", help="train a configuration (resumable)")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--policy", choices=POLICY_KINDS)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--train-dialogues", dest="train_dialogues", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-dialogues", dest="eval_dialogues", type=int)
    common(p, None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint or of the teacher")
    p.add_argument("--checkpoint", default="oracle")
    p.add_argument("-n", type=int, default=500)
    p.add_argument("--log", help="write per-turn trajectories (JSON lines) here")
    common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("aggregate", help="box-plot statistics across run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("chat", help="type dialogue acts against a checkpoint or the teacher")
    p.add_argument("--checkpoint", default="oracle")
    p.add_argument("--dump-features", action="store_true", help="print the feature vectors of every turn")
    common(p)
    p.set_defaults(func=_cmd_chat)

    p = sub.add_parser("describe", help="parameter tables of every architecture")
    common(p)
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every architecture and loss mode")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    common(p)
    p.set_defaults(func=_cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
