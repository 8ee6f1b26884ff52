"""Command-line interface: generate, train, eval, sweep.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config, validate_config
from .experiment import (
    evaluate,
    generate_dataset,
    load_dataset,
    run_experiment,
    run_sweep,
    write_report,
)
from .graphs import DataError, chronological_split
from .training import (
    AdamState,
    NumericError,
    TrainConfig,
    build_model,
    load_checkpoint,
    restore_model,
)

_PROTOCOL_NAMES = {
    "env-synthetic": "env_synthetic",
    "attribute": "attribute_filter",
    "feature-shift": "feature_shift",
}


def _cmd_generate(args) -> int:
    if args.config:
        norm = load_config(args.config)
    else:
        protocol: dict = {"kind": _PROTOCOL_NAMES[args.protocol], "seed": args.seed}
        for key, value in (
            ("num_nodes", args.num_nodes), ("num_snapshots", args.snapshots),
            ("channels", args.channels), ("sigma_e", args.sigma_e),
            ("q_bar", args.q_bar), ("shifted_attr", args.shifted_attr),
            ("p_bar", args.p_bar),
        ):
            if value is not None:
                protocol[key] = value
        norm = validate_config({"protocol": protocol})
    generate_dataset(norm, args.out)
    print(f"dataset written to {args.out}")
    return 0


def _cmd_train(args) -> int:
    norm = load_config(args.config)
    out_dir = args.out or norm.get("out_dir")
    report = run_experiment(norm, out_dir)
    agg = report["aggregate"]
    line = (f"auc_no_ood {agg['auc_no_ood']['mean']:.4f}±{agg['auc_no_ood']['std']:.4f}  "
            f"auc_ood {agg['auc_ood']['mean']:.4f}±{agg['auc_ood']['std']:.4f}")
    if agg["i_acc"]:
        line += f"  i_acc {agg['i_acc']['mean']:.4f}±{agg['i_acc']['std']:.4f}"
    print(line)
    if out_dir:
        print(f"artifacts written to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    ckpt_config, arrays = load_checkpoint(args.checkpoint)
    norm = validate_config(ckpt_config["config"])
    seed = ckpt_config["seed"]
    graph, ood_all, invariant, meta = load_dataset(args.data)
    counts = norm["split"]
    test_start = graph.num_snapshots - counts["test"]
    ood_test = {t: e for t, e in ood_all.items() if t >= test_start and len(e)}
    split = chronological_split(graph, counts["train"], counts["val"], counts["test"],
                                seed=meta["protocol"]["seed"], exclude=ood_test)
    cfg = TrainConfig(seed=seed, **norm["train"])
    model = build_model(graph.features.shape[2], graph.num_snapshots, cfg)
    restore_model(model, arrays, AdamState(model.parameters(), lr=cfg.lr))
    metrics = evaluate(model, graph, split, ood_test, cfg,
                       eval_seed=meta["protocol"]["seed"], ground_truth=invariant)
    payload = json.dumps(metrics, sort_keys=True, indent=2)
    print(payload)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    return 0


def _cmd_sweep(args) -> int:
    norm = load_config(args.config)
    rows = run_sweep(norm, which=args.grid, out_dir=args.out)
    for row in rows:
        knobs = "  ".join(f"{k}={row[k]:g}" for k in ("alpha", "beta") if k in row)
        print(f"{knobs}  auc_ood {row['aggregate']['auc_ood']['mean']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envlink",
        description="Environment-aware OOD link prediction on dynamic graphs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset directory")
    gen.add_argument("--protocol", choices=sorted(_PROTOCOL_NAMES), default="env-synthetic")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--config", help="full config file (overrides other flags)")
    gen.add_argument("--num-nodes", type=int, dest="num_nodes")
    gen.add_argument("--snapshots", type=int)
    gen.add_argument("--channels", type=int)
    gen.add_argument("--sigma-e", type=float, dest="sigma_e")
    gen.add_argument("--q-bar", type=float, dest="q_bar")
    gen.add_argument("--shifted-attr", type=int, dest="shifted_attr")
    gen.add_argument("--p-bar", type=float, dest="p_bar")
    gen.set_defaults(func=_cmd_generate)

    train = sub.add_parser("train", help="run the configured experiment")
    train.add_argument("--config", required=True)
    train.add_argument("--out")
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out")
    ev.set_defaults(func=_cmd_eval)

    sweep = sub.add_parser("sweep", help="grid over the loss weights")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--grid", default="alpha,beta")
    sweep.add_argument("--out")
    sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
