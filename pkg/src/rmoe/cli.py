"""Command-line front end.

Five subcommands drive the whole artifact:

  pretrain  — upstream training (dense, or the full-length MoE upstream run
              when the config pipeline is moe-scratch)
  grow      — Algorithm-1 surgery on a dense checkpoint: overgrow, score,
              select, expand; writes the grown checkpoint and growplan.json
  finetune  — the stage implied by (pipeline, checkpoint stage tag):
              rmoe-i from a dense checkpoint runs the intermediate finetune,
              everything else runs the downstream finetune
  compare   — run several pipeline configs over seeds, emit the cost table
  analyze   — figure-data exporters (pca | specialization | routing | balance)

Every command takes `--config PATH` (JSON matching PipelineConfig) plus
repeatable `--set dotted.name=value` overrides, e.g. `--set model.d_model=64
--set lr_upstream=0.002`; `--seed` is shorthand for `--set seed=…`. Exit
codes: 0 success, 2 config/usage, 3 IO, 4 state.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

from .analysis import (WeightSnapshot, balance_curve, pca_trajectory,
                       routing_map_export, specialization_matrix)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import val_batch
from .errors import (ConfigError, ContractError, DataError, DegenerateError,
                     DimensionError, InputError, RmoeError, RoutingUnstableError,
                     StateError)
from .growth import GrowPlan
from .pipelines import (PipelineConfig, RunLog, apply_overrides, compare_pipelines,
                        grow_from_dense, run_downstream_finetune,
                        run_intermediate_finetune, run_moe_scratch_upstream,
                        run_pretrain)

_USAGE_ERRORS = (ConfigError, InputError, DimensionError, DataError, DegenerateError)
_STATE_ERRORS = (StateError, ContractError, RoutingUnstableError)


def _load_config(path: Optional[str], sets: Optional[List[str]],
                 seed: Optional[int]) -> PipelineConfig:
    obj: dict = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    apply_overrides(obj, sets or [])
    if seed is not None:
        obj["seed"] = seed
    return PipelineConfig.from_json_obj(obj)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (PipelineConfig fields)")
    p.add_argument("--set", action="append", metavar="NAME=VALUE", dest="sets",
                   help="override a config field by dotted name (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")


# ----------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config, args.sets, args.seed)
    if cfg.pipeline == "moe-scratch":
        run_moe_scratch_upstream(cfg, args.out)
    else:
        run_pretrain(cfg, args.out)
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_grow(args) -> int:
    cfg = _load_config(args.config, args.sets, args.seed)
    if args.tasks:
        cfg.scoring_tasks = args.tasks.split(",")
    if args.max_layers is not None:
        cfg.N = args.max_layers
    if args.experts is not None:
        cfg.n = args.experts
    if args.topk is not None:
        cfg.k = args.topk
    if args.strategy:
        cfg.strategy = args.strategy
    cfg.validate()
    model, manifest = load_checkpoint(args.checkpoint)
    if model.moe_block_indices():
        raise StateError("grow needs a dense checkpoint; this one already has MoE layers")
    grown, plan, _ = grow_from_dense(model, cfg, args.stage)
    save_checkpoint(args.out, grown, f"grown-{args.stage}", cfg.seed,
                    grow_plan=plan.to_json_obj())
    with open(os.path.join(args.out, "growplan.json"), "w") as f:
        json.dump(plan.to_json_obj(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"selected layers {plan.selected_layers}; wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config, args.sets, args.seed)
    if args.pipeline:
        cfg.pipeline = args.pipeline
    cfg.validate()
    plan = None
    if args.plan:
        if not os.path.exists(args.plan):
            raise ConfigError(f"grow plan file not found: {args.plan}")
        with open(args.plan) as f:
            plan = GrowPlan.from_json_obj(json.load(f))
    with open(os.path.join(args.checkpoint, "manifest.json")) as f:
        stage = json.load(f)["stage"]
    if cfg.pipeline == "rmoe-i" and stage == "dense-pretrained":
        run_intermediate_finetune(args.checkpoint, cfg, args.out, plan=plan)
    else:
        run_downstream_finetune(args.checkpoint, cfg, args.out, plan=plan)
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_compare(args) -> int:
    paths = args.configs.split(",")
    configs = []
    for p in paths:
        configs.append(_load_config(p, args.sets, None))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    workdir = args.workdir or os.path.join(
        os.path.dirname(os.path.abspath(args.out)) or ".", "compare-runs")
    table = compare_pipelines(configs, seeds, workdir)
    with open(args.out, "w") as f:
        f.write(table.to_csv())
    sys.stdout.write(table.to_text())
    return 0


def _analyze_model(args):
    model, manifest = load_checkpoint(args.checkpoint)
    cfg = _load_config(args.config, args.sets, args.seed)
    return model, cfg


def cmd_analyze(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "pca":
        if not args.snapshots:
            raise ConfigError("analyze pca needs --snapshots")
        series = WeightSnapshot.load_series(args.snapshots)
        res = pca_trajectory(series)
        with open(os.path.join(args.out, "pca.csv"), "w") as f:
            f.write(res.to_csv())
        meta = {"variances": list(res.variances), "cluster_ratio": res.cluster_ratio}
        with open(os.path.join(args.out, "pca_meta.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
    elif args.kind == "specialization":
        if not args.checkpoint:
            raise ConfigError("analyze specialization needs --checkpoint")
        model, cfg = _analyze_model(args)
        from .pipelines import _tasks_for
        task = _tasks_for(cfg)["upstream"]
        patches, labels = [], []
        for i in range(args.batches):
            p, y = val_batch(task, i, cfg.batch_size)
            patches.append(p)
            labels.append(y)
        import numpy as np
        sm = specialization_matrix(model, np.concatenate(patches),
                                   np.concatenate(labels), args.layer)
        with open(os.path.join(args.out, "specialization.csv"), "w") as f:
            f.write(sm.to_csv())
        with open(os.path.join(args.out, "specialization_perm.json"), "w") as f:
            json.dump(sm.sidecar(), f, indent=2, sort_keys=True)
            f.write("\n")
    elif args.kind == "routing":
        if not args.checkpoint:
            raise ConfigError("analyze routing needs --checkpoint")
        model, cfg = _analyze_model(args)
        from .pipelines import _tasks_for
        task = _tasks_for(cfg)["upstream"]
        patches, _ = val_batch(task, 0, cfg.batch_size)
        files, sidecar = routing_map_export(model, patches, args.layer,
                                            top_m=args.top_m)
        for name, text in files.items():
            with open(os.path.join(args.out, name), "w") as f:
                f.write(text)
        with open(os.path.join(args.out, "routing_sidecar.json"), "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
            f.write("\n")
    elif args.kind == "balance":
        if not args.runlogs:
            raise ConfigError("analyze balance needs --runlogs")
        pairs = []
        for item in args.runlogs.split(","):
            if "=" in item:
                label, path = item.split("=", 1)
            else:
                label, path = os.path.basename(os.path.dirname(item) or item), item
            if not os.path.exists(path):
                raise ConfigError(f"runlog not found: {path}")
            pairs.append((label, RunLog.load(path)))
        csv = balance_curve(pairs, args.layer)
        with open(os.path.join(args.out, "balance.csv"), "w") as f:
            f.write(csv)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown analyze kind {args.kind!r}")
    print(f"wrote {args.kind} export to {args.out}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rmoe",
        description="Residual mixture-of-experts training pipelines.",
        epilog="Flags map onto PipelineConfig fields; --set dotted.name=value "
               "overrides any field (see `--help` of each command).")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="upstream training stage")
    _add_common(p)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("grow", help="grow a dense checkpoint into an MoE model")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="dense checkpoint directory")
    p.add_argument("--tasks", help="comma-separated scoring task names (config registry)")
    p.add_argument("--max-layers", type=int, help="layer budget N (score strategy)")
    p.add_argument("--experts", type=int, help="experts per grown layer n")
    p.add_argument("--topk", type=int, help="active experts per token k")
    p.add_argument("--stage", choices=("intermediate", "downstream"), required=True,
                   help="growth stage: intermediate aligns outputs, downstream does not")
    p.add_argument("--strategy", choices=("score", "last-2", "every-2", "every-last"))
    p.add_argument("--out", required=True, help="grown checkpoint output directory")
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("finetune", help="intermediate or downstream finetune")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="input checkpoint directory")
    p.add_argument("--pipeline", choices=("dense", "moe-scratch", "rmoe-i", "rmoe-d"),
                   help="overrides the config's pipeline field")
    p.add_argument("--plan", help="growplan.json to reuse instead of re-scoring")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("compare", help="run pipelines over seeds, emit cost table")
    _add_common(p)
    p.add_argument("--configs", required=True, help="comma-separated config JSON paths")
    p.add_argument("--seeds", help="comma-separated seeds (default: 0)")
    p.add_argument("--workdir", help="directory for the underlying runs")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="export figure data")
    _add_common(p)
    p.add_argument("--kind", choices=("pca", "specialization", "routing", "balance"),
                   required=True)
    p.add_argument("--snapshots", help="snapshots.jsonl (pca)")
    p.add_argument("--checkpoint", help="checkpoint directory (specialization, routing)")
    p.add_argument("--layer", type=int, default=0, help="MoE layer id")
    p.add_argument("--batches", type=int, default=4, help="validation batches (specialization)")
    p.add_argument("--top-m", type=int, default=4, help="experts per image (routing)")
    p.add_argument("--runlogs", help="label=path[,label=path…] runlog files (balance)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.func(args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except _STATE_ERRORS as e:
        print(f"state error: {e}", file=sys.stderr)
        return 4
    except RmoeError as e:  # any future package error defaults to usage
        print(f"error: {e}", file=sys.stderr)
        return 2


def console() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
