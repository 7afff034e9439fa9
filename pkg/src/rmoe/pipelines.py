"""End-to-end training pipelines: dense, moe-scratch, rmoe-i, rmoe-d.

All four share one dense initialization scheme, one synthetic-task registry,
and one FLOP ledger (closed-form counts per optimizer step, so stage totals
are exact integers and additive). Stage hand-off happens through checkpoint
directories tagged dense-pretrained → intermediate / moe-scratch-upstream →
downstream-final; loading a checkpoint whose tag does not match the
pipeline's expectation is a state error.

Batch indices per stage: training consumes indices from 0 (the intermediate
stage continues where the shortened pretrain left off, so rmoe-i sees the
same upstream stream a dense run would), scoring draws from _SCORE_BASE,
validation from data.VAL_BASE.
"""

from __future__ import annotations

import json
import os
import statistics
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticTask, VAL_BASE, generate_batch, task_registry, val_batch
from .errors import ConfigError, StateError
from .flops import count_flops
from .growth import GrowPlan, ScoringTask, apply_grow_plan, firefly_scores, overgrow, select_layers
from .model import Model, ModelSpec, init_model, model_forward, reinit_head
from .moe import Expert, MoELayer, total_aux_loss
from .optim import AdamW, cosine_lr
from .rng import stage_stream, trunc_normal
from .tensor import Tape, zero_grads

PIPELINES = ("dense", "moe-scratch", "rmoe-i", "rmoe-d")
STRATEGIES = ("score", "last-2", "every-2", "every-last")

_SCORE_BASE = 500_000_000  # scoring batch indices, clear of training and validation


@dataclass
class PipelineConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    pipeline: str = "dense"
    upstream_epochs: int = 20
    intermediate_epochs: int = 4
    steps_per_epoch: int = 25
    downstream_steps: int = 100
    batch_size: int = 16
    cosine_decay: bool = True
    lr_upstream: float = 1e-3
    lr_intermediate: float = 1e-4
    lr_downstream: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.01
    n: int = 8
    k: int = 5
    N: int = 3
    strategy: str = "score"
    stage_boundaries: Optional[List[List[int]]] = None
    epsilon: float = 0.01
    eps_score: float = 0.001
    w_balance_upstream: float = 0.01
    w_balance_downstream: float = 1e-4
    scoring_tasks: Optional[List[str]] = None  # None → upstream when growing intermediate, downstream when growing there
    warmup_steps: int = 6
    scoring_batches: int = 4
    scoring_lr: float = 0.05
    seed: int = 0
    data_seed: Optional[int] = None
    pretrained_checkpoint: Optional[str] = None
    val_batches: int = 4
    snapshot_every: int = 25

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.pipeline == "rmoe-i" and not 1 <= self.intermediate_epochs <= self.upstream_epochs:
            raise ConfigError(
                f"rmoe-i needs 1 ≤ intermediate epochs ≤ upstream epochs, got "
                f"{self.intermediate_epochs} vs {self.upstream_epochs}")
        for name in ("w_balance_upstream", "w_balance_downstream", "lr_upstream",
                     "lr_intermediate", "lr_downstream", "min_lr", "weight_decay",
                     "epsilon", "eps_score", "scoring_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be ≥ 0, got {getattr(self, name)}")
        for name in ("upstream_epochs", "downstream_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be ≥ 0, got {getattr(self, name)}")
        for name in ("steps_per_epoch", "batch_size", "n", "k", "N", "scoring_batches",
                     "val_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be ≥ 1, got {getattr(self, name)}")
        if self.k > self.n:
            raise ConfigError(f"k={self.k} exceeds expert count n={self.n}")

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_json_obj(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json_obj(obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        known = {f for f in PipelineConfig.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "model" in obj and isinstance(obj["model"], dict):
            spec_fields = set(ModelSpec.__dataclass_fields__)
            bad = set(obj["model"]) - spec_fields
            if bad:
                raise ConfigError(f"unknown model fields: {sorted(bad)}")
            obj["model"] = ModelSpec(**obj["model"])
        cfg = PipelineConfig(**obj)
        cfg.validate()
        return cfg


def apply_overrides(obj: dict, assignments: List[str]) -> dict:
    """Apply `dotted.name=value` strings onto a nested config dict."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form name=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = obj
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-object")
        node[parts[-1]] = value
    return obj


class RunLog:
    """JSON-lines training log: stage markers, one record per optimizer step,
    and a final-metric record per stage. No timestamps — logs must be
    byte-identical across reruns of the same (config, seed)."""

    def __init__(self):
        self.records: List[dict] = []
        self.stage_flops: Dict[str, int] = {}

    def stage_marker(self, stage: str, flops: int) -> None:
        self.records.append({"event": "stage", "stage": stage, "flops": flops})

    def step(self, **fields) -> None:
        self.records.append({"event": "step", **fields})

    def final(self, stage: str, metric: str, value: float, stage_flops: int,
              flops: int) -> None:
        self.stage_flops[stage] = stage_flops
        self.records.append({"event": "final", "stage": stage, "metric": metric,
                             "value": value, "stage_flops": stage_flops,
                             "flops": flops})

    def step_records(self, stage: Optional[str] = None) -> List[dict]:
        return [r for r in self.records if r["event"] == "step"
                and (stage is None or r["stage"] == stage)]

    def final_record(self, stage: str) -> dict:
        for r in reversed(self.records):
            if r["event"] == "final" and r["stage"] == stage:
                return r
        raise StateError(f"run log has no final record for stage {stage!r}")

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")

    @staticmethod
    def load(path: str) -> "RunLog":
        log = RunLog()
        with open(path) as f:
            for line in f:
                if line.strip():
                    log.records.append(json.loads(line))
        for r in log.records:
            if r["event"] == "final":
                log.stage_flops[r["stage"]] = r["stage_flops"]
        return log


def _tasks_for(cfg: PipelineConfig) -> Dict[str, SyntheticTask]:
    spec = cfg.model
    return task_registry(cfg.effective_data_seed, spec.image_grid, spec.patch_dim,
                         spec.n_classes_upstream, spec.n_classes_downstream)


def _losses(tape, model: Model, patches, labels, head_role: str, w_balance: float):
    logits, aux = model_forward(tape, patches, model, head_role)
    if head_role == "downstream":
        b, t, c = logits.data.shape
        logits = T.reshape(tape, logits, (b * t, c))
        labels = np.asarray(labels).reshape(-1)
    task_loss = T.cross_entropy(tape, logits, labels)
    total = task_loss
    if aux:
        total = T.add(tape, task_loss, total_aux_loss(
            tape, [a.record for a in aux], w_balance))
    return total, task_loss, aux


def _train(model: Model, task: SyntheticTask, steps: int, base_lr: float,
           w_balance: float, cfg: PipelineConfig, runlog: RunLog, stage: str,
           flops: int, batch_base: int = 0, snapshot_cb=None) -> int:
    head_role = task.head_role
    params = model.params_for_head(head_role)
    all_params = model.params()
    opt = AdamW(params, lr=base_lr, weight_decay=cfg.weight_decay)
    per_step = count_flops(model, (cfg.batch_size, cfg.model.tokens), "train-step",
                           head_role)
    if snapshot_cb:
        snapshot_cb(0)
    for s in range(steps):
        lr = cosine_lr(base_lr, s, steps, cfg.min_lr) if cfg.cosine_decay else base_lr
        opt.lr = lr
        patches, labels = generate_batch(task, batch_base + s, cfg.batch_size)
        zero_grads(all_params)
        tape = Tape()
        total, task_loss, aux = _losses(tape, model, patches, labels, head_role, w_balance)
        tape.backward(total, leaves=params)
        opt.step()
        flops += per_step
        balance = {str(a.block_index): a.balance.scalar() for a in aux}
        imp = {str(a.block_index): [float(v) for v in a.record.imp] for a in aux}
        runlog.step(stage=stage, step=s, task_loss=task_loss.scalar(), lr=lr,
                    balance=balance, imp=imp, flops=flops)
        if snapshot_cb and ((s + 1) % cfg.snapshot_every == 0 or s + 1 == steps):
            snapshot_cb(s + 1)
    return flops


def evaluate(model: Model, task: SyntheticTask, cfg: PipelineConfig) -> float:
    """Mean accuracy over the validation index range (per-image upstream,
    per-token downstream)."""
    correct = total = 0
    for i in range(cfg.val_batches):
        patches, labels = val_batch(task, i, cfg.batch_size)
        logits, _ = model_forward(None, patches, model, task.head_role)
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred == labels).sum())
        total += int(np.asarray(labels).size)
    return correct / total


# ------------------------------------------------------------- Algorithm 1

def _scoring_tasks(cfg: PipelineConfig, stage: str) -> List[ScoringTask]:
    reg = _tasks_for(cfg)
    names = cfg.scoring_tasks
    if names is None:
        names = ["upstream"] if stage == "intermediate" else ["downstream"]
    unknown = [n for n in names if n not in reg]
    if unknown:
        raise ConfigError(f"unknown scoring tasks {unknown}; registry has {sorted(reg)}")

    def provider(task):
        return lambda step: generate_batch(task, _SCORE_BASE + step, cfg.batch_size)

    return [ScoringTask(n, reg[n].head_role, provider(reg[n])) for n in names]


def grow_from_dense(dense: Model, cfg: PipelineConfig, stage: str
                    ) -> Tuple[Model, GrowPlan, int]:
    """Overgrow → score → select → expand, returning (grown model, plan,
    FLOPs spent scoring). `stage` picks alignment (intermediate: aligned
    output so the grown model starts loss-identical; downstream: plain
    gate-scaled output) and the balance weight."""
    if stage not in ("intermediate", "downstream"):
        raise ConfigError(f"grow stage must be intermediate or downstream, got {stage!r}")
    aligned = stage == "intermediate"
    w_bal = cfg.w_balance_upstream if aligned else cfg.w_balance_downstream
    L = len(dense.blocks)
    flops = 0
    if cfg.strategy == "score":
        og = overgrow(dense, cfg.n, cfg.k, cfg.eps_score,
                      stage_stream(cfg.seed, f"overgrow:{stage}"), w_balance=w_bal)
        tasks = _scoring_tasks(cfg, stage)
        scores = firefly_scores(og, tasks, cfg.warmup_steps, cfg.scoring_lr,
                                cfg.scoring_batches, w_bal)
        for t in tasks:
            per = count_flops(og, (cfg.batch_size, cfg.model.tokens), "train-step",
                              t.head_role)
            flops += (cfg.warmup_steps + cfg.scoring_batches) * per
        plan = select_layers(scores, "score", cfg.N, L, None,
                             n=cfg.n, k=cfg.k, epsilon=cfg.epsilon)
    else:
        bounds = None
        if cfg.stage_boundaries is not None:
            bounds = [tuple(b) for b in cfg.stage_boundaries]
        plan = select_layers(None, cfg.strategy, cfg.N, L, bounds,
                             n=cfg.n, k=cfg.k, epsilon=cfg.epsilon)
    grown = apply_grow_plan(dense, plan, None, stage_stream(cfg.seed, f"grow:{stage}"),
                            aligned, w_bal)
    return grown, plan, flops


# ----------------------------------------------------------------- snapshots

class SnapshotWriter:
    """Collects per-expert flattened weights of one MoE layer over training."""

    def __init__(self, model: Model, layer_id: int):
        self.model = model
        self.layer_id = layer_id
        self.records: List[dict] = []

    def __call__(self, epoch: int) -> None:
        ffn = self.model.blocks[self.layer_id].ffn
        experts = [np.concatenate([t.data.ravel() for t in e.tensors()]).tolist()
                   for e in ffn.experts]
        self.records.append({"epoch": epoch, "layer": self.layer_id,
                             "experts": experts})

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def _maybe_snapshots(model: Model, out_dir: str):
    moe = model.moe_block_indices()
    if not moe:
        return None, None
    writer = SnapshotWriter(model, moe[0])
    return writer, os.path.join(out_dir, "snapshots.jsonl")


# ------------------------------------------------------------------ pipelines

def _check_spec(manifest: dict, cfg: PipelineConfig) -> None:
    if manifest["spec"] != cfg.model.to_json_obj():
        raise ConfigError("checkpoint model shape differs from the configured one")


def run_pretrain(cfg: PipelineConfig, out_dir: str) -> Tuple[Model, RunLog]:
    """Dense upstream pretraining (rmoe-i trains E−e of the E epochs)."""
    cfg.validate()
    if cfg.pipeline == "moe-scratch":
        raise ConfigError("moe-scratch pretrains through run_moe_scratch_upstream")
    runlog = RunLog()
    runlog.stage_marker("pretrain", 0)
    task = _tasks_for(cfg)["upstream"]
    if cfg.pretrained_checkpoint:
        model, manifest = load_checkpoint(cfg.pretrained_checkpoint)
        if manifest["stage"] != "dense-pretrained":
            raise StateError(f"pretrained checkpoint has stage "
                             f"{manifest['stage']!r}, need 'dense-pretrained'")
        _check_spec(manifest, cfg)
        flops = 0
    else:
        model = init_model(cfg.model, cfg.seed)
        epochs = cfg.upstream_epochs
        if cfg.pipeline == "rmoe-i":
            epochs -= cfg.intermediate_epochs
        flops = _train(model, task, epochs * cfg.steps_per_epoch, cfg.lr_upstream,
                       cfg.w_balance_upstream, cfg, runlog, "pretrain", 0)
    runlog.final("pretrain", "upstream_accuracy", evaluate(model, task, cfg),
                 flops, flops)
    save_checkpoint(out_dir, model, "dense-pretrained", cfg.seed)
    runlog.save(os.path.join(out_dir, "runlog.jsonl"))
    return model, runlog


def run_intermediate_finetune(dense_ckpt: str, cfg: PipelineConfig, out_dir: str,
                              plan: Optional[GrowPlan] = None) -> Tuple[Model, RunLog]:
    """rmoe-i bridging stage: grow aligned, then a short upstream finetune.

    A precomputed `plan` (e.g. from the grow command) skips the scoring pass."""
    cfg.validate()
    if cfg.pipeline != "rmoe-i":
        raise ConfigError(f"intermediate finetune is an rmoe-i stage, config says "
                          f"{cfg.pipeline!r}")
    model, manifest = load_checkpoint(dense_ckpt)
    if manifest["stage"] != "dense-pretrained":
        raise StateError(f"intermediate stage needs a dense-pretrained checkpoint, "
                         f"got stage {manifest['stage']!r}")
    _check_spec(manifest, cfg)
    runlog = RunLog()
    if plan is None:
        grown, plan, flops = grow_from_dense(model, cfg, "intermediate")
    else:
        grown = apply_grow_plan(model, plan, None,
                                stage_stream(cfg.seed, "grow:intermediate"),
                                aligned=True, w_balance=cfg.w_balance_upstream)
        flops = 0
    runlog.stage_marker("intermediate", flops)
    task = _tasks_for(cfg)["upstream"]
    writer, snap_path = _maybe_snapshots(grown, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    pre_steps = (cfg.upstream_epochs - cfg.intermediate_epochs) * cfg.steps_per_epoch
    flops = _train(grown, task, cfg.intermediate_epochs * cfg.steps_per_epoch,
                   cfg.lr_intermediate, cfg.w_balance_upstream, cfg, runlog,
                   "intermediate", flops, batch_base=pre_steps, snapshot_cb=writer)
    runlog.final("intermediate", "upstream_accuracy", evaluate(grown, task, cfg),
                 flops, flops)
    save_checkpoint(out_dir, grown, "intermediate", cfg.seed,
                    grow_plan=plan.to_json_obj())
    if writer:
        writer.save(snap_path)
    runlog.save(os.path.join(out_dir, "runlog.jsonl"))
    return grown, runlog


_EXPECTED_STAGE = {"dense": "dense-pretrained", "rmoe-d": "dense-pretrained",
                   "rmoe-i": "intermediate", "moe-scratch": "moe-scratch-upstream"}


def run_downstream_finetune(ckpt: str, cfg: PipelineConfig, out_dir: str,
                            plan: Optional[GrowPlan] = None) -> Tuple[Model, RunLog]:
    """Final stage for every pipeline: fresh downstream head, short finetune.

    rmoe-d grows here (aligned=false; a precomputed `plan` skips scoring);
    the other pipelines arrive already in their final topology. Imp vectors
    are logged every step."""
    cfg.validate()
    model, manifest = load_checkpoint(ckpt)
    expected = _EXPECTED_STAGE[cfg.pipeline]
    if manifest["stage"] != expected:
        raise StateError(f"{cfg.pipeline} downstream finetune needs stage "
                         f"{expected!r}, got {manifest['stage']!r}")
    _check_spec(manifest, cfg)
    if cfg.pipeline == "dense" and model.moe_block_indices():
        raise StateError("dense pipeline got a checkpoint with MoE layers")

    runlog = RunLog()
    plan_obj = manifest.get("grow_plan")
    flops = 0
    if cfg.pipeline == "rmoe-d":
        if plan is None:
            model, plan, flops = grow_from_dense(model, cfg, "downstream")
        else:
            model = apply_grow_plan(model, plan, None,
                                    stage_stream(cfg.seed, "grow:downstream"),
                                    aligned=False, w_balance=cfg.w_balance_downstream)
        plan_obj = plan.to_json_obj()
    runlog.stage_marker("downstream", flops)
    reinit_head(model, "downstream", cfg.seed, "head:downstream")
    task = _tasks_for(cfg)["downstream"]
    os.makedirs(out_dir, exist_ok=True)
    writer, snap_path = _maybe_snapshots(model, out_dir)
    flops = _train(model, task, cfg.downstream_steps, cfg.lr_downstream,
                   cfg.w_balance_downstream, cfg, runlog, "downstream", flops,
                   snapshot_cb=writer)
    runlog.final("downstream", "downstream_token_accuracy",
                 evaluate(model, task, cfg), flops, flops)
    save_checkpoint(out_dir, model, "downstream-final", cfg.seed, grow_plan=plan_obj)
    if writer:
        writer.save(snap_path)
    runlog.save(os.path.join(out_dir, "runlog.jsonl"))
    return model, runlog


def run_moe_scratch_upstream(cfg: PipelineConfig, out_dir: str) -> Tuple[Model, RunLog]:
    """Build an MoE model at strategy-selected positions with freshly drawn
    experts (no weight inheritance) and train it upstream for the full E epochs."""
    cfg.validate()
    if cfg.pipeline != "moe-scratch":
        raise ConfigError(f"run_moe_scratch_upstream needs pipeline moe-scratch, "
                          f"got {cfg.pipeline!r}")
    dense = init_model(cfg.model, cfg.seed)
    runlog = RunLog()
    if cfg.strategy == "score":
        _, plan, flops = grow_from_dense(dense, cfg, "intermediate")
    else:
        bounds = [tuple(b) for b in cfg.stage_boundaries] if cfg.stage_boundaries else None
        plan = select_layers(None, cfg.strategy, cfg.N, len(dense.blocks), bounds,
                             n=cfg.n, k=cfg.k, epsilon=cfg.epsilon)
        flops = 0
    runlog.stage_marker("pretrain", flops)

    # fresh expert/gate draws per selected block, ascending: expert weight
    # matrices then the gate; biases start at zero like the dense init
    model = init_model(cfg.model, cfg.seed)
    gen = stage_stream(cfg.seed, "moe-scratch-init")
    spec = cfg.model
    for i in sorted(plan.selected_layers):
        blk = model.blocks[i]
        experts = []
        for j in range(cfg.n):
            name = f"block{i}.ffn.expert{j}"
            experts.append(Expert(
                T.param(trunc_normal(gen, (spec.d_model, spec.mlp_hidden), 0.02), f"{name}.W1"),
                T.param(np.zeros(spec.mlp_hidden, np.float32), f"{name}.b1"),
                T.param(trunc_normal(gen, (spec.mlp_hidden, spec.d_model), 0.02), f"{name}.W2"),
                T.param(np.zeros(spec.d_model, np.float32), f"{name}.b2")))
        gate = T.param(trunc_normal(gen, (cfg.n, spec.d_model), 0.02), f"block{i}.ffn.gate")
        blk.ffn = MoELayer(cfg.n, cfg.k, gate, experts, aligned=False,
                           w_balance=cfg.w_balance_upstream, core=None, layer_id=i)

    task = _tasks_for(cfg)["upstream"]
    flops = _train(model, task, cfg.upstream_epochs * cfg.steps_per_epoch,
                   cfg.lr_upstream, cfg.w_balance_upstream, cfg, runlog,
                   "pretrain", flops)
    runlog.final("pretrain", "upstream_accuracy", evaluate(model, task, cfg),
                 flops, flops)
    save_checkpoint(out_dir, model, "moe-scratch-upstream", cfg.seed,
                    grow_plan=plan.to_json_obj())
    runlog.save(os.path.join(out_dir, "runlog.jsonl"))
    return model, runlog


def run_moe_scratch(cfg: PipelineConfig, upstream_dir: str,
                    out_dir: str) -> Tuple[Model, RunLog]:
    run_moe_scratch_upstream(cfg, upstream_dir)
    return run_downstream_finetune(upstream_dir, cfg, out_dir)


# ------------------------------------------------------------------- compare

def run_pipeline(cfg: PipelineConfig, workdir: str,
                 pretrain_cache: Optional[dict] = None) -> dict:
    """One full pipeline run; returns stage directories, FLOP totals and the
    final downstream metric. `pretrain_cache` maps a dense-pretrain cache key
    to an existing checkpoint directory so pipelines sharing the same dense
    pretraining reuse it."""
    cfg.validate()
    os.makedirs(workdir, exist_ok=True)
    stage_flops: Dict[str, int] = {}
    dirs: Dict[str, str] = {}

    if cfg.pipeline == "moe-scratch":
        up = os.path.join(workdir, "upstream")
        _, uplog = run_moe_scratch_upstream(cfg, up)
        stage_flops["pretrain"] = uplog.stage_flops["pretrain"]
        dirs["upstream"] = up
        last = up
    else:
        epochs = cfg.upstream_epochs
        if cfg.pipeline == "rmoe-i":
            epochs -= cfg.intermediate_epochs
        key = (cfg.seed, cfg.effective_data_seed, epochs, cfg.steps_per_epoch,
               cfg.batch_size, cfg.lr_upstream, cfg.cosine_decay, cfg.weight_decay,
               cfg.min_lr, json.dumps(cfg.model.to_json_obj(), sort_keys=True))
        if pretrain_cache is not None and key in pretrain_cache:
            pre = pretrain_cache[key]
            prelog = RunLog.load(os.path.join(pre, "runlog.jsonl"))
        else:
            pre = os.path.join(workdir, "pretrain")
            _, prelog = run_pretrain(cfg, pre)
            if pretrain_cache is not None:
                pretrain_cache[key] = pre
        stage_flops["pretrain"] = prelog.stage_flops["pretrain"]
        dirs["pretrain"] = pre
        last = pre
        if cfg.pipeline == "rmoe-i":
            mid = os.path.join(workdir, "intermediate")
            _, midlog = run_intermediate_finetune(pre, cfg, mid)
            stage_flops["intermediate"] = midlog.stage_flops["intermediate"]
            dirs["intermediate"] = mid
            last = mid

    down = os.path.join(workdir, "downstream")
    model, downlog = run_downstream_finetune(last, cfg, down)
    stage_flops["downstream"] = downlog.stage_flops["downstream"]
    dirs["downstream"] = down

    total = sum(stage_flops.values())
    # "pretrained" mode assumes the dense upstream checkpoint already exists;
    # moe-scratch cannot reuse one, so its cost is unchanged
    pretrained = total if cfg.pipeline == "moe-scratch" \
        else total - stage_flops["pretrain"]
    return {"pipeline": cfg.pipeline, "seed": cfg.seed,
            "params": model.n_params(),
            "metric": downlog.final_record("downstream")["value"],
            "stage_flops": stage_flops, "flops_scratch": total,
            "flops_pretrained": pretrained, "dirs": dirs}


class ComparisonTable:
    HEADER = "pipeline,metric,params,flops_scratch,flops_pretrained"

    def __init__(self, rows: List[dict]):
        self.rows = rows

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r['pipeline']},{r['metric']:.6f},{r['params']},"
                         f"{r['flops_scratch']},{r['flops_pretrained']}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cols = self.HEADER.split(",")
        body = [[r["pipeline"], f"{r['metric']:.6f}", str(r["params"]),
                 str(r["flops_scratch"]), str(r["flops_pretrained"])] for r in self.rows]
        widths = [max(len(c), *(len(row[i]) for row in body)) if body else len(c)
                  for i, c in enumerate(cols)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return "\n".join([fmt.format(*cols)] + [fmt.format(*row) for row in body]) + "\n"


def compare_pipelines(configs: List[PipelineConfig], seeds: List[int],
                      workdir: str) -> ComparisonTable:
    """Run each config over the seeds and tabulate median downstream metric,
    parameter count and total FLOPs (scratch and pretrained modes)."""
    if not configs:
        raise ConfigError("compare_pipelines needs at least one config")
    if not seeds:
        raise ConfigError("compare_pipelines needs at least one seed")
    base = configs[0]
    for c in configs[1:]:
        if c.model != base.model:
            raise ConfigError("compared pipelines must share one model shape")
        if c.effective_data_seed != base.effective_data_seed:
            raise ConfigError("compared pipelines must share the data seed")
    rows = []
    pretrain_cache: dict = {}  # shared: dense/rmoe-d/rmoe-i reuse equal pretrains
    for cfg in configs:
        metrics, params_set, scratch_set, pretrained_set = [], set(), set(), set()
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            rundir = os.path.join(workdir, f"{cfg.pipeline}-seed{seed}")
            res = run_pipeline(run_cfg, rundir, pretrain_cache)
            metrics.append(res["metric"])
            params_set.add(res["params"])
            scratch_set.add(res["flops_scratch"])
            pretrained_set.add(res["flops_pretrained"])
        if len(params_set) != 1 or len(scratch_set) != 1 or len(pretrained_set) != 1:
            raise StateError("parameter count or FLOP totals varied across seeds")
        rows.append({"pipeline": cfg.pipeline, "metric": statistics.median(metrics),
                     "params": params_set.pop(), "flops_scratch": scratch_set.pop(),
                     "flops_pretrained": pretrained_set.pop()})
    return ComparisonTable(rows)
