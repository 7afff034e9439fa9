"""Model surgery: dense MLP → expert bank growth and gradient-based layer choice.

Expert weights decompose as θ(x) = θ0 + θr(x): a frozen core (the inherited
dense MLP) plus per-expert residuals. Training operates on the folded view
θ0+θr[i]; the core is retained verbatim so growth is reversible bit-for-bit
and residuals stay recoverable by subtraction.

Layer choice ranks blocks by how much loss the residuals could remove,
estimated by the gradient magnitude of the loss w.r.t. each layer's
residuals after a short warmup on an over-grown model (every MLP expanded).
Because the core is constant, ∂L/∂θr equals ∂L/∂(folded weights), so scores
are read off the ordinary tape gradients of the expert tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .model import Attention, Block, DenseMLP, Head, LayerNormParams, Model, model_forward
from .moe import Expert, MoELayer, total_aux_loss
from .optim import SGD
from .rng import trunc_normal, uniform_pm1
from .tensor import Tape, Tensor, zero_grads

_MLP_KEYS = ("W1", "b1", "W2", "b2")


class ExpertBank:
    """Frozen core θ0 plus n folded expert weight sets (core + residual)."""

    def __init__(self, core: Dict[str, np.ndarray], experts: List[Expert]):
        self.core = core
        self.experts = experts

    def residual(self, i: int) -> Dict[str, np.ndarray]:
        """Unfold expert i: θr = folded − θ0 (exact while weights stay near the core)."""
        e = self.experts[i]
        return {k: getattr(e, k).data - self.core[k] for k in _MLP_KEYS}

    def folded(self, i: int) -> Dict[str, np.ndarray]:
        e = self.experts[i]
        return {k: getattr(e, k).data for k in _MLP_KEYS}


def fold(core: Dict[str, np.ndarray], residual: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: (core[k] + residual[k]).astype(np.float32) for k in _MLP_KEYS}


def _core_of(mlp: DenseMLP) -> Dict[str, np.ndarray]:
    return {k: getattr(mlp, k).data.copy() for k in _MLP_KEYS}


def init_experts_from_mlp(mlp: DenseMLP, n: int, epsilon: float, gen,
                          name: str = "ffn") -> Tuple[ExpertBank, Tensor]:
    """Inherit a dense MLP into n experts plus a fresh gate.

    Residuals are multiplicative noise: θr[i] = ε·η⊙θ0 with η ~ Uniform[−1,1]
    elementwise, drawn expert-by-expert in W1, b1, W2, b2 order; the gate
    consumes its truncated-normal draw after all residuals. ε=0 keeps every
    folded expert bitwise equal to the MLP (draws are still consumed, so a
    given seed yields the same bank for every ε).
    """
    if n < 1:
        raise ConfigError(f"expert count must be ≥ 1, got {n}")
    if epsilon < 0:
        raise ConfigError(f"noise ε must be ≥ 0, got {epsilon}")
    core = _core_of(mlp)
    d_model = core["W1"].shape[0]
    experts = []
    for i in range(n):
        folded = {}
        for key in _MLP_KEYS:
            eta = uniform_pm1(gen, core[key].shape)
            folded[key] = (core[key].astype(np.float64)
                           * (1.0 + epsilon * eta)).astype(np.float32)
        experts.append(Expert(*(T.param(folded[k], f"{name}.expert{i}.{k}")
                                for k in _MLP_KEYS)))
    gate = T.param(trunc_normal(gen, (n, d_model), std=0.02), f"{name}.gate")
    return ExpertBank(core, experts), gate


def _scaled_experts_from_mlp(mlp: DenseMLP, n: int, eps_score: float,
                             name: str) -> ExpertBank:
    """Deterministic scoring initialization: θr[i] = ε_score·θ0 for every expert."""
    core = _core_of(mlp)
    factor = np.float32(1.0 + eps_score)
    experts = []
    for i in range(n):
        experts.append(Expert(*(T.param(core[k] * factor, f"{name}.expert{i}.{k}")
                                for k in _MLP_KEYS)))
    return ExpertBank(core, experts)


def _clone_ffn(ffn):
    if isinstance(ffn, MoELayer):
        experts = [Expert(*(T.param(getattr(e, k).data.copy(), getattr(e, k).name)
                            for k in _MLP_KEYS)) for e in ffn.experts]
        core = None if ffn.core is None else {k: v.copy() for k, v in ffn.core.items()}
        return MoELayer(ffn.n, ffn.k, T.param(ffn.gate_w.data.copy(), ffn.gate_w.name),
                        experts, ffn.aligned, ffn.w_balance, core, ffn.layer_id)
    return DenseMLP(*(T.param(getattr(ffn, k).data.copy(), getattr(ffn, k).name)
                      for k in _MLP_KEYS))


def clone_model(model: Model) -> Model:
    """Structure-preserving deep copy; every weight array is a fresh copy."""
    def cp(t: Tensor) -> Tensor:
        return T.param(t.data.copy(), t.name)

    blocks = []
    for blk in model.blocks:
        blocks.append(Block(
            LayerNormParams(cp(blk.ln1.gamma), cp(blk.ln1.beta)),
            Attention(*(cp(t) for t in blk.attn.tensors())),
            LayerNormParams(cp(blk.ln2.gamma), cp(blk.ln2.beta)),
            _clone_ffn(blk.ffn)))
    return Model(model.spec, cp(model.patch_w), cp(model.patch_b), cp(model.pos),
                 blocks, Head("upstream", cp(model.head_up.W), cp(model.head_up.b)),
                 Head("downstream", cp(model.head_down.W), cp(model.head_down.b)))


def overgrow(model: Model, n: int, k: int, eps_score: float, gen,
             w_balance: float = 0.0) -> Model:
    """Replace every dense FFN with an aligned MoE layer for scoring.

    Experts start at the deterministic θr ← ε_score·θ0 scaling; only the
    gates draw randomness (one truncated-normal per block, in block order).
    The dense cores ride along so the operation is reversible.
    """
    if any(blk.is_moe for blk in model.blocks):
        raise StateError("overgrow requires a fully dense model")
    grown = clone_model(model)
    for i, blk in enumerate(grown.blocks):
        name = f"block{i}.ffn"
        bank = _scaled_experts_from_mlp(blk.ffn, n, eps_score, name)
        gate = T.param(trunc_normal(gen, (n, model.spec.d_model), std=0.02),
                       f"{name}.gate")
        blk.ffn = MoELayer(n, k, gate, bank.experts, aligned=True,
                           w_balance=w_balance, core=bank.core, layer_id=i)
    return grown


def revert(model: Model) -> Model:
    """Rebuild the dense model from the retained cores (bitwise)."""
    back = clone_model(model)
    for i, blk in enumerate(back.blocks):
        if not blk.is_moe:
            continue
        if blk.ffn.core is None:
            raise StateError(f"block {i} has no retained dense core to revert to")
        blk.ffn = DenseMLP(*(T.param(blk.ffn.core[k].copy(), f"block{i}.ffn.{k}")
                             for k in _MLP_KEYS))
    return back


@dataclass
class ScoringTask:
    """One task the layer scores are summed over.

    ``batches(step)`` must be a pure function of the step index so warmup
    and scoring are reproducible; ``head_role`` picks the head and loss
    shape (upstream: pooled classification; downstream: per-token).
    """
    name: str
    head_role: str
    batches: Callable[[int], Tuple[np.ndarray, np.ndarray]]


@dataclass
class LayerScore:
    layer_index: int
    per_task_scores: List[float] = field(default_factory=list)

    @property
    def total(self) -> float:
        return math.fsum(self.per_task_scores)


@dataclass
class GrowPlan:
    strategy: str
    selected_layers: List[int]
    N: int
    n: int
    k: int
    epsilon: float
    scores: Optional[List[LayerScore]] = None

    def to_json_obj(self) -> dict:
        obj = {"strategy": self.strategy, "selected_layers": list(self.selected_layers),
               "N": self.N, "n": self.n, "k": self.k, "epsilon": self.epsilon,
               "scores": None}
        if self.scores is not None:
            obj["scores"] = [{"layer": s.layer_index, "per_task": list(s.per_task_scores),
                              "total": s.total} for s in self.scores]
        return obj

    @staticmethod
    def from_json_obj(obj: dict) -> "GrowPlan":
        scores = None
        if obj.get("scores") is not None:
            scores = [LayerScore(s["layer"], list(s["per_task"])) for s in obj["scores"]]
        return GrowPlan(obj["strategy"], [int(i) for i in obj["selected_layers"]],
                        int(obj["N"]), int(obj["n"]), int(obj["k"]),
                        float(obj["epsilon"]), scores)


def _task_loss(tape, model: Model, task: ScoringTask, batch, w_balance: float):
    patches, labels = batch
    logits, aux = model_forward(tape, patches, model, task.head_role)
    if task.head_role == "downstream":
        b, t, c = logits.data.shape
        logits = T.reshape(tape, logits, (b * t, c))
        labels = np.asarray(labels).reshape(-1)
    loss = T.cross_entropy(tape, logits, labels)
    if aux:
        loss = T.add(tape, loss, total_aux_loss(tape, [a.record for a in aux], w_balance))
    return loss


def firefly_scores(model: Model, tasks: Sequence[ScoringTask], warmup_steps: int,
                   lr: float, scoring_batches: int = 4, w_balance: float = 0.0,
                   raw_l2: bool = False) -> List[LayerScore]:
    """Per-layer residual-gradient scores on an over-grown model.

    For each task: residuals and gates are restored to their initial values,
    optimized jointly for ``warmup_steps`` of SGD (cores, attention, norms
    and heads frozen), then the score of layer l is the mean over
    ``scoring_batches`` batches of ‖∂L/∂θr^l‖₂, normalized by √(residual
    parameter count) unless ``raw_l2``. Totals sum the per-task magnitudes.
    """
    if not tasks:
        raise ConfigError("firefly_scores needs at least one task")
    if warmup_steps < 0 or scoring_batches < 1:
        raise ConfigError("warmup_steps must be ≥ 0 and scoring_batches ≥ 1")
    moe_blocks = [blk for blk in model.blocks if blk.is_moe]
    if len(moe_blocks) != len(model.blocks):
        raise StateError("firefly_scores expects an over-grown model (all FFNs MoE)")

    ffn_params: List[Tensor] = []
    for blk in model.blocks:
        ffn_params.extend(blk.ffn.params())
    initial = [p.data.copy() for p in ffn_params]
    all_params = model.params()

    per_layer_expert_tensors = [
        [t for e in blk.ffn.experts for t in e.tensors()] for blk in model.blocks
    ]
    scores = [LayerScore(i) for i in range(len(model.blocks))]

    for task in tasks:
        for p, init_data in zip(ffn_params, initial):
            p.data[...] = init_data
        opt = SGD(ffn_params, lr)
        for step in range(warmup_steps):
            zero_grads(all_params)
            tape = Tape()
            loss = _task_loss(tape, model, task, task.batches(step), w_balance)
            tape.backward(loss, leaves=ffn_params)
            opt.step()

        sums = np.zeros(len(model.blocks))
        for s in range(scoring_batches):
            zero_grads(all_params)
            tape = Tape()
            loss = _task_loss(tape, model, task, task.batches(warmup_steps + s), w_balance)
            tape.backward(loss, leaves=ffn_params)
            for l, tensors in enumerate(per_layer_expert_tensors):
                sq = math.fsum(float((t.grad.astype(np.float64) ** 2).sum())
                               for t in tensors)
                norm = math.sqrt(sq)
                if not raw_l2:
                    norm /= math.sqrt(sum(t.data.size for t in tensors))
                sums[l] += norm
        for l in range(len(model.blocks)):
            scores[l].per_task_scores.append(float(sums[l] / scoring_batches))

    # leave the model exactly as it came in: scoring must not train anything
    for p, init_data in zip(ffn_params, initial):
        p.data[...] = init_data
    zero_grads(all_params)
    return scores


def select_layers(scores: Optional[List[LayerScore]], strategy: str, N: int, L: int,
                  stage_boundaries: Optional[List[Tuple[int, int]]] = None,
                  n: int = 8, k: int = 1, epsilon: float = 0.01) -> GrowPlan:
    """Choose which blocks to expand.

    score: N highest totals (ties to the lower index). last-2: the two
    highest even block indices. every-2: every other block from index 1.
    every-last: the last block of each declared stage. For the fixed
    strategies the plan's N records the selection size.
    """
    if strategy == "score":
        if N < 1:
            raise ConfigError(f"N must be ≥ 1, got {N}")
        if not scores:
            raise ConfigError("score strategy needs non-empty scores")
        order = sorted(range(len(scores)), key=lambda i: (-scores[i].total, i))
        selected = sorted(order[:min(N, len(scores))])
        return GrowPlan("score", selected, N, n, k, epsilon, list(scores))
    if strategy == "last-2":
        evens = [i for i in range(L) if i % 2 == 0]
        selected = sorted(evens[-2:])
    elif strategy == "every-2":
        selected = list(range(1, L, 2))
    elif strategy == "every-last":
        if not stage_boundaries:
            raise ConfigError("every-last strategy needs stage boundaries")
        for start, end in stage_boundaries:
            if not 0 <= start <= end < L:
                raise ConfigError(f"stage [{start}, {end}] out of range for L={L}")
        selected = sorted({end for _, end in stage_boundaries})
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return GrowPlan(strategy, selected, len(selected), n, k, epsilon, None)


def grow_plan_delta(plan: GrowPlan, d_model: int, hidden: int) -> int:
    """Parameter-count increase the plan causes on a dense model: each
    selected block swaps one MLP for n of them (+(n−1)·|MLP|) and adds an
    n×d_model gate."""
    mlp = d_model * hidden + hidden + hidden * d_model + d_model
    return len(plan.selected_layers) * ((plan.n - 1) * mlp + plan.n * d_model)


def apply_grow_plan(model: Model, plan: GrowPlan, epsilon: Optional[float], gen,
                    aligned: bool, w_balance: float) -> Model:
    """Expand exactly the selected blocks of a dense model.

    Residual noise and gate draws consume the stream in ascending block
    order. Every non-selected weight is copied bitwise; the dense cores of
    the expanded blocks are retained for reversibility.
    """
    L = len(model.blocks)
    if any(i < 0 or i >= L for i in plan.selected_layers):
        raise ConfigError(f"selected layers {plan.selected_layers} out of range for L={L}")
    eps = plan.epsilon if epsilon is None else epsilon
    grown = clone_model(model)
    for i in sorted(plan.selected_layers):
        blk = grown.blocks[i]
        if blk.is_moe:
            raise StateError(f"block {i} already carries an MoE layer")
        bank, gate = init_experts_from_mlp(blk.ffn, plan.n, eps, gen,
                                           name=f"block{i}.ffn")
        blk.ffn = MoELayer(plan.n, plan.k, gate, bank.experts, aligned=aligned,
                           w_balance=w_balance, core=bank.core, layer_id=i)
    return grown
