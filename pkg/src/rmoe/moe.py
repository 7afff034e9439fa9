"""Sparse mixture-of-experts FFN.

Routing: per token, softmax over all n gate logits first, then every entry
outside the top-k is zeroed (ties to the lowest expert index). Kept values
are NOT renormalized — their sum is ≤ 1, which is exactly what scales a
freshly grown layer's output down relative to the dense MLP it replaced.

The aligned variant repairs that at the output: per selected expert the
forward value is the raw expert output, while gradients flow as if the
gate-weighted term were used (gate scaling on the expert gradient, expert
output on the gate gradient). The sum runs over the selected set only.

Only selected experts are evaluated: tokens are gathered per expert, run
through that expert's MLP, and scattered back, so the FLOP counter sees
exactly tokens×k expert evaluations plus one full gate matmul.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from . import _kernels as K
from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateError, DimensionError
from .tensor import Tensor


class Expert:
    """One MLP weight set {W1: d×H, b1: H, W2: H×d, b2: d}."""

    __slots__ = ("W1", "b1", "W2", "b2")

    def __init__(self, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor):
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    def tensors(self) -> List[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors())


def mlp_forward(tape, x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer GELU MLP; the one op sequence shared by dense FFNs and experts."""
    h = T.gelu(tape, T.add_bias(tape, T.matmul(tape, x, W1), b1))
    return T.add_bias(tape, T.matmul(tape, h, W2), b2)


class MoELayer:
    """n experts behind a top-k softmax gate.

    ``gate_w`` is [n, d_model] (one row of logit weights per expert).
    ``core``, when present, holds the inherited dense MLP arrays θ0 (frozen,
    not part of the trainable set) so growth is reversible and residuals
    are recoverable as folded − core.
    """

    def __init__(self, n: int, k: int, gate_w: Tensor, experts: List[Expert],
                 aligned: bool, w_balance: float,
                 core: Optional[Dict[str, np.ndarray]] = None,
                 layer_id: int = -1):
        if n < 1:
            raise ConfigError(f"expert count must be ≥ 1, got {n}")
        if not 1 <= k <= n:
            raise ConfigError(f"k must satisfy 1 ≤ k ≤ n, got k={k} n={n}")
        if len(experts) != n or gate_w.data.shape[0] != n:
            raise DimensionError("expert list and gate rows must both have length n")
        if w_balance < 0:
            raise ConfigError("w_balance must be non-negative")
        self.n = n
        self.k = k
        self.gate_w = gate_w
        self.experts = experts
        self.aligned = bool(aligned)
        self.w_balance = float(w_balance)
        self.core = core
        self.layer_id = layer_id

    @property
    def d_model(self) -> int:
        return self.gate_w.data.shape[1]

    def params(self) -> List[Tensor]:
        out = [self.gate_w]
        for e in self.experts:
            out.extend(e.tensors())
        return out

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params())


class RoutingRecord:
    """Routing outcome of one forward pass through one MoE layer.

    ``imp_tensor`` stays attached to the autodiff graph so the balance loss
    differentiates into the gate; the numpy fields are detached copies for
    logging and export.
    """

    def __init__(self, layer_id: int, imp_tensor: Tensor,
                 expert_indices: np.ndarray, gate_values: np.ndarray):
        self.layer_id = layer_id
        self.imp_tensor = imp_tensor
        self.imp = imp_tensor.data.copy()
        self.expert_indices = expert_indices  # [tokens, k], gate-descending
        self.gate_values = gate_values        # [tokens, k]
        self.expert_evals = 0                 # filled by the forward pass

    def to_json_obj(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "imp": [float(v) for v in self.imp],
            "per_token": [
                [[int(i), float(v)] for i, v in zip(idx_row, val_row)]
                for idx_row, val_row in zip(self.expert_indices, self.gate_values)
            ],
        }


def gate_forward(tape, x: Tensor, gate_w: Tensor, k: int,
                 layer_id: int = -1) -> Tuple[Tensor, RoutingRecord]:
    """Sparse gate values for every token: TopK(softmax(x·θgᵀ)).

    Returns the [tokens, n] gate tensor (exactly k positive entries per row,
    not renormalized) and the RoutingRecord. Backward treats the selection
    mask as a constant; gradients reach all n logits via the softmax
    Jacobian restricted to the kept probabilities.
    """
    n = gate_w.data.shape[0]
    if k > n:
        raise ConfigError(f"k={k} exceeds expert count n={n}")
    logits = T.matmul_nt(tape, x, gate_w)
    probs = T.softmax(tape, logits)
    mask = K.topk_mask(probs.data, k)
    gate = T.mul(tape, probs, T.const(mask.astype(np.float32)))
    # stable argsort on -p matches the kernel's tie rule (lowest index wins)
    order = np.argsort(-probs.data, axis=1, kind="stable")[:, :k]
    values = np.take_along_axis(probs.data, order, axis=1)
    record = RoutingRecord(layer_id, T.sum_rows(tape, gate), order, values)
    return gate, record


def _combine(tape, x: Tensor, layer: MoELayer, aligned: bool) -> Tuple[Tensor, RoutingRecord]:
    gate, record = gate_forward(tape, x, layer.gate_w, layer.k, layer.layer_id)
    rows, d = x.data.shape
    y: Optional[Tensor] = None
    evals = 0
    for i, expert in enumerate(layer.experts):
        idx = np.nonzero((record.expert_indices == i).any(axis=1))[0]
        if idx.size == 0:
            continue
        evals += int(idx.size)
        xs = T.gather_rows(tape, x, idx)
        out = mlp_forward(tape, xs, expert.W1, expert.b1, expert.W2, expert.b2)
        gsel = T.take_column(tape, T.gather_rows(tape, gate, idx), i)
        if aligned:
            term = T.aligned_expert_combine(tape, gsel, out)
        else:
            term = T.mul(tape, T.expand_cols(tape, gsel, d), out)
        placed = T.scatter_rows(tape, term, idx, rows)
        y = placed if y is None else T.add(tape, y, placed)
    record.expert_evals = evals
    assert y is not None  # k ≥ 1 routes every token somewhere
    return y, record


def moe_forward(tape, x: Tensor, layer: MoELayer) -> Tuple[Tensor, RoutingRecord]:
    """y = Σ_{i∈TopK} G_i·E_i(x) per token (gate-weighted expert sum)."""
    if layer.aligned:
        raise ContractError("moe_forward requires aligned == false")
    return _combine(tape, x, layer, aligned=False)


def moe_forward_aligned(tape, x: Tensor, layer: MoELayer) -> Tuple[Tensor, RoutingRecord]:
    """Output-aligned variant: forward Σ_{i∈TopK} E_i(x), gradients gate-weighted."""
    if not layer.aligned:
        raise ContractError("moe_forward_aligned requires aligned == true")
    return _combine(tape, x, layer, aligned=True)


def balance_loss(tape, record: RoutingRecord) -> Tensor:
    """(population std of Imp / mean of Imp)², as var(Imp)/mean(Imp)²."""
    imp = record.imp_tensor
    n = imp.data.shape[0]
    mean = T.scale(tape, T.sum_all(tape, imp), 1.0 / n)
    if mean.item() <= 0.0:
        raise DegenerateError("degenerate routing: mean importance is zero")
    mean_sq = T.mul(tape, mean, mean)
    second = T.scale(tape, T.sum_all(tape, T.mul(tape, imp, imp)), 1.0 / n)
    var = T.sub(tape, second, mean_sq)
    return T.div(tape, var, mean_sq)


def total_aux_loss(tape, records: List[RoutingRecord], w_balance: float) -> Tensor:
    """w_balance × Σ over MoE layers of balance_loss."""
    if w_balance < 0:
        raise ConfigError("w_balance must be non-negative")
    if not records:
        return T.const(np.float32(0.0))
    total: Optional[Tensor] = None
    for rec in records:
        term = balance_loss(tape, rec)
        total = term if total is None else T.add(tape, total, term)
    return T.scale(tape, total, w_balance)
