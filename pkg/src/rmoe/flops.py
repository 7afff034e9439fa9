"""Analytic FLOP accounting for the training pipelines.

Counts 2·m·n·k per matmul actually executed, in exact integer arithmetic.
Sparse layers bill tokens×k expert evaluations plus the full gate matmul;
the expert total is routing-independent because every token lands in
exactly k expert batches. A train step costs 3× a forward pass (backward
charged as 2× forward). These closed forms must agree exactly with the
runtime matmul counter — the tests cross-check them.
"""

from __future__ import annotations

from .errors import ConfigError, DimensionError
from .model import Model
from .moe import MoELayer

PHASES = ("forward", "train-step")


def _ffn_flops(ffn, rows: int, d: int) -> int:
    if isinstance(ffn, MoELayer):
        h = ffn.experts[0].W1.data.shape[1]
        gate = 2 * rows * d * ffn.n
        experts = ffn.k * rows * (2 * d * h + 2 * h * d)
        return gate + experts
    h = ffn.W1.data.shape[1]
    return rows * (2 * d * h + 2 * h * d)


def forward_flops(model: Model, batch_size: int, head_role: str = "upstream") -> int:
    spec = model.spec
    B, T, d = batch_size, spec.tokens, spec.d_model
    rows = B * T
    total = 2 * rows * spec.patch_dim * d
    for blk in model.blocks:
        total += 4 * (2 * rows * d * d)      # q, k, v, o projections
        total += 2 * (2 * B * T * T * d)     # score and value batched matmuls
        total += _ffn_flops(blk.ffn, rows, d)
    if head_role == "upstream":
        total += 2 * B * d * spec.n_classes_upstream
    elif head_role == "downstream":
        total += 2 * rows * d * spec.n_classes_downstream
    else:
        raise ConfigError(f"unknown head role {head_role!r}")
    return total


def count_flops(model: Model, batch_shape, phase: str,
                head_role: str = "upstream") -> int:
    """Exact FLOPs for one forward pass or one optimizer step."""
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    B, T = batch_shape
    if T != model.spec.tokens:
        raise DimensionError(f"batch has {T} tokens, model expects {model.spec.tokens}")
    fwd = forward_flops(model, B, head_role)
    return fwd if phase == "forward" else 3 * fwd
