"""Tiny pre-norm vision transformer whose MLP layers are growth candidates.

Block composition is fixed: x + SA(LN(x)), then x + FFN(LN(x)), where FFN is
either the original dense MLP or a mixture-of-experts layer. Two heads are
carried: upstream (mean-pool over tokens, then linear) and downstream
(per-token linear, segmentation-style).

Initialization draws from one seeded stream in a documented order so models
are bit-reproducible: patch projection, positional table, then per block
Wq, Wk, Wv, Wo, W1, W2, then the upstream and downstream head weights.
Biases start at zero, layernorm at (γ=1, β=0); only weight matrices consume
truncated-normal(σ=0.02) draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .moe import MoELayer, RoutingRecord, balance_loss, mlp_forward, moe_forward, moe_forward_aligned
from .rng import stage_stream, trunc_normal
from .tensor import Tensor


@dataclass
class ModelSpec:
    image_grid: int = 8          # patches per side; tokens T = image_grid²
    patch_dim: int = 16          # raw features per patch
    d_model: int = 32
    n_heads: int = 2
    n_blocks: int = 4
    mlp_hidden: int = 64
    n_classes_upstream: int = 8
    n_classes_downstream: int = 8

    def __post_init__(self):
        dims = (self.image_grid, self.patch_dim, self.d_model, self.n_heads,
                self.mlp_hidden, self.n_classes_upstream, self.n_classes_downstream)
        if any(v < 1 for v in dims):
            raise ConfigError("all ModelSpec dimensions must be ≥ 1")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be ≥ 1")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def tokens(self) -> int:
        return self.image_grid * self.image_grid

    def to_json_obj(self) -> dict:
        return {
            "image_grid": self.image_grid, "patch_dim": self.patch_dim,
            "d_model": self.d_model, "n_heads": self.n_heads,
            "n_blocks": self.n_blocks, "mlp_hidden": self.mlp_hidden,
            "n_classes_upstream": self.n_classes_upstream,
            "n_classes_downstream": self.n_classes_downstream,
        }


class DenseMLP:
    __slots__ = ("W1", "b1", "W2", "b2")

    def __init__(self, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor):
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    def tensors(self) -> List[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors())


class Attention:
    __slots__ = ("wq", "wk", "wv", "wo")

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo

    def tensors(self) -> List[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


class LayerNormParams:
    __slots__ = ("gamma", "beta")

    def __init__(self, gamma: Tensor, beta: Tensor):
        self.gamma, self.beta = gamma, beta

    def tensors(self) -> List[Tensor]:
        return [self.gamma, self.beta]


class Block:
    __slots__ = ("ln1", "attn", "ln2", "ffn")

    def __init__(self, ln1: LayerNormParams, attn: Attention,
                 ln2: LayerNormParams, ffn: Union[DenseMLP, MoELayer]):
        self.ln1, self.attn, self.ln2, self.ffn = ln1, attn, ln2, ffn

    @property
    def is_moe(self) -> bool:
        return isinstance(self.ffn, MoELayer)


class Head:
    __slots__ = ("role", "W", "b")

    def __init__(self, role: str, W: Tensor, b: Tensor):
        if role not in ("upstream", "downstream"):
            raise ConfigError(f"unknown head role {role!r}")
        self.role, self.W, self.b = role, W, b

    def tensors(self) -> List[Tensor]:
        return [self.W, self.b]


class BlockAux:
    """Per-MoE-layer byproducts of a forward pass."""

    __slots__ = ("block_index", "balance", "record")

    def __init__(self, block_index: int, balance: Tensor, record: RoutingRecord):
        self.block_index = block_index
        self.balance = balance
        self.record = record


class Model:
    def __init__(self, spec: ModelSpec, patch_w: Tensor, patch_b: Tensor,
                 pos: Tensor, blocks: List[Block], head_up: Head, head_down: Head):
        self.spec = spec
        self.patch_w, self.patch_b, self.pos = patch_w, patch_b, pos
        self.blocks = blocks
        self.head_up, self.head_down = head_up, head_down

    def moe_block_indices(self) -> List[int]:
        return [i for i, b in enumerate(self.blocks) if b.is_moe]

    def named_params(self) -> List[Tuple[str, Tensor]]:
        """Canonical (name, tensor) order: trainable weights only, no cores."""
        out = [("patch.W", self.patch_w), ("patch.b", self.patch_b), ("pos", self.pos)]
        for i, blk in enumerate(self.blocks):
            p = f"block{i}"
            out += [(f"{p}.ln1.gamma", blk.ln1.gamma), (f"{p}.ln1.beta", blk.ln1.beta)]
            out += [(f"{p}.attn.wq", blk.attn.wq), (f"{p}.attn.wk", blk.attn.wk),
                    (f"{p}.attn.wv", blk.attn.wv), (f"{p}.attn.wo", blk.attn.wo)]
            out += [(f"{p}.ln2.gamma", blk.ln2.gamma), (f"{p}.ln2.beta", blk.ln2.beta)]
            if isinstance(blk.ffn, MoELayer):
                out.append((f"{p}.ffn.gate", blk.ffn.gate_w))
                for j, e in enumerate(blk.ffn.experts):
                    q = f"{p}.ffn.expert{j}"
                    out += [(f"{q}.W1", e.W1), (f"{q}.b1", e.b1),
                            (f"{q}.W2", e.W2), (f"{q}.b2", e.b2)]
            else:
                out += [(f"{p}.ffn.W1", blk.ffn.W1), (f"{p}.ffn.b1", blk.ffn.b1),
                        (f"{p}.ffn.W2", blk.ffn.W2), (f"{p}.ffn.b2", blk.ffn.b2)]
        out += [("head_up.W", self.head_up.W), ("head_up.b", self.head_up.b),
                ("head_down.W", self.head_down.W), ("head_down.b", self.head_down.b)]
        return out

    def params(self) -> List[Tensor]:
        return [t for _, t in self.named_params()]

    def params_for_head(self, head_role: str) -> List[Tensor]:
        """Trainable tensors when optimizing toward one head; the other head is left out."""
        skip = "head_down" if head_role == "upstream" else "head_up"
        return [t for name, t in self.named_params() if not name.startswith(skip)]

    def n_params(self) -> int:
        """Trainable parameter count (expert cores excluded)."""
        return sum(t.data.size for t in self.params())


def _tn(gen, shape) -> np.ndarray:
    return trunc_normal(gen, shape, std=0.02)


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Fresh dense model; all randomness from the 'init' stage stream."""
    gen = stage_stream(seed, "init")
    d, h, t = spec.d_model, spec.mlp_hidden, spec.tokens
    patch_w = T.param(_tn(gen, (spec.patch_dim, d)), "patch.W")
    patch_b = T.param(np.zeros(d, np.float32), "patch.b")
    pos = T.param(_tn(gen, (t, d)), "pos")
    blocks = []
    for i in range(spec.n_blocks):
        ln1 = LayerNormParams(T.param(np.ones(d, np.float32), f"block{i}.ln1.gamma"),
                              T.param(np.zeros(d, np.float32), f"block{i}.ln1.beta"))
        attn = Attention(*(T.param(_tn(gen, (d, d)), f"block{i}.attn.{nm}")
                           for nm in ("wq", "wk", "wv", "wo")))
        ln2 = LayerNormParams(T.param(np.ones(d, np.float32), f"block{i}.ln2.gamma"),
                              T.param(np.zeros(d, np.float32), f"block{i}.ln2.beta"))
        ffn = DenseMLP(T.param(_tn(gen, (d, h)), f"block{i}.ffn.W1"),
                       T.param(np.zeros(h, np.float32), f"block{i}.ffn.b1"),
                       T.param(_tn(gen, (h, d)), f"block{i}.ffn.W2"),
                       T.param(np.zeros(d, np.float32), f"block{i}.ffn.b2"))
        blocks.append(Block(ln1, attn, ln2, ffn))
    head_up = Head("upstream", T.param(_tn(gen, (d, spec.n_classes_upstream)), "head_up.W"),
                   T.param(np.zeros(spec.n_classes_upstream, np.float32), "head_up.b"))
    head_down = Head("downstream", T.param(_tn(gen, (d, spec.n_classes_downstream)), "head_down.W"),
                     T.param(np.zeros(spec.n_classes_downstream, np.float32), "head_down.b"))
    return Model(spec, patch_w, patch_b, pos, blocks, head_up, head_down)


def reinit_head(model: Model, role: str, seed: int, stage: str):
    """Fresh head weights for a new task (the 'newly introduced' decode head)."""
    gen = stage_stream(seed, stage)
    head = model.head_up if role == "upstream" else model.head_down
    head.W.data[...] = _tn(gen, head.W.data.shape)
    head.b.data[...] = 0.0


def patch_embed(tape, patches: Tensor, W: Tensor, b: Tensor,
                pos: Tensor, batch: int) -> Tensor:
    """Per-token affine projection plus the learned positional table."""
    projected = T.add_bias(tape, T.matmul(tape, patches, W), b)
    return T.add(tape, projected, T.tile_rows(tape, pos, batch))


def attention_forward(tape, x: Tensor, attn: Attention, batch: int,
                      tokens: int, n_heads: int) -> Tensor:
    """softmax(QKᵀ/√d_head)·V per head, merged and output-projected."""
    d = x.data.shape[1]
    dh = d // n_heads
    q = T.split_heads(tape, T.matmul(tape, x, attn.wq), batch, tokens, n_heads)
    k = T.split_heads(tape, T.matmul(tape, x, attn.wk), batch, tokens, n_heads)
    v = T.split_heads(tape, T.matmul(tape, x, attn.wv), batch, tokens, n_heads)
    scores = T.scale(tape, T.bmm(tape, q, k, transpose_b=True), 1.0 / np.sqrt(dh))
    weights = T.softmax(tape, scores)
    mixed = T.merge_heads(tape, T.bmm(tape, weights, v), batch, tokens, n_heads)
    return T.matmul(tape, mixed, attn.wo)


def block_forward(tape, x: Tensor, block: Block, batch: int, tokens: int,
                  n_heads: int, block_index: int = -1) -> Tuple[Tensor, Optional[BlockAux]]:
    """Pre-norm residual block; MoE FFNs also return their aux byproducts."""
    sa = attention_forward(tape, T.layernorm(tape, x, block.ln1.gamma, block.ln1.beta),
                           block.attn, batch, tokens, n_heads)
    h = T.add(tape, x, sa)
    f_in = T.layernorm(tape, h, block.ln2.gamma, block.ln2.beta)
    if isinstance(block.ffn, MoELayer):
        fwd = moe_forward_aligned if block.ffn.aligned else moe_forward
        ff, record = fwd(tape, f_in, block.ffn)
        aux = BlockAux(block_index, balance_loss(tape, record), record)
    else:
        ff = mlp_forward(tape, f_in, block.ffn.W1, block.ffn.b1, block.ffn.W2, block.ffn.b2)
        aux = None
    return T.add(tape, h, ff), aux


def model_forward(tape, patches, model: Model, head_role: str) -> Tuple[Tensor, List[BlockAux]]:
    """Full forward pass.

    ``patches`` is [B, T, patch_dim] (array or Tensor). Returns upstream
    logits [B, C_up] or downstream logits [B, T, C_down], plus one BlockAux
    per MoE layer in block order.
    """
    if head_role not in ("upstream", "downstream"):
        raise ConfigError(f"unknown head role {head_role!r}")
    if not isinstance(patches, Tensor):
        patches = T.const(np.asarray(patches, dtype=np.float32))
    if patches.data.ndim != 3:
        raise DimensionError(f"patches must be [B, T, patch_dim], got {patches.data.shape}")
    b, t, pd = patches.data.shape
    spec = model.spec
    if t != spec.tokens or pd != spec.patch_dim:
        raise DimensionError(
            f"batch tokens/features {(t, pd)} do not match spec {(spec.tokens, spec.patch_dim)}")
    x = patch_embed(tape, T.reshape(tape, patches, (b * t, pd)),
                    model.patch_w, model.patch_b, model.pos, b)
    aux: List[BlockAux] = []
    for i, blk in enumerate(model.blocks):
        x, blk_aux = block_forward(tape, x, blk, b, t, spec.n_heads, i)
        if blk_aux is not None:
            aux.append(blk_aux)
    if head_role == "upstream":
        pooled = T.mean_tokens(tape, x, b)
        logits = T.add_bias(tape, T.matmul(tape, pooled, model.head_up.W), model.head_up.b)
    else:
        per_token = T.add_bias(tape, T.matmul(tape, x, model.head_down.W), model.head_down.b)
        logits = T.reshape(tape, per_token, (b, t, spec.n_classes_downstream))
    return logits, aux
