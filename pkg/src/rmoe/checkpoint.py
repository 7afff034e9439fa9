"""Checkpoint directories: manifest.json + weights.bin.

The manifest carries the model shape, per-block FFN variant (dense or
sparse, with gate config and whether a dense core is retained), the stage
tag the pipelines use for hand-off validation, and a name/shape/offset
table into weights.bin. Weights are raw little-endian float32 in table
order, so a save→load round trip is bitwise. Retained cores are serialized
as ``block{i}.ffn.core.{W1,b1,W2,b2}`` alongside the trainable entries.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import StateError
from .model import (Attention, Block, DenseMLP, Head, LayerNormParams, Model,
                    ModelSpec)
from .moe import Expert, MoELayer

_MLP_KEYS = ("W1", "b1", "W2", "b2")
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def _entries(model: Model) -> List[Tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in model.named_params()]
    for i, blk in enumerate(model.blocks):
        if blk.is_moe and blk.ffn.core is not None:
            for k in _MLP_KEYS:
                out.append((f"block{i}.ffn.core.{k}", blk.ffn.core[k]))
    return out


def save_checkpoint(path: str, model: Model, stage: str, seed: Optional[int] = None,
                    grow_plan: Optional[dict] = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = _entries(model)
    params, offset = [], 0
    for name, arr in entries:
        params.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4

    blocks = []
    for blk in model.blocks:
        if blk.is_moe:
            f = blk.ffn
            blocks.append({"ffn": "moe", "n": f.n, "k": f.k, "aligned": f.aligned,
                           "w_balance": f.w_balance, "has_core": f.core is not None})
        else:
            blocks.append({"ffn": "dense"})

    manifest = {"format": 1, "stage": stage, "seed": seed,
                "spec": model.spec.to_json_obj(), "blocks": blocks,
                "grow_plan": grow_plan, "params": params}
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(path, WEIGHTS), "wb") as f:
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read(blob: bytes, table: Dict[str, dict], name: str) -> np.ndarray:
    if name not in table:
        raise StateError(f"checkpoint manifest is missing parameter {name!r}")
    meta = table[name]
    shape = tuple(meta["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = meta["offset"]
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
    return arr.reshape(shape).copy()  # frombuffer views are read-only


def load_checkpoint(path: str) -> Tuple[Model, dict]:
    with open(os.path.join(path, MANIFEST)) as f:
        manifest = json.load(f)
    with open(os.path.join(path, WEIGHTS), "rb") as f:
        blob = f.read()
    expected = sum(int(np.prod(p["shape"]) if p["shape"] else 1) * 4
                   for p in manifest["params"])
    if len(blob) != expected:
        raise StateError(f"weights.bin holds {len(blob)} bytes, manifest expects {expected}")

    spec = ModelSpec(**manifest["spec"])
    table = {p["name"]: p for p in manifest["params"]}
    get = lambda name: _read(blob, table, name)

    blocks = []
    for i, bm in enumerate(manifest["blocks"]):
        p = f"block{i}"
        ln1 = LayerNormParams(T.param(get(f"{p}.ln1.gamma")), T.param(get(f"{p}.ln1.beta")))
        attn = Attention(*(T.param(get(f"{p}.attn.{w}")) for w in ("wq", "wk", "wv", "wo")))
        ln2 = LayerNormParams(T.param(get(f"{p}.ln2.gamma")), T.param(get(f"{p}.ln2.beta")))
        if bm["ffn"] == "dense":
            ffn = DenseMLP(*(T.param(get(f"{p}.ffn.{k}"), f"{p}.ffn.{k}") for k in _MLP_KEYS))
        elif bm["ffn"] == "moe":
            experts = [Expert(*(T.param(get(f"{p}.ffn.expert{j}.{k}"),
                                        f"{p}.ffn.expert{j}.{k}") for k in _MLP_KEYS))
                       for j in range(bm["n"])]
            core = None
            if bm.get("has_core"):
                core = {k: get(f"{p}.ffn.core.{k}") for k in _MLP_KEYS}
            ffn = MoELayer(bm["n"], bm["k"], T.param(get(f"{p}.ffn.gate"), f"{p}.ffn.gate"),
                           experts, bm["aligned"], bm["w_balance"], core, layer_id=i)
        else:
            raise StateError(f"unknown ffn variant {bm['ffn']!r} in block {i}")
        blocks.append(Block(ln1, attn, ln2, ffn))

    model = Model(spec, T.param(get("patch.W"), "patch.W"), T.param(get("patch.b"), "patch.b"),
                  T.param(get("pos"), "pos"), blocks,
                  Head("upstream", T.param(get("head_up.W")), T.param(get("head_up.b"))),
                  Head("downstream", T.param(get("head_down.W")), T.param(get("head_down.b"))))
    return model, manifest


def checkpoint_hash(path: str) -> str:
    """SHA-256 over manifest and weights; stable id for reproducibility checks."""
    h = hashlib.sha256()
    for fname in (MANIFEST, WEIGHTS):
        with open(os.path.join(path, fname), "rb") as f:
            h.update(f.read())
    return h.hexdigest()
