"""Closed-form FLOP counts cross-checked against the runtime matmul counter."""

import numpy as np
import pytest

import rmoe.tensor as T
from rmoe.errors import ConfigError, DimensionError
from rmoe.flops import count_flops, forward_flops
from rmoe.growth import GrowPlan, apply_grow_plan
from rmoe.model import ModelSpec, init_model, model_forward
from rmoe.rng import stage_stream
from rmoe.tensor import Tape, flop_counter as FLOPS

SPEC = ModelSpec(image_grid=3, patch_dim=8, d_model=12, n_heads=2, n_blocks=2,
                 mlp_hidden=16, n_classes_upstream=5, n_classes_downstream=4)


def _grown(model, n, k, layers=None):
    layers = list(range(len(model.blocks))) if layers is None else layers
    plan = GrowPlan("score", layers, len(layers), n, k, 0.01, None)
    return apply_grow_plan(model, plan, None, stage_stream(5, "g"), True, 0.0)


def _measured(model, B, head_role):
    rng = np.random.default_rng(0)
    patches = rng.normal(size=(B, model.spec.tokens, model.spec.patch_dim))
    patches = patches.astype(np.float32)
    FLOPS.reset()
    FLOPS.enabled = True
    try:
        model_forward(Tape(), patches, model, head_role)
        return FLOPS.total
    finally:
        FLOPS.enabled = False
        FLOPS.reset()


@pytest.mark.parametrize("head_role", ["upstream", "downstream"])
def test_dense_forward_matches_counter(head_role):
    m = init_model(SPEC, 0)
    assert forward_flops(m, 3, head_role) == _measured(m, 3, head_role)


@pytest.mark.parametrize("n,k", [(4, 1), (4, 2), (8, 5)])
def test_moe_forward_matches_counter(n, k):
    m = _grown(init_model(SPEC, 1), n, k)
    assert forward_flops(m, 2, "upstream") == _measured(m, 2, "upstream")


def test_mixed_model_matches_counter():
    m = _grown(init_model(SPEC, 2), 4, 2, layers=[1])
    assert forward_flops(m, 2, "downstream") == _measured(m, 2, "downstream")


def test_train_step_is_three_forwards():
    m = init_model(SPEC, 3)
    f = count_flops(m, (2, SPEC.tokens), "forward")
    assert count_flops(m, (2, SPEC.tokens), "train-step") == 3 * f


def test_forward_linear_in_batch_size():
    m = init_model(SPEC, 4)
    assert forward_flops(m, 6, "upstream") == 3 * forward_flops(m, 2, "upstream")


def test_moe_cost_linear_in_k():
    # raising k by one adds exactly tokens × (one expert evaluation) per layer
    base = init_model(SPEC, 5)
    rows = 2 * SPEC.tokens
    expert_eval = 2 * SPEC.d_model * SPEC.mlp_hidden * 2
    f1 = forward_flops(_grown(base, 4, 1), 2, "upstream")
    f2 = forward_flops(_grown(base, 4, 2), 2, "upstream")
    f3 = forward_flops(_grown(base, 4, 3), 2, "upstream")
    assert f2 - f1 == SPEC.n_blocks * rows * expert_eval
    assert f3 - f2 == f2 - f1


def test_moe_overhead_decomposition():
    # MoE forward = dense forward − dense MLPs + gates + k× expert MLPs
    base = init_model(SPEC, 6)
    moe = _grown(base, 4, 2)
    rows = 2 * SPEC.tokens
    mlp = rows * 4 * SPEC.d_model * SPEC.mlp_hidden
    gate = 2 * rows * SPEC.d_model * 4
    expected = (forward_flops(base, 2, "upstream")
                - SPEC.n_blocks * mlp
                + SPEC.n_blocks * (gate + 2 * mlp))
    assert forward_flops(moe, 2, "upstream") == expected


def test_validation_errors():
    m = init_model(SPEC, 7)
    with pytest.raises(ConfigError):
        count_flops(m, (2, SPEC.tokens), "backward")
    with pytest.raises(ConfigError):
        forward_flops(m, 2, "both")
    with pytest.raises(DimensionError):
        count_flops(m, (2, SPEC.tokens + 1), "forward")


def test_counts_are_exact_ints():
    m = _grown(init_model(SPEC, 8), 8, 3)
    v = count_flops(m, (4, SPEC.tokens), "train-step")
    assert isinstance(v, int) and v > 0
