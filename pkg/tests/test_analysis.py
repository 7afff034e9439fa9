"""Diagnostics exporters: PCA projection, specialization matrices,
routing-map grids, and balance-curve recomputation."""

import json
import math

import numpy as np
import pytest

from rmoe.analysis import (PCAResult, WeightSnapshot, balance_curve,
                           pca_trajectory, recompute_balance,
                           routing_map_export, specialization_matrix)
from rmoe.errors import ConfigError, DataError, DegenerateError
from rmoe.growth import GrowPlan, apply_grow_plan
from rmoe.model import ModelSpec, init_model
from rmoe.pipelines import RunLog
from rmoe.rng import stage_stream

SPEC = ModelSpec(image_grid=4, patch_dim=8, d_model=12, n_heads=2, n_blocks=2,
                 mlp_hidden=16, n_classes_upstream=4, n_classes_downstream=4)


def _moe_model(seed=0, n=4, k=1, layers=(0,)):
    m = init_model(SPEC, seed)
    plan = GrowPlan("score", list(layers), len(layers), n, k, 0.05, None)
    return apply_grow_plan(m, plan, None, stage_stream(seed, "g"), False, 0.0)


def _snaps(epochs, experts):
    return [WeightSnapshot(e, np.asarray(x, np.float64))
            for e, x in zip(epochs, experts)]


# ---------------------------------------------------------------------- PCA

def test_pca_matches_svd_oracle():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(12, 7))
    snaps = _snaps([0, 1, 2], [X[:4], X[4:8], X[8:]])
    res = pca_trajectory(snaps)

    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    lam = (s ** 2) / X.shape[0]
    assert res.variances[0] == pytest.approx(lam[0], rel=1e-6)
    assert res.variances[1] == pytest.approx(lam[1], rel=1e-6)
    for comp, ref in zip(np.stack([res.points[:, 0], res.points[:, 1]]),
                         (Xc @ vt[0], Xc @ vt[1])):
        # eigenvectors are sign-ambiguous; compare up to a global flip
        err = min(np.abs(comp - ref).max(), np.abs(comp + ref).max())
        assert err < 1e-6


def test_pca_collinear_cloud_has_no_second_component():
    d = np.arange(6, dtype=np.float64)
    direction = np.ones(6) / math.sqrt(6)
    pts = np.stack([t * direction for t in (0.0, 1.0, 2.0, 3.0)])
    snaps = _snaps([0, 1], [pts[:2], pts[2:]])
    res = pca_trajectory(snaps)
    assert res.variances[1] < 1e-10
    assert np.abs(res.points[:, 1]).max() < 1e-8


def test_pca_errors():
    with pytest.raises(ConfigError):
        pca_trajectory([])
    with pytest.raises(ConfigError):
        pca_trajectory(_snaps([0], [np.ones((1, 4))]))
    with pytest.raises(DegenerateError):
        pca_trajectory(_snaps([0, 1], [np.ones((2, 4)), np.ones((2, 4))]))
    with pytest.raises(DataError):
        pca_trajectory(_snaps([1, 0], [np.ones((2, 4)), np.zeros((2, 4))]))
    bad = [WeightSnapshot(0, np.ones((2, 4))), WeightSnapshot(1, np.ones((2, 5)))]
    with pytest.raises(DataError):
        pca_trajectory(bad)


def test_pca_cluster_ratio_detects_tight_epochs():
    rng = np.random.default_rng(7)
    base = rng.normal(size=8)
    snaps = []
    for e in range(3):
        center = base + e * 10.0
        cloud = center + 0.01 * rng.normal(size=(4, 8))
        snaps.append(WeightSnapshot(e, cloud))
    res = pca_trajectory(snaps)
    assert res.cluster_ratio is not None and res.cluster_ratio < 1e-3
    single = pca_trajectory(_snaps([0], [rng.normal(size=(4, 8))]))
    assert single.cluster_ratio is None


def test_pca_csv_layout():
    rng = np.random.default_rng(1)
    res = pca_trajectory(_snaps([0, 2], [rng.normal(size=(2, 5)),
                                         rng.normal(size=(2, 5))]))
    lines = res.to_csv().strip().split("\n")
    assert lines[0] == "epoch,expert,pc1,pc2"
    assert len(lines) == 5
    assert lines[1].split(",")[:2] == ["0", "0"]
    assert lines[4].split(",")[:2] == ["2", "1"]


def test_snapshot_series_loader(tmp_path):
    path = str(tmp_path / "snapshots.jsonl")
    with open(path, "w") as f:
        for e in (0, 3):
            f.write(json.dumps({"epoch": e, "layer": 0,
                                "experts": [[1.0 * e, 2.0], [3.0, 4.0]]}) + "\n")
    series = WeightSnapshot.load_series(path)
    assert [s.epoch for s in series] == [0, 3]
    assert series[1].experts.shape == (2, 2)


# ------------------------------------------------------------ specialization

def _routed_inputs(model, layer_id, seed=0):
    rng = np.random.default_rng(seed)
    patches = rng.normal(size=(6, SPEC.tokens, SPEC.patch_dim)).astype(np.float32)
    return patches


def test_specialization_rows_sum_to_top1_mass():
    model = _moe_model(n=4, k=2)
    patches = _routed_inputs(model, 0)
    labels = np.arange(6) % 3
    spec = specialization_matrix(model, patches, labels, 0)
    assert spec.matrix.shape == (3, 4)
    assert sorted(spec.class_ids) == [0, 1, 2]
    # each row distributes the mean top-1 gate over experts, so the row sum
    # equals the class's average top gate (< 1, > 0 for softmax routing)
    sums = spec.matrix.sum(axis=1)
    assert (sums > 0).all() and (sums <= 1.0 + 1e-6).all()
    assert sorted(spec.permutation) == [0, 1, 2]
    side = spec.sidecar()
    assert side["layer"] == 0 and side["row_permutation"] == spec.permutation


def test_specialization_display_order_by_argmax():
    model = _moe_model(n=4, k=1, seed=2)
    patches = _routed_inputs(model, 0, seed=2)
    labels = np.arange(6) % 4
    spec = specialization_matrix(model, patches, labels, 0)
    tops = [int(np.argmax(row)) for row in spec.matrix]
    assert tops == sorted(tops)


def test_specialization_validation():
    model = _moe_model(layers=(0,))
    patches = _routed_inputs(model, 0)
    labels = np.zeros(6, dtype=int)
    with pytest.raises(ConfigError):
        specialization_matrix(model, patches, labels, 1)   # dense layer
    with pytest.raises(ConfigError):
        specialization_matrix(model, patches, labels, 5)   # out of range


def test_specialization_csv():
    model = _moe_model(n=4, k=1, seed=3)
    patches = _routed_inputs(model, 0, seed=3)
    labels = np.arange(6) % 2
    csv = specialization_matrix(model, patches, labels, 0).to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "class,expert0,expert1,expert2,expert3"
    assert len(lines) == 3


# -------------------------------------------------------------- routing maps

def test_routing_maps_partition_grid_at_k1():
    model = _moe_model(n=4, k=1, seed=4)
    patches = _routed_inputs(model, 0, seed=4)[:2]
    files, side = routing_map_export(model, patches, 0, top_m=4)
    for img in side["images"]:
        b = img["image"]
        total = np.zeros(SPEC.tokens, dtype=int)
        for e in img["experts"]:
            body = files[f"img{b:03d}_expert{e}.pgm"].strip().split("\n")[3:]
            cells = np.array([[int(v) for v in row.split()] for row in body])
            assert cells.shape == (4, 4)
            total += cells.ravel()
        # k=1: top-4 of 4 experts covers every patch exactly once
        assert(total == 1).all()
        assert sum(img["counts"]) == SPEC.tokens


def test_routing_maps_cover_grid_k_times():
    model = _moe_model(n=4, k=2, seed=5)
    patches = _routed_inputs(model, 0, seed=5)[:1]
    files, side = routing_map_export(model, patches, 0, top_m=4)
    total = np.zeros(SPEC.tokens, dtype=int)
    for e in side["images"][0]["experts"]:
        body = files[f"img000_expert{e}.pgm"].strip().split("\n")[3:]
        total += np.array([int(v) for row in body for v in row.split()])
    assert (total == 2).all()


def test_routing_map_pgm_header_and_ranking():
    model = _moe_model(n=4, k=1, seed=6)
    patches = _routed_inputs(model, 0, seed=6)[:1]
    files, side = routing_map_export(model, patches, 0, top_m=2)
    assert len(files) == 2
    for text in files.values():
        head = text.split("\n")[:3]
        assert head[0] == "P2"
        assert head[1] == "4 4"
        assert head[2] == "1"
    counts = side["images"][0]["counts"]
    assert counts == sorted(counts, reverse=True)


def test_routing_map_grid_validation():
    model = _moe_model(seed=7)
    patches = _routed_inputs(model, 0, seed=7)[:1]
    with pytest.raises(ConfigError):
        routing_map_export(model, patches, 0, grid=(3, 4))
    files, _ = routing_map_export(model, patches, 0, grid=(2, 8))
    assert any(t.split("\n")[1] == "8 2" for t in files.values())


# ------------------------------------------------------------- balance curve

def test_recompute_balance_known_values():
    assert recompute_balance([1.0, 1.0, 1.0, 1.0]) == 0.0
    assert recompute_balance([1.5, 0.5]) == pytest.approx(0.25)
    with pytest.raises(DegenerateError):
        recompute_balance([0.0, 0.0])


def _log_with_imps(label_seed, steps=4, layer="0"):
    log = RunLog()
    rng = np.random.default_rng(label_seed)
    for s in range(steps):
        imp = (rng.random(4) + 0.1).tolist()
        log.step(stage="downstream", step=s, task_loss=1.0, lr=1e-3,
                 balance={layer: recompute_balance(imp)}, imp={layer: imp},
                 flops=s)
    return log


def test_balance_curve_matches_logged_losses():
    log = _log_with_imps(0)
    csv = balance_curve([("w0", log)], 0)
    lines = csv.strip().split("\n")
    assert lines[0] == "step,run_label,balance_loss"
    assert len(lines) == 5
    for line, rec in zip(lines[1:], log.step_records()):
        step, label, value = line.split(",")
        assert label == "w0"
        # exported floats carry 10 fractional digits (~1e-10 relative)
        assert float(value) == pytest.approx(rec["balance"]["0"], rel=1e-9)


def test_balance_curve_multiple_runs_and_missing_layer():
    csv = balance_curve([("a", _log_with_imps(1)), ("b", _log_with_imps(2))], 0)
    labels = {line.split(",")[1] for line in csv.strip().split("\n")[1:]}
    assert labels == {"a", "b"}
    with pytest.raises(DataError):
        balance_curve([("a", _log_with_imps(3))], 7)
