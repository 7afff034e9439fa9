"""Exporters for routing and expert-weight diagnostics.

Everything here is a pure function from logged artifacts (weight snapshots,
run logs) or a frozen model to CSV/PGM text, so exports are byte-stable
given identical inputs. Numbers are rendered with a fixed format for the
same reason.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, DegenerateError
from .model import Model, model_forward
from .moe import MoELayer

_F = ".10e"  # fixed float format for exported files


@dataclass
class WeightSnapshot:
    epoch: int
    experts: np.ndarray  # [n, D] flattened per-expert weights

    @staticmethod
    def load_series(path: str) -> List["WeightSnapshot"]:
        out = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    obj = json.loads(line)
                    out.append(WeightSnapshot(int(obj["epoch"]),
                                              np.asarray(obj["experts"], np.float64)))
        return out


def _validate_series(snapshots: Sequence[WeightSnapshot]) -> None:
    if not snapshots:
        raise ConfigError("empty snapshot series")
    width = snapshots[0].experts.shape[1]
    last = None
    for s in snapshots:
        if s.experts.ndim != 2 or s.experts.shape[1] != width:
            raise DataError("snapshot expert vectors have inconsistent lengths")
        if last is not None and s.epoch <= last:
            raise DataError(f"snapshot epochs must strictly increase, got {s.epoch} after {last}")
        last = s.epoch


def _power_iteration(cov: np.ndarray, ortho: Optional[np.ndarray] = None,
                     tol: float = 1e-8,
                     max_iter: int = 100_000) -> Tuple[np.ndarray, float]:
    """Dominant eigenpair of a symmetric PSD matrix; start vector is the
    first coordinate axis, so the result is deterministic. Iterates are kept
    orthogonal to `ortho` — deflation alone leaves an O(tol) residual along
    the first component that would otherwise dominate a (near-)null second
    eigenvalue and make pc2 shadow pc1."""
    d = cov.shape[0]

    def _against(w):
        return w - float(ortho @ w) * ortho if ortho is not None else w

    v = None
    for axis in range(d):
        cand = np.zeros(d)
        cand[axis] = 1.0
        cand = _against(cand)
        norm = float(np.linalg.norm(cand))
        if norm > 1e-12:
            v = cand / norm
            break
    if v is None:  # 1-D space whose only axis was deflated away
        return _against(np.eye(d)[0]), 0.0

    for _ in range(max_iter):
        w = _against(cov @ v)
        norm = float(np.linalg.norm(w))
        if norm < 1e-30:
            # null direction: the cloud has no variance beyond what was
            # deflated; return a deterministic unit vector in the null space
            return v, 0.0
        w /= norm
        if float(np.dot(w, v)) < 0:
            w = -w
        if float(np.linalg.norm(w - v)) < tol:
            v = w
            break
        v = w
    lam = float(v @ cov @ v)
    return v, lam


def _sign_convention(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


@dataclass
class PCAResult:
    epochs: List[int]          # per point
    experts: List[int]         # per point
    points: np.ndarray         # [P, 2]
    variances: Tuple[float, float]
    cluster_ratio: Optional[float]  # within-epoch spread ÷ centroid spread

    def to_csv(self) -> str:
        lines = ["epoch,expert,pc1,pc2"]
        for e, x, p in zip(self.epochs, self.experts, self.points):
            lines.append(f"{e},{x},{p[0]:{_F}},{p[1]:{_F}}")
        return "\n".join(lines) + "\n"


def pca_trajectory(snapshots: Sequence[WeightSnapshot]) -> PCAResult:
    """Project every (expert, epoch) weight vector onto the pooled cloud's
    top-2 principal directions (power iteration with deflation; each
    component's largest-magnitude loading is made positive)."""
    _validate_series(snapshots)
    rows, epochs, experts = [], [], []
    for s in snapshots:
        for j, vec in enumerate(s.experts):
            rows.append(vec)
            epochs.append(s.epoch)
            experts.append(j)
    X = np.asarray(rows, np.float64)
    if X.shape[0] < 2:
        raise ConfigError("pca_trajectory needs at least 2 weight vectors")
    X = X - X.mean(axis=0)
    cov = (X.T @ X) / X.shape[0]
    total_var = float(np.trace(cov))
    if total_var <= 0.0:
        raise DegenerateError("weight cloud has zero variance")

    v1, lam1 = _power_iteration(cov)
    v1 = _sign_convention(v1)
    deflated = cov - lam1 * np.outer(v1, v1)
    v2, lam2 = _power_iteration(deflated, ortho=v1)
    v2 = _sign_convention(v2)
    pts = np.stack([X @ v1, X @ v2], axis=1)

    ratio = None
    uniq = sorted(set(epochs))
    if len(uniq) >= 2:
        centroids, within = [], []
        ep = np.asarray(epochs)
        for u in uniq:
            grp = X[ep == u]
            centroids.append(grp.mean(axis=0))
            within.append(float(((grp - grp.mean(axis=0)) ** 2).sum(axis=1).mean()))
        cen = np.asarray(centroids)
        cen_var = float(((cen - cen.mean(axis=0)) ** 2).sum(axis=1).mean())
        if cen_var > 0:
            ratio = float(np.mean(within)) / cen_var
    return PCAResult(epochs, experts, pts, (lam1, lam2), ratio)


# ------------------------------------------------------------ specialization

@dataclass
class SpecializationMatrix:
    matrix: np.ndarray      # [classes, experts], display (reordered) rows
    class_ids: List[int]    # class of each display row
    permutation: List[int]  # display row i shows original row permutation[i]
    layer_id: int

    def to_csv(self) -> str:
        n = self.matrix.shape[1]
        lines = ["class," + ",".join(f"expert{j}" for j in range(n))]
        for cid, row in zip(self.class_ids, self.matrix):
            lines.append(str(cid) + "," + ",".join(f"{v:{_F}}" for v in row))
        return "\n".join(lines) + "\n"

    def sidecar(self) -> dict:
        return {"layer": self.layer_id, "classes": self.class_ids,
                "row_permutation": self.permutation}


def _layer_record(model: Model, patches: np.ndarray, layer_id: int):
    if layer_id < 0 or layer_id >= len(model.blocks):
        raise ConfigError(f"layer {layer_id} out of range")
    if not isinstance(model.blocks[layer_id].ffn, MoELayer):
        raise ConfigError(f"layer {layer_id} is not an MoE layer")
    _, aux = model_forward(None, patches, model, "upstream")
    for a in aux:
        if a.block_index == layer_id:
            return a.record
    raise ConfigError(f"no routing record produced for layer {layer_id}")


def specialization_matrix(model: Model, patches: np.ndarray, labels: np.ndarray,
                          layer_id: int) -> SpecializationMatrix:
    """Mean top-1 gate mass each class sends to each expert.

    Rows are the classes present in `labels` (one row per distinct class),
    reordered by their argmax expert for display; the permutation rides
    along so the original order is recoverable.
    """
    record = _layer_record(model, patches, layer_id)
    B, T = patches.shape[0], patches.shape[1]
    top_expert = record.expert_indices[:, 0].reshape(B, T)
    top_gate = record.gate_values[:, 0].reshape(B, T)
    n = model.blocks[layer_id].ffn.n

    class_ids = [int(c) for c in np.unique(np.asarray(labels))]
    M = np.zeros((len(class_ids), n))
    for r, c in enumerate(class_ids):
        sel = np.asarray(labels) == c
        if not sel.any():
            continue
        te, tg = top_expert[sel].ravel(), top_gate[sel].ravel()
        for e in range(n):
            hit = te == e
            M[r, e] = float(tg[hit].sum()) / te.size if hit.any() else 0.0

    perm = sorted(range(len(class_ids)), key=lambda r: (int(np.argmax(M[r])), r))
    return SpecializationMatrix(M[perm], [class_ids[r] for r in perm],
                                list(perm), layer_id)


# -------------------------------------------------------------- routing maps

def routing_map_export(model: Model, patches: np.ndarray, layer_id: int,
                       top_m: int = 4, grid: Optional[Tuple[int, int]] = None
                       ) -> Tuple[Dict[str, str], dict]:
    """Binary patch-routing grids for the top-m experts per image.

    Experts rank by routed-patch count (ties to the lower index). Returns
    ({filename: P2 PGM text}, sidecar) — one grid per (image, expert),
    maxval 1, routed patches white (1).
    """
    record = _layer_record(model, patches, layer_id)
    B, T = patches.shape[0], patches.shape[1]
    if grid is None:
        g = math.isqrt(T)
        if g * g != T:
            raise ConfigError(f"{T} tokens is not a perfect square; pass grid dims")
        grid = (g, g)
    gh, gw = grid
    if gh * gw != T:
        raise ConfigError(f"grid {grid} does not cover {T} tokens")

    n = model.blocks[layer_id].ffn.n
    idx = record.expert_indices.reshape(B, T, -1)
    files: Dict[str, str] = {}
    side = {"layer": layer_id, "images": []}
    for b in range(B):
        routed = np.zeros((n, T), dtype=bool)
        for e in range(n):
            routed[e] = (idx[b] == e).any(axis=1)
        counts = routed.sum(axis=1)
        order = sorted(range(n), key=lambda e: (-int(counts[e]), e))[:min(top_m, n)]
        side["images"].append({"image": b, "experts": [int(e) for e in order],
                               "counts": [int(counts[e]) for e in order]})
        for e in order:
            cells = routed[e].astype(int).reshape(gh, gw)
            body = "\n".join(" ".join(str(v) for v in row) for row in cells)
            files[f"img{b:03d}_expert{e}.pgm"] = f"P2\n{gw} {gh}\n1\n{body}\n"
    return files, side


# ------------------------------------------------------------- balance curve

def recompute_balance(imp: Sequence[float]) -> float:
    """Squared coefficient of variation of an importance vector, in f64."""
    v = np.asarray(imp, np.float64)
    mean = v.mean()
    if mean <= 0:
        raise DegenerateError(f"importance mean must be positive, got {mean}")
    return float(v.var() / mean ** 2)


def balance_curve(runlogs: Sequence[Tuple[str, object]], layer_id: int) -> str:
    """CSV `step,run_label,balance_loss`, recomputed from each step's logged
    Imp vector (an independent cross-check of the logged loss values)."""
    key = str(layer_id)
    lines = ["step,run_label,balance_loss"]
    for label, log in runlogs:
        steps = log.step_records()
        rows = [r for r in steps if key in r.get("imp", {})]
        if not rows:
            raise DataError(f"run {label!r} logged no Imp for layer {layer_id}")
        for r in rows:
            lines.append(f"{r['step']},{label},{recompute_balance(r['imp'][key]):{_F}}")
    return "\n".join(lines) + "\n"
