"""Dense f32 tensors with reverse-mode autodiff on an explicit tape.

Design rules, enforced throughout:

* parameters and activations are float32, row-major, C-contiguous;
* reductions (matmul, means, variances, row sums) accumulate in float64
  and round once back to float32;
* no broadcasting except the trailing-dimension bias add (``add_bias``) —
  every other shape change is an explicit op (``expand_cols``,
  ``split_heads``, ...);
* an op records itself on the tape only when some input requires grad, so
  passing ``tape=None`` runs pure inference.

Elementwise nonlinearities, layernorm, softmax and cross-entropy dispatch
to :mod:`rmoe._kernels` (compiled when available, numpy otherwise).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import ContractError, DimensionError, InputError


class FlopCounter:
    """Counts multiply-add FLOPs (2·m·n·k) of matmuls actually executed.

    Only forward-pass matmuls are counted; training-step totals apply the
    standard 3× forward factor, matching the closed-form accounting.
    """

    __slots__ = ("enabled", "total")

    def __init__(self):
        self.enabled = False
        self.total = 0

    def reset(self):
        self.total = 0

    def add(self, m: int, k: int, n: int, batch: int = 1):
        if self.enabled:
            self.total += 2 * batch * m * k * n


flop_counter = FlopCounter()


class Tensor:
    """A shaped f32 array, optionally carrying a gradient of the same shape.

    Scalar (0-d) tensors produced by reductions also carry ``exact``, the
    float64 value before the final rounding to f32; scalar arithmetic
    propagates it. ``data`` stays the canonical f32 value everywhere.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "tape_node", "exact")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape_node: Optional[int] = None  # index into the recording tape
        self.exact: Optional[float] = float(arr.reshape(())) if arr.ndim == 0 else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def scalar(self) -> float:
        """The f64 shadow when carried, else the f32 value; scalars only."""
        return self.exact if self.exact is not None else self.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


def param(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def const(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], bwd: Callable):
        self.out = out
        self.parents = tuple(parents)
        self.bwd = bwd  # grad_out -> tuple of grads aligned with parents (None allowed)


class Tape:
    """Ordered record of operations for one forward pass; backward runs once."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], bwd: Callable):
        out.tape_node = len(self._nodes)
        self._nodes.append(_Node(out, parents, bwd))

    def backward(self, loss: Tensor, leaves: Optional[Sequence[Tensor]] = None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        ``leaves``, when given, are guaranteed a grad array afterwards —
        zeros if the loss does not reach them.
        """
        if loss.data.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.tape_node is None or loss.tape_node >= len(self._nodes) \
                or self._nodes[loss.tape_node].out is not loss:
            raise ContractError("loss was not produced on this tape")
        if self._consumed:
            raise ContractError("backward already ran on this tape")
        self._consumed = True

        loss.grad = np.ones((), dtype=np.float32)
        for node in reversed(self._nodes[: loss.tape_node + 1]):
            gout = node.out.grad
            if gout is None:
                continue
            grads = node.bwd(gout)
            for parent, g in zip(node.parents, grads):
                if g is None or not (parent.requires_grad or parent.tape_node is not None):
                    continue
                if g.shape != parent.data.shape:
                    raise ContractError(
                        f"backward produced shape {g.shape} for parent {parent.data.shape}"
                    )
                if parent.grad is None:
                    parent.grad = g.astype(np.float32, copy=True)
                else:
                    parent.grad = parent.grad + g
        if leaves is not None:
            for leaf in leaves:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)


def zero_grads(params: Sequence[Tensor]):
    for p in params:
        p.grad = None
        p.tape_node = None


def _result(tape: Optional[Tape], data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    out = Tensor(data)
    if tape is not None and any(p.requires_grad or p.tape_node is not None for p in parents):
        out.requires_grad = True
        tape.record(out, parents, bwd)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------- arithmetic

def _shadow(out: Tensor, value: float):
    # f64 shadow for the scalar tail of a loss graph
    if out.data.ndim == 0:
        out.exact = value
    return out


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _result(tape, a.data + b.data, (a, b), lambda g: (g, g))
    if a.exact is not None and b.exact is not None:
        _shadow(out, a.exact + b.exact)
    return out


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _result(tape, a.data - b.data, (a, b), lambda g: (g, -g))
    if a.exact is not None and b.exact is not None:
        _shadow(out, a.exact - b.exact)
    return out


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = _result(tape, ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if a.exact is not None and b.exact is not None:
        _shadow(out, a.exact * b.exact)
    return out


def div(tape, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data.astype(np.float64), b.data.astype(np.float64)
    out = (ad / bd).astype(np.float32)

    def bwd(g):
        g64 = g.astype(np.float64)
        return ((g64 / bd).astype(np.float32), (-g64 * ad / (bd * bd)).astype(np.float32))

    res = _result(tape, out, (a, b), bwd)
    if a.exact is not None and b.exact is not None:
        _shadow(res, a.exact / b.exact)
    return res


def scale(tape, a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    out = _result(tape, a.data * c32, (a,), lambda g: (g * c32,))
    if a.exact is not None:
        _shadow(out, a.exact * float(c32))
    return out


def add_bias(tape, x: Tensor, bias: Tensor) -> Tensor:
    """x[..., d] + bias[d] — the single permitted broadcast."""
    if bias.data.ndim != 1 or x.data.shape[-1] != bias.data.shape[0]:
        raise DimensionError(
            f"add_bias: trailing dim {x.data.shape} vs bias {bias.data.shape}"
        )
    nlead = x.data.ndim - 1

    def bwd(g):
        db = g.astype(np.float64).sum(axis=tuple(range(nlead))).astype(np.float32)
        return (g, db)

    return _result(tape, x.data + bias.data, (x, bias), bwd)


# ------------------------------------------------------------------- matmul

def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.data.shape} @ {b.data.shape}")
    flop_counter.add(a.data.shape[0], a.data.shape[1], b.data.shape[1])
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64).astype(np.float32)

    def bwd(g):
        g64 = g.astype(np.float64)
        return ((g64 @ b64.T).astype(np.float32), (a64.T @ g64).astype(np.float32))

    return _result(tape, out, (a, b), bwd)


def matmul_nt(tape, a: Tensor, b: Tensor) -> Tensor:
    """a @ bᵀ for 2D operands, e.g. gate logits against [n, d] gate weights."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"matmul_nt: {a.data.shape} @ {b.data.shape}ᵀ")
    flop_counter.add(a.data.shape[0], a.data.shape[1], b.data.shape[0])
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64.T).astype(np.float32)

    def bwd(g):
        g64 = g.astype(np.float64)
        return ((g64 @ b64).astype(np.float32), (g64.T @ a64).astype(np.float32))

    return _result(tape, out, (a, b), bwd)


def bmm(tape, a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched matmul on stacks of matrices: [G,m,p] @ [G,p,n] (or bᵀ)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"bmm: {a.data.shape} @ {b.data.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    bmat = b64.swapaxes(1, 2) if transpose_b else b64
    if a64.shape[2] != bmat.shape[1]:
        raise DimensionError(f"bmm: inner dims {a.data.shape} @ {b.data.shape}")
    flop_counter.add(a64.shape[1], a64.shape[2], bmat.shape[2], batch=a64.shape[0])
    out = (a64 @ bmat).astype(np.float32)

    def bwd(g):
        g64 = g.astype(np.float64)
        da = (g64 @ bmat.swapaxes(1, 2)).astype(np.float32)
        db64 = a64.swapaxes(1, 2) @ g64
        if transpose_b:
            db64 = db64.swapaxes(1, 2)
        return (da, db64.astype(np.float32))

    return _result(tape, out, (a, b), bwd)


# ------------------------------------------------------------ nonlinearities

def gelu(tape, x: Tensor) -> Tensor:
    xd = x.data
    flat = np.ascontiguousarray(xd.reshape(-1))
    out = K.gelu_fwd(flat).reshape(xd.shape)

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(-1))
        return (K.gelu_bwd(flat, gflat).reshape(xd.shape),)

    return _result(tape, out, (x,), bwd)


def layernorm(tape, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"layernorm expects 2D rows, got {x.data.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError("layernorm: gamma/beta must match the row width")
    xd = x.data
    y, mean, rstd = K.layernorm_fwd(xd, gamma.data, beta.data, eps)

    def bwd(g):
        g = np.ascontiguousarray(g)
        dx, dgamma, dbeta = K.layernorm_bwd(xd, gamma.data, mean, rstd, g)
        return (dx, dgamma, dbeta)

    return _result(tape, y, (x, gamma, beta), bwd)


def softmax(tape, x: Tensor, axis: int = -1) -> Tensor:
    nd = x.data.ndim
    if nd == 0 or x.data.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} of shape {x.data.shape}")
    if axis not in (-1, nd - 1):
        raise DimensionError("softmax supports the last axis only")
    shp = x.data.shape
    rows = np.ascontiguousarray(x.data.reshape(-1, shp[-1]))
    y2 = K.softmax_fwd(rows)
    y = y2.reshape(shp)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, shp[-1]))
        return (K.softmax_bwd(y2, g2).reshape(shp),)

    return _result(tape, y, (x,), bwd)


def cross_entropy(tape, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of −log softmax(logits)[label]; returns a scalar tensor."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2D logits, got {logits.data.shape}")
    lab = np.ascontiguousarray(labels, dtype=np.intp)
    if lab.ndim != 1 or lab.shape[0] != logits.data.shape[0]:
        raise DimensionError(f"cross_entropy: {lab.shape} labels for {logits.data.shape} logits")
    ncls = logits.data.shape[1]
    if lab.size and (lab.min() < 0 or lab.max() >= ncls):
        raise InputError(f"labels must lie in [0, {ncls})")
    loss, probs = K.cross_entropy_fwd(logits.data, lab)

    def bwd(g):
        return (K.cross_entropy_bwd(probs, lab, float(g)),)

    return _shadow(_result(tape, np.float32(loss), (logits,), bwd), float(loss))


# ------------------------------------------------------------- reductions

def sum_all(tape, x: Tensor) -> Tensor:
    total = float(x.data.astype(np.float64).sum())
    shp = x.data.shape
    out = _result(tape, np.float32(total), (x,),
                  lambda g: (np.full(shp, g, dtype=np.float32),))
    return _shadow(out, total)


def sum_rows(tape, x: Tensor) -> Tensor:
    """[m, n] -> [n], summing over rows in float64."""
    if x.data.ndim != 2:
        raise DimensionError(f"sum_rows expects 2D, got {x.data.shape}")
    m = x.data.shape[0]
    out = x.data.astype(np.float64).sum(axis=0).astype(np.float32)

    def bwd(g):
        return (np.ascontiguousarray(np.repeat(g[None, :], m, axis=0)),)

    return _result(tape, out, (x,), bwd)


def mean_tokens(tape, x: Tensor, groups: int) -> Tensor:
    """[groups*T, d] -> [groups, d], mean over each run of T consecutive rows."""
    rows, d = x.data.shape
    if rows % groups:
        raise DimensionError(f"mean_tokens: {rows} rows not divisible by {groups} groups")
    t = rows // groups
    out = x.data.astype(np.float64).reshape(groups, t, d).mean(axis=1).astype(np.float32)

    def bwd(g):
        expanded = np.repeat(g / np.float32(t), t, axis=0)
        return (expanded.reshape(rows, d),)

    return _result(tape, out, (x,), bwd)


# --------------------------------------------------------- shape movement

def reshape(tape, x: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(x.data.reshape(shape))
    orig = x.data.shape
    return _result(tape, out, (x,), lambda g: (np.ascontiguousarray(g.reshape(orig)),))


def tile_rows(tape, x: Tensor, reps: int) -> Tensor:
    """[T, d] -> [reps*T, d] by stacking copies; backward sums the copies."""
    if x.data.ndim != 2:
        raise DimensionError(f"tile_rows expects 2D, got {x.data.shape}")
    t, d = x.data.shape
    out = np.ascontiguousarray(np.tile(x.data, (reps, 1)))

    def bwd(g):
        return (g.astype(np.float64).reshape(reps, t, d).sum(axis=0).astype(np.float32),)

    return _result(tape, out, (x,), bwd)


def split_heads(tape, x: Tensor, batch: int, tokens: int, heads: int) -> Tensor:
    """[B*T, d] -> [B*heads, T, d/heads] for per-head attention matmuls."""
    rows, d = x.data.shape
    if rows != batch * tokens or d % heads:
        raise DimensionError(f"split_heads: {x.data.shape} with B={batch} T={tokens} h={heads}")
    dh = d // heads
    out = np.ascontiguousarray(
        x.data.reshape(batch, tokens, heads, dh).transpose(0, 2, 1, 3).reshape(batch * heads, tokens, dh)
    )

    def bwd(g):
        back = g.reshape(batch, heads, tokens, dh).transpose(0, 2, 1, 3).reshape(rows, d)
        return (np.ascontiguousarray(back),)

    return _result(tape, out, (x,), bwd)


def merge_heads(tape, x: Tensor, batch: int, tokens: int, heads: int) -> Tensor:
    """[B*heads, T, dh] -> [B*T, heads*dh]; inverse of split_heads."""
    g2, t, dh = x.data.shape
    if g2 != batch * heads or t != tokens:
        raise DimensionError(f"merge_heads: {x.data.shape} with B={batch} T={tokens} h={heads}")
    out = np.ascontiguousarray(
        x.data.reshape(batch, heads, tokens, dh).transpose(0, 2, 1, 3).reshape(batch * tokens, heads * dh)
    )

    def bwd(g):
        back = g.reshape(batch, tokens, heads, dh).transpose(0, 2, 1, 3).reshape(g2, t, dh)
        return (np.ascontiguousarray(back),)

    return _result(tape, out, (x,), bwd)


# ----------------------------------------------------- routing primitives

def gather_rows(tape, x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2D tensor; backward scatter-adds into the source."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows expects 2D, got {x.data.shape}")
    idx = np.ascontiguousarray(idx, dtype=np.intp)
    rows = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise InputError(f"row index out of range for {rows} rows")
    out = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _result(tape, out, (x,), bwd)


def scatter_rows(tape, x: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of x at positions idx in a zero [n_rows, d] tensor."""
    if x.data.ndim != 2 or x.data.shape[0] != len(idx):
        raise DimensionError(f"scatter_rows: {x.data.shape} with {len(idx)} indices")
    idx = np.ascontiguousarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise InputError(f"row index out of range for {n_rows} rows")
    out = np.zeros((n_rows, x.data.shape[1]), dtype=np.float32)
    out[idx] = x.data
    return _result(tape, out, (x,), lambda g: (np.ascontiguousarray(g[idx]),))


def take_column(tape, x: Tensor, j: int) -> Tensor:
    """[m, n] -> [m], column j; backward writes back into that column."""
    if x.data.ndim != 2 or not 0 <= j < x.data.shape[1]:
        raise DimensionError(f"take_column: column {j} of {x.data.shape}")
    out = np.ascontiguousarray(x.data[:, j])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, j] = g
        return (dx,)

    return _result(tape, out, (x,), bwd)


def expand_cols(tape, v: Tensor, n: int) -> Tensor:
    """[m] -> [m, n] by repeating the vector as columns; backward row-sums."""
    if v.data.ndim != 1:
        raise DimensionError(f"expand_cols expects 1D, got {v.data.shape}")
    out = np.ascontiguousarray(np.repeat(v.data[:, None], n, axis=1))

    def bwd(g):
        return (g.astype(np.float64).sum(axis=1).astype(np.float32),)

    return _result(tape, out, (v,), bwd)


def stop_grad(tape, x: Tensor) -> Tensor:
    """Forward copy with no recorded backward path."""
    return Tensor(x.data.copy())


def aligned_expert_combine(tape, g: Tensor, e: Tensor) -> Tensor:
    """Per-expert stop-gradient alignment term.

    Forward value is exactly the expert output e (as if the token kept the
    dense MLP path); backward sends g·dy into the expert and (dy·e) row-sums
    into the gate value — the gradients of g·e without its forward scaling.
    """
    if e.data.ndim != 2 or g.data.shape != (e.data.shape[0],):
        raise DimensionError(f"aligned_expert_combine: gate {g.data.shape} vs experts {e.data.shape}")
    gd, ed = g.data, e.data

    def bwd(gout):
        dg = (gout.astype(np.float64) * ed.astype(np.float64)).sum(axis=1).astype(np.float32)
        de = gout * gd[:, None]
        return (dg, de)

    return _result(tape, ed.copy(), (g, e), bwd)
