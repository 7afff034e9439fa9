"""Central-difference verification of tape gradients.

TopK routing makes the loss piecewise smooth: a perturbed coordinate whose
routing decisions differ at +h or −h is skipped and reported rather than
compared, since the two-sided difference would straddle a selection boundary.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import RoutingUnstableError
from .rng import stream
from .tensor import Tape, Tensor, zero_grads


class GradCheckResult:
    def __init__(self):
        self.max_rel_error = 0.0
        self.worst: Optional[Tuple[str, int]] = None
        self.n_checked = 0
        self.skipped: list[Tuple[str, int]] = []

    def __repr__(self):
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"checked={self.n_checked}, skipped={len(self.skipped)}, worst={self.worst})")


def finite_diff_check(make_loss: Callable, params: Sequence[Tensor],
                      h: float = 1e-3, sample: Optional[int] = None,
                      seed: int = 0) -> GradCheckResult:
    """Compare tape gradients of every parameter against central differences.

    ``make_loss(tape)`` must rebuild the same deterministic forward pass and
    return ``(loss, routing_signature)``; with a tape the loss must be a
    Tensor recorded on it, while probe calls (``tape=None``) may return a
    Tensor or a plain float (e.g. from a higher-precision reference
    evaluation). The signature (any equatable object, or None) captures all
    TopK selections so flips can be detected.
    ``sample`` caps the number of coordinates tested per parameter; the full
    parameter is tested when it is None or the parameter is smaller.

    Relative error per coordinate: |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
    Raises RoutingUnstableError when every tested coordinate flipped routing.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    zero_grads(params)
    tape = Tape()
    loss_t, sig0 = make_loss(tape)
    tape.backward(loss_t, leaves=params)
    analytic = [p.grad.copy() for p in params]

    gen = stream(seed)
    result = GradCheckResult()
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.shape[0]
        if sample is not None and n > sample:
            coords = np.sort(gen.choice(n, size=sample, replace=False))
        else:
            coords = np.arange(n)
        name = p.name or "<param>"
        for j in coords:
            orig = flat[j]
            flat[j] = orig + np.float32(h)
            lp, sig_p = make_loss(None)
            flat[j] = orig - np.float32(h)
            lm, sig_m = make_loss(None)
            flat[j] = orig
            if sig_p != sig0 or sig_m != sig0:
                result.skipped.append((name, int(j)))
                continue
            vp = lp.scalar() if isinstance(lp, Tensor) else float(lp)
            vm = lm.scalar() if isinstance(lm, Tensor) else float(lm)
            numeric = (vp - vm) / (2.0 * h)
            ana = float(gflat[j])
            rel = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            result.n_checked += 1
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst = (name, int(j))
    if result.n_checked == 0 and result.skipped:
        raise RoutingUnstableError(
            f"routing flipped at every tested coordinate ({len(result.skipped)} skips)"
        )
    return result
