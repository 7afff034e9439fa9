"""Numpy vs compiled kernel backend timings.

Per-kernel microbenchmarks call both backend modules directly; the
full-train-step comparison re-launches this script in a subprocess per
backend because the backend is fixed at import time (``RMOE_KERNELS``).

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--steps N]
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

# shapes from the default desk configuration: B=16, T=64, d=32, hidden=64,
# n=8 experts with k=5 active
ROWS = 16 * 64
D, H, N_EXP, K_TOP, CLASSES = 32, 64, 8, 5, 8


def _timeit(fn, repeats, inner=10):
    best = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best.append((time.perf_counter() - t0) / inner)
    return min(best)


def _kernel_cases(rng):
    # gelu and the optimizers work on flat buffers; the row kernels on 2-D
    x_h = rng.standard_normal(ROWS * H).astype(np.float32)
    dy_h = rng.standard_normal(ROWS * H).astype(np.float32)
    x_d = rng.standard_normal((ROWS, D)).astype(np.float32)
    dy_d = rng.standard_normal((ROWS, D)).astype(np.float32)
    gamma = np.ones(D, np.float32)
    beta = np.zeros(D, np.float32)
    logits = rng.standard_normal((ROWS, N_EXP)).astype(np.float32)
    cls_logits = rng.standard_normal((ROWS, CLASSES)).astype(np.float32)
    labels = rng.integers(0, CLASSES, ROWS).astype(np.intp)
    p = rng.standard_normal(D * H).astype(np.float32)
    g = rng.standard_normal(D * H).astype(np.float32)

    def cases(be):
        probs = be.softmax_fwd(logits)
        _, mean, rstd = be.layernorm_fwd(x_d, gamma, beta, 1e-5)
        _, ce_probs = be.cross_entropy_fwd(cls_logits, labels)
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        return [
            ("gelu_fwd", lambda: be.gelu_fwd(x_h)),
            ("gelu_bwd", lambda: be.gelu_bwd(x_h, dy_h)),
            ("layernorm_fwd", lambda: be.layernorm_fwd(x_d, gamma, beta, 1e-5)),
            ("layernorm_bwd", lambda: be.layernorm_bwd(x_d, gamma, mean, rstd, dy_d)),
            ("softmax_fwd", lambda: be.softmax_fwd(logits)),
            ("softmax_bwd", lambda: be.softmax_bwd(probs, logits)),
            ("cross_entropy_fwd", lambda: be.cross_entropy_fwd(cls_logits, labels)),
            ("cross_entropy_bwd", lambda: be.cross_entropy_bwd(ce_probs, labels, 1.0)),
            ("topk_mask", lambda: be.topk_mask(probs, K_TOP)),
            ("adamw_step", lambda: be.adamw_step(p.copy(), g, m.copy(), v.copy(),
                                                 3, 1e-3, 0.9, 0.999, 1e-8, 0.01)),
            ("sgd_step", lambda: be.sgd_step(p.copy(), g, 1e-3)),
        ]

    return cases


def bench_kernels(repeats):
    from rmoe._kernels import numpy_backend
    try:
        from rmoe._kernels import _core
    except ImportError:
        _core = None

    cases = _kernel_cases(np.random.default_rng(0))
    rows = []
    np_cases = cases(numpy_backend)
    cy_cases = cases(_core) if _core else None
    for i, (name, fn) in enumerate(np_cases):
        t_np = _timeit(fn, repeats)
        if cy_cases:
            t_cy = _timeit(cy_cases[i][1], repeats)
            rows.append((name, t_np, t_cy, t_np / t_cy))
        else:
            rows.append((name, t_np, None, None))

    print(f"{'kernel':<20}{'numpy µs':>12}{'cython µs':>12}{'speedup':>10}")
    for name, t_np, t_cy, sp in rows:
        cy = f"{t_cy * 1e6:12.1f}" if t_cy is not None else f"{'n/a':>12}"
        spd = f"{sp:10.2f}" if sp is not None else f"{'n/a':>10}"
        print(f"{name:<20}{t_np * 1e6:12.1f}{cy}{spd}")
    if _core is None:
        print("\ncompiled backend not built; showing numpy only")


def train_step_ms(steps):
    """Median per-step time of a grown-model training step (current backend)."""
    import rmoe.tensor as T
    from rmoe._kernels import backend_name
    from rmoe.data import UPSTREAM, SyntheticTask, generate_batch
    from rmoe.growth import GrowPlan, apply_grow_plan
    from rmoe.model import ModelSpec, init_model, model_forward
    from rmoe.moe import total_aux_loss
    from rmoe.optim import AdamW
    from rmoe.rng import stage_stream
    from rmoe.tensor import Tape, zero_grads

    spec = ModelSpec()
    task = SyntheticTask(UPSTREAM, seed=0)
    plan = GrowPlan("every-2", [0, 1, 2], N=3, n=N_EXP, k=K_TOP, epsilon=0.01)
    model = apply_grow_plan(init_model(spec, 0), plan, None,
                            stage_stream(0, "bench"), aligned=False, w_balance=0.01)
    params = model.params_for_head("upstream")
    opt = AdamW(params, lr=1e-3)
    times = []
    for s in range(steps + 2):
        patches, labels = generate_batch(task, s, 16)
        t0 = time.perf_counter()
        zero_grads(model.params())
        tape = Tape()
        logits, aux = model_forward(tape, patches, model, "upstream")
        loss = T.cross_entropy(tape, logits, labels)
        loss = T.add(tape, loss, total_aux_loss(
            tape, [a.record for a in aux], 0.01))
        tape.backward(loss, leaves=params)
        opt.step()
        if s >= 2:  # discard warmup
            times.append(time.perf_counter() - t0)
    return backend_name, statistics.median(times) * 1e3


def bench_train_step(steps):
    print(f"\nfull MoE train step (default config, 3 grown layers, {steps} steps):")
    for choice in ("numpy", "cython"):
        env = dict(os.environ, RMOE_KERNELS=choice)
        r = subprocess.run(
            [sys.executable, __file__, "--train-step-only", "--steps", str(steps)],
            capture_output=True, text=True, env=env)
        if r.returncode != 0:
            print(f"  {choice:<8} unavailable ({r.stderr.strip().splitlines()[-1]})")
            continue
        print(f"  {r.stdout.strip()}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--train-step-only", action="store_true",
                    help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.train_step_only:
        name, ms = train_step_ms(args.steps)
        print(f"{name:<8} {ms:8.1f} ms/step")
        return
    bench_kernels(args.repeats)
    bench_train_step(args.steps)


if __name__ == "__main__":
    main()
