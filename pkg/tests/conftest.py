"""Shared test environment.

BLAS thread pools are pinned to one thread before numpy loads so reductions
happen in one deterministic order; golden files and bitwise assertions rely
on it. Subprocess tests must forward this environment (see `pinned_env`).
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402  (after thread pinning)
import pytest  # noqa: E402


@pytest.fixture
def pinned_env():
    """Environment for CLI subprocesses: current env + thread pinning."""
    env = dict(os.environ)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        env[var] = "1"
    return env


@pytest.fixture
def tiny_cfg_dict():
    """Smallest schedule that still exercises every pipeline stage."""
    return {"upstream_epochs": 2, "intermediate_epochs": 1, "steps_per_epoch": 4,
            "downstream_steps": 6, "batch_size": 8, "warmup_steps": 2,
            "scoring_batches": 2, "val_batches": 2, "n": 4, "k": 2, "N": 2,
            "snapshot_every": 3}
