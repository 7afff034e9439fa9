"""Procedural patch-classification tasks.

Every image is a grid×grid arrangement of patch vectors. Each class owns a
sinusoid texture (frequency, phase, gain); a patch is its class texture plus
Gaussian noise. One class dominates each image, so the same generated image
serves both task kinds: upstream reads the majority class as the image
label, downstream keeps the per-patch class labels.

Generation is a pure function of (task seed, batch index): one PCG64 stream
per batch, drawing majority classes, patch-class uniforms, replacement
classes, then patch noise, in that order. Validation batches live at
`VAL_BASE + i`, disjoint from the training index range by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError

UPSTREAM = "upstream-classification"
DOWNSTREAM = "downstream-segmentation"

# validation batches start here; training uses indices 0..VAL_BASE-1
VAL_BASE = 1_000_000_000


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    seed: int
    grid: int = 8
    patch_dim: int = 16
    n_classes: int = 8
    majority_frac: float = 0.7
    noise: float = 0.25

    def __post_init__(self):
        if self.kind not in (UPSTREAM, DOWNSTREAM):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.n_classes < 1:
            raise ConfigError(f"class count must be ≥ 1, got {self.n_classes}")
        if not 0.0 < self.majority_frac <= 1.0:
            raise ConfigError(f"majority fraction must be in (0, 1], got {self.majority_frac}")

    @property
    def head_role(self) -> str:
        return "upstream" if self.kind == UPSTREAM else "downstream"

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


def _textures(task: SyntheticTask) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (frequency, phase, gain), fixed by the task seed alone."""
    r = np.random.default_rng((task.seed, 7))
    freqs = r.uniform(0.5, 3.0, task.n_classes)
    phases = r.uniform(0.0, 2.0 * np.pi, task.n_classes)
    gains = r.uniform(0.8, 1.2, task.n_classes)
    return freqs, phases, gains


def _generate_images(task: SyntheticTask, index: int, batch_size: int):
    """(patches [B,T,pd] f32, patch_classes [B,T]) for one batch index."""
    if index < 0:
        raise ConfigError(f"batch index must be ≥ 0, got {index}")
    freqs, phases, gains = _textures(task)
    j = np.arange(task.patch_dim)
    patterns = gains[:, None] * np.sin(freqs[:, None] * (j + 1.0) + phases[:, None])

    r = np.random.default_rng((task.seed, index))
    B, T, C = batch_size, task.tokens, task.n_classes
    majority = r.integers(0, C, B)
    keep = r.random((B, T)) < task.majority_frac
    other = r.integers(0, C, (B, T))
    classes = np.where(keep, majority[:, None], other)
    patches = patterns[classes] + task.noise * r.standard_normal((B, T, task.patch_dim))
    return patches.astype(np.float32), classes


def majority_label(patch_classes: np.ndarray, n_classes: int) -> np.ndarray:
    """Mode of each row; ties resolve to the lowest class index."""
    return np.array([np.argmax(np.bincount(row, minlength=n_classes))
                     for row in patch_classes], dtype=np.int64)


def generate_batch(task: SyntheticTask, index: int, batch_size: int):
    """(patches [B,T,pd], labels) — labels [B] upstream, [B,T] downstream."""
    patches, classes = _generate_images(task, index, batch_size)
    if task.kind == UPSTREAM:
        return patches, majority_label(classes, task.n_classes)
    return patches, classes.astype(np.int64)


def val_batch(task: SyntheticTask, i: int, batch_size: int):
    return generate_batch(task, VAL_BASE + i, batch_size)


def task_registry(data_seed: int, grid: int, patch_dim: int,
                  n_classes_upstream: int, n_classes_downstream: int):
    """Named tasks the grow/finetune stages resolve against.

    Upstream and downstream draw distinct texture seeds from the data seed,
    so their class textures differ (transfer, not memorization).
    """
    from .rng import derive_seed
    return {
        "upstream": SyntheticTask(UPSTREAM, derive_seed(data_seed, "task:upstream"),
                                  grid, patch_dim, n_classes_upstream),
        "downstream": SyntheticTask(DOWNSTREAM, derive_seed(data_seed, "task:downstream"),
                                    grid, patch_dim, n_classes_downstream),
    }
