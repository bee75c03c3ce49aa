"""Word-to-task probability producers.

Three sources for the word-task matrix: ground-truth task ids (one-hot rows),
a character-coverage heuristic over the task charsets (label-only, normalized
to a distribution), and a small trainable classifier over pooled features for
the inference path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import WordInstance
from .routing import ROLE_WORD_TASK, ProbMatrix
from .tensor import Tensor


@dataclass(frozen=True)
class CharsetSpec:
    """Ordered set of character codes one task is responsible for."""

    task_id: int
    symbols: tuple[int, ...]

    def __post_init__(self):
        if not self.symbols:
            raise ValueError(f"task {self.task_id}: empty charset")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError(f"task {self.task_id}: duplicate symbols in charset")


def universal_charset(charsets: list[CharsetSpec]) -> tuple[int, ...]:
    """Sorted union of all task charsets."""
    symbols = set()
    for spec in charsets:
        symbols.update(spec.symbols)
    return tuple(sorted(symbols))


def _coverage_row(labels: np.ndarray, symbol_sets: list[set[int]]) -> np.ndarray:
    s = len(labels)
    raw = np.array(
        [sum(1 for c in labels if int(c) in symbols) / s for symbols in symbol_sets]
    )
    total = raw.sum()
    if total == 0.0:
        return np.full(len(symbol_sets), 1.0 / len(symbol_sets))
    return raw / total


def p_wt_from_coverage(batch: list[WordInstance], charsets: list[CharsetSpec]) -> ProbMatrix:
    """Rows proportional to the fraction of each word's characters a task supports.

    A word covered by no charset gets a uniform row (maximal uncertainty).
    """
    if not batch:
        raise ValueError("p_wt_from_coverage: empty batch")
    for word in batch:
        if word.length < 1:
            raise ValueError("p_wt_from_coverage: empty label sequence")
    symbol_sets = [set(spec.symbols) for spec in charsets]
    rows = np.stack([_coverage_row(w.labels, symbol_sets) for w in batch])
    return ProbMatrix(Tensor(rows), ROLE_WORD_TASK)


def p_wt_from_ground_truth(batch: list[WordInstance], charsets: list[CharsetSpec]) -> ProbMatrix:
    """One-hot rows from ground-truth task ids, falling back to coverage per word."""
    t = len(charsets)
    symbol_sets = None
    rows = np.zeros((len(batch), t))
    for k, word in enumerate(batch):
        if word.gt_task is None:
            if symbol_sets is None:
                symbol_sets = [set(spec.symbols) for spec in charsets]
            rows[k] = _coverage_row(word.labels, symbol_sets)
        else:
            if not 0 <= word.gt_task < t:
                raise ValueError(f"ground-truth task {word.gt_task} outside [0, {t})")
            rows[k, word.gt_task] = 1.0
    return ProbMatrix(Tensor(rows), ROLE_WORD_TASK)


class TaskClassifier:
    """Two-layer perceptron from mean-pooled word features to task logits."""

    def __init__(self, feature_dim: int, hidden_size: int, num_tasks: int, rng: np.random.Generator):
        self.feature_dim = int(feature_dim)
        self.hidden_size = int(hidden_size)
        self.num_tasks = int(num_tasks)
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / feature_dim), (feature_dim, hidden_size)),
                         requires_grad=True, name="task_clf.w1")
        self.b1 = Tensor(np.zeros(hidden_size), requires_grad=True, name="task_clf.b1")
        self.w2 = Tensor(rng.normal(0.0, 0.01, (hidden_size, num_tasks)),
                         requires_grad=True, name="task_clf.w2")
        self.b2 = Tensor(np.zeros(num_tasks), requires_grad=True, name="task_clf.b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, batch: list[WordInstance]) -> Tensor:
        pooled = np.stack([w.features.mean(axis=0) for w in batch])
        if pooled.shape[1] != self.feature_dim:
            raise ValueError(
                f"task_classify: feature dim {pooled.shape[1]} != classifier input {self.feature_dim}"
            )
        h = ((Tensor(pooled) @ self.w1) + self.b1).relu()
        return (h @ self.w2) + self.b2

    def p_wt(self, batch: list[WordInstance]) -> ProbMatrix:
        return ProbMatrix(self.logits(batch).softmax_rows(), ROLE_WORD_TASK)


def task_classify(classifier: TaskClassifier, batch: list[WordInstance]) -> Tensor:
    """Raw task logits for a batch (w x t)."""
    return classifier.logits(batch)


def task_loss(logits: Tensor, gt_tasks) -> Tensor:
    """Cross entropy: mean over the batch of -log p(ground-truth task)."""
    gt = np.asarray(gt_tasks, dtype=np.int64)
    if gt.ndim != 1 or gt.shape[0] != logits.shape[0]:
        raise ValueError(f"task_loss: {gt.shape} ground-truth ids for {logits.shape} logits")
    if gt.size and (gt.min() < 0 or gt.max() >= logits.shape[1]):
        raise ValueError("task_loss: ground-truth task id out of range")
    picked = logits.log_softmax_rows().take_per_row(gt)
    return picked.mean().scale(-1.0)
