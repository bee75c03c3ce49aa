"""Differentiable routing of tasks onto a budget of heads.

Holds the learnable task-to-model logit matrix, Gumbel-Softmax sampling of the
task-model probability matrix, its composition with word-task probabilities,
the hinge penalty that keeps heads from idling, and hard assignment readout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatchError, Tensor

ROLE_WORD_TASK = "word-task"
ROLE_TASK_MODEL = "task-model"
ROLE_WORD_MODEL = "word-model"


@dataclass
class ProbMatrix:
    """A row-stochastic matrix in one of three roles along the word->task->model chain."""

    tensor: Tensor
    role: str

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def is_row_stochastic(self, tol: float = 1e-6) -> bool:
        v = self.values
        if v.ndim != 2:
            return False
        rows_ok = np.all(np.abs(v.sum(axis=1) - 1.0) <= tol)
        return bool(rows_ok and v.min() >= -tol and v.max() <= 1.0 + tol)

    def validate(self, tol: float = 1e-6):
        if not self.is_row_stochastic(tol):
            raise ValueError(f"{self.role} matrix is not row-stochastic within {tol}")


class AssignmentLogits:
    """Learnable t x m real matrix driving task->model routing.

    Starts with every entry 1.0 so all heads are equally likely for every task.
    """

    def __init__(self, num_tasks: int, num_models: int):
        if num_tasks < 1 or num_models < 1:
            raise ValueError("AssignmentLogits needs at least one task and one model")
        self.matrix = Tensor(
            np.ones((num_tasks, num_models)), requires_grad=True, name="assignment_logits"
        )

    @property
    def num_tasks(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_models(self) -> int:
        return self.matrix.shape[1]

    def require_finite(self):
        if not np.all(np.isfinite(self.matrix.data)):
            raise FloatingPointError("assignment logits became non-finite")

    def rows(self) -> list[list[float]]:
        return [[float(x) for x in row] for row in self.matrix.data]

    @classmethod
    def from_rows(cls, rows) -> "AssignmentLogits":
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("logit rows must form a 2-d matrix")
        out = cls(arr.shape[0], arr.shape[1])
        out.matrix.data[:] = arr
        return out


@dataclass(frozen=True)
class Grouping:
    """Total map task -> model; multiple tasks may share a model, models may idle."""

    models: tuple[int, ...]  # index = task id

    @property
    def num_tasks(self) -> int:
        return len(self.models)

    def model_of(self, task: int) -> int:
        return self.models[task]

    def groups(self, num_models: int | None = None) -> dict[int, tuple[int, ...]]:
        """Tasks per model, including empty models when num_models is given."""
        if num_models is None:
            num_models = max(self.models) + 1 if self.models else 0
        out = {j: [] for j in range(num_models)}
        for task, model in enumerate(self.models):
            out[model].append(task)
        return {j: tuple(ts) for j, ts in out.items()}

    def partition(self) -> frozenset[frozenset[int]]:
        """Non-empty task groups with head identity erased."""
        return frozenset(
            frozenset(tasks) for tasks in self.groups().values() if tasks
        )

    def to_string(self) -> str:
        return ",".join(f"{i}:{m}" for i, m in enumerate(self.models))

    @classmethod
    def from_string(cls, text: str) -> "Grouping":
        pairs = [item.split(":") for item in text.split(",") if item]
        models = [0] * len(pairs)
        for task_str, model_str in pairs:
            models[int(task_str)] = int(model_str)
        return cls(tuple(models))


def sample_gumbel(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    """i.i.d. standard Gumbel samples, g = -log(-log(u)) with u clamped away from {0, 1}."""
    if rows < 1 or cols < 1:
        raise ValueError("sample_gumbel needs rows >= 1 and cols >= 1")
    u = np.clip(rng.random((rows, cols)), 1e-12, 1.0 - 1e-12)
    return Tensor(-np.log(-np.log(u)))


def gumbel_softmax_rows(
    logits: AssignmentLogits,
    tau: float,
    rng: np.random.Generator | None = None,
    hard: bool = False,
) -> ProbMatrix:
    """Sample a task-model probability matrix from the assignment logits.

    Soft mode perturbs each task row with fresh Gumbel noise, divides by the
    temperature, and row-softmaxes; the result is differentiable with respect
    to the logits. Hard mode returns one-hot argmax rows of the perturbed
    logits, or of the raw logits when no rng is supplied (test-time readout).
    """
    if tau <= 0:
        raise ValueError(f"gumbel_softmax_rows: tau must be positive, got {tau}")
    t, m = logits.num_tasks, logits.num_models
    if hard:
        vals = logits.matrix.data
        if rng is not None:
            vals = vals + sample_gumbel(t, m, rng).data
        idx = vals.argmax(axis=1)  # ties -> lowest model index
        onehot = np.zeros((t, m))
        onehot[np.arange(t), idx] = 1.0
        return ProbMatrix(Tensor(onehot), ROLE_TASK_MODEL)
    if rng is None:
        raise ValueError("gumbel_softmax_rows: soft mode requires an rng")
    noise = sample_gumbel(t, m, rng)
    perturbed = (logits.matrix + noise).scale(1.0 / tau)
    return ProbMatrix(perturbed.softmax_rows(), ROLE_TASK_MODEL)


def word_model_probs(p_wt: ProbMatrix, p_tm: ProbMatrix) -> ProbMatrix:
    """Word-model probabilities as the product of the word-task and task-model matrices."""
    if p_wt.shape[1] != p_tm.shape[0]:
        raise ShapeMismatchError("word_model_probs", p_wt.shape, p_tm.shape)
    return ProbMatrix(p_wt.tensor @ p_tm.tensor, ROLE_WORD_MODEL)


def grouping_loss(p_tm: ProbMatrix, mu) -> Tensor:
    """Hinge penalty sum_j max(mu_j - sum_i p(M_j|T_i), 0).

    mu_j is the least expected task load for model j. Differentiable except at
    the hinge kinks, where the subgradient 0 is taken.
    """
    t, m = p_tm.shape
    mu_arr = np.asarray(mu, dtype=np.float64)
    if mu_arr.ndim == 0:
        mu_arr = np.full(m, float(mu_arr))
    if mu_arr.shape != (m,):
        raise ShapeMismatchError("grouping_loss", p_tm.shape, mu_arr.shape)
    if np.any(mu_arr < 0):
        raise ValueError("grouping_loss: mu must be non-negative")
    col_sums = Tensor(np.ones((1, t))) @ p_tm.tensor  # 1 x m
    slack = Tensor(mu_arr[None, :]) - col_sums
    return slack.relu().sum()


def hard_assignment(logits: AssignmentLogits) -> Grouping:
    """Noise-free argmax per task row; ties break to the lowest model index."""
    logits.require_finite()
    idx = logits.matrix.data.argmax(axis=1)
    return Grouping(tuple(int(j) for j in idx))
