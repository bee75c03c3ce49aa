"""Three-stage training: universal pretraining, joint grouping, per-head fine-tuning.

Stage 1 trains one head per distinct capacity config over the universal
charset on all tasks. Stage 2 initializes every head from its universal
weights and jointly trains heads and assignment logits under the integrated
loss (with the epsilon floor) plus the grouping penalty, recording the
noise-free hard assignment on a fixed cadence. Stage 3 freezes the grouping,
prunes each assigned head to its tasks' characters, and fine-tunes it on its
own tasks only. Heads left without tasks are dropped.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .heads import (
    START_CODE,
    RecognitionHead,
    WordInstance,
    integrated_loss,
    prune_head,
    stack_columns,
)
from .optim import SGD, Adam
from .routing import (
    AssignmentLogits,
    Grouping,
    grouping_loss,
    gumbel_softmax_rows,
    hard_assignment,
    word_model_probs,
)
from .synth import SynthWorld, sample_batch, sample_task_words, sample_word
from .taskprob import TaskClassifier, p_wt_from_ground_truth, task_loss, universal_charset

STAGE_PRETRAIN = "pretrain"
STAGE_GROUP = "group"
STAGE_FINETUNE = "finetune"
_STAGES = (STAGE_PRETRAIN, STAGE_GROUP, STAGE_FINETUNE)

# rng stream tags, so every stage draws from an independent deterministic stream
_RNG_INIT, _RNG_PRETRAIN_DATA, _RNG_GROUP_DATA, _RNG_NOISE, _RNG_FINETUNE_DATA, _RNG_CLF, _RNG_EVAL = range(7)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; aborts the stage."""


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@dataclass
class TrainConfig:
    """Configuration for one training stage."""

    stage: str
    iterations: int
    batch_size: int = 32
    epsilon: float = 0.2
    tau: float = 1.0
    lambda_group: float = 1.0
    lambda_task: float = 0.0
    mu: float | tuple[float, ...] = 1.0
    head_configs: tuple[tuple[int, int], ...] = ((32, 64),)  # (embed, hidden) per head
    lr: float = 1e-3
    logits_lr: float = 0.05
    logits_optimizer: str = "sgd"
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.stage not in _STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("iterations must be >= 0, batch_size and eval_every >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if np.any(np.asarray(self.mu, dtype=np.float64) < 0):
            raise ValueError("mu must be non-negative")
        if self.logits_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown logits optimizer {self.logits_optimizer!r}")
        self.head_configs = tuple((int(e), int(h)) for e, h in self.head_configs)

    @property
    def num_models(self) -> int:
        return len(self.head_configs)

    def mu_vector(self) -> np.ndarray:
        arr = np.asarray(self.mu, dtype=np.float64)
        if arr.ndim == 0:
            return np.full(self.num_models, float(arr))
        if arr.shape != (self.num_models,):
            raise ValueError(f"mu shape {arr.shape} does not match {self.num_models} heads")
        return arr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_configs"] = [list(c) for c in self.head_configs]
        d["mu"] = list(self.mu) if isinstance(self.mu, tuple) else self.mu
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["head_configs"] = tuple(tuple(c) for c in d["head_configs"])
        if isinstance(d.get("mu"), list):
            d["mu"] = tuple(d["mu"])
        return cls(**d)


class AssignmentTrace:
    """Time series of hard task->model assignments at strictly increasing iterations."""

    def __init__(self):
        self.entries: list[tuple[int, Grouping]] = []

    def record(self, iteration: int, grouping: Grouping):
        if self.entries and iteration <= self.entries[-1][0]:
            raise ValueError("trace iterations must be strictly increasing")
        self.entries.append((int(iteration), grouping))

    def __len__(self):
        return len(self.entries)

    def final_grouping(self) -> Grouping:
        if not self.entries:
            raise ValueError("empty trace")
        return self.entries[-1][1]

    def change_count(self, horizon: int) -> int:
        """Consecutive-entry grouping changes whose later entry is within the horizon."""
        changes = 0
        for (_, prev), (it_cur, cur) in zip(self.entries, self.entries[1:]):
            if it_cur <= horizon and cur != prev:
                changes += 1
        return changes

    def reached_equilibrium(self, window: int) -> bool:
        """True iff no grouping change within the trailing window of iterations."""
        if not self.entries:
            raise ValueError("empty trace")
        first_it = self.entries[0][0]
        last_it = self.entries[-1][0]
        cutoff = last_it - window
        if cutoff < first_it:
            return False  # window exceeds trace span: insufficient evidence
        tail = [g for it, g in self.entries if it >= cutoff]
        return all(g == tail[0] for g in tail)


def count_changes(trace: AssignmentTrace, horizon: int) -> int:
    return trace.change_count(horizon)


def detect_equilibrium(trace: AssignmentTrace, window: int) -> bool:
    return trace.reached_equilibrium(window)


# ---------------------------------------------------------------------------
# stage 1: universal pretraining
# ---------------------------------------------------------------------------

def head_charset(world: SynthWorld) -> tuple[int, ...]:
    """Universal head charset: the start symbol plus every task's characters."""
    return (START_CODE,) + universal_charset(world.charsets)


@dataclass
class PretrainResult:
    states: dict[tuple[int, int], dict[str, np.ndarray]]
    loss_history: dict[tuple[int, int], list[float]]
    charset: tuple[int, ...]

    def state_for(self, config: tuple[int, int]) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.states[config].items()}


def pretrain_universal(config: TrainConfig, world: SynthWorld) -> PretrainResult:
    """Train one universal head per distinct (embed, hidden) config on all tasks.

    The saved weights initialize every same-config head in the grouping stage.
    """
    if config.stage != STAGE_PRETRAIN:
        raise ValueError("pretrain_universal requires a pretrain-stage config")
    charset = head_charset(world)
    distinct: list[tuple[int, int]] = []
    for hc in config.head_configs:
        if hc not in distinct:
            distinct.append(hc)

    states, histories = {}, {}
    for embed, hidden in distinct:
        init_rng = _rng(config.seed, _RNG_INIT)
        data_rng = _rng(config.seed, _RNG_PRETRAIN_DATA)
        head = RecognitionHead(0, world.feature_dim, embed, hidden, charset, init_rng)
        opt = Adam(head.parameters(), lr=config.lr)
        history: list[float] = []
        for _ in range(config.iterations):
            batch = sample_batch(world, world.ratios, config.batch_size, data_rng)
            loss = head.word_losses(batch).mean()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"pretrain loss became {value}")
            history.append(value)
            opt.zero_grad()
            loss.backward()
            opt.step()
        states[(embed, hidden)] = head.state_arrays()
        histories[(embed, hidden)] = history
    return PretrainResult(states=states, loss_history=histories, charset=charset)


# ---------------------------------------------------------------------------
# stage 2: joint grouping training
# ---------------------------------------------------------------------------

@dataclass
class IterationStats:
    iteration: int
    total: float
    integrated: float
    integrated_base: float  # without the epsilon floor
    loss_sum: float         # sum of the dense word-head loss matrix
    grouping: float
    weight_min: float
    weight_max: float


@dataclass
class GroupingRunResult:
    logits: AssignmentLogits
    heads: list[RecognitionHead]
    trace: AssignmentTrace
    stats: list[IterationStats] = field(default_factory=list)

    def final_grouping(self) -> Grouping:
        return hard_assignment(self.logits)


def _init_heads(config: TrainConfig, world: SynthWorld, pretrained: PretrainResult) -> list[RecognitionHead]:
    heads = []
    for j, (embed, hidden) in enumerate(config.head_configs):
        heads.append(
            RecognitionHead.from_arrays(
                j, world.feature_dim, embed, hidden, pretrained.charset,
                pretrained.state_for((embed, hidden)),
            )
        )
    return heads


def train_grouping(
    config: TrainConfig, world: SynthWorld, pretrained: PretrainResult
) -> GroupingRunResult:
    """Jointly train heads and assignment logits under the integrated + grouping loss.

    Per iteration: one batch, ground-truth word-task rows, one shared soft
    task-model sample, the dense word-head loss matrix over all heads, and a
    single backward pass into heads and logits. The noise-free hard assignment
    is recorded every ``eval_every`` iterations.
    """
    if config.stage != STAGE_GROUP:
        raise ValueError("train_grouping requires a group-stage config")
    t = world.num_tasks
    m = config.num_models
    heads = _init_heads(config, world, pretrained)
    logits = AssignmentLogits(t, m)
    mu = config.mu_vector()

    head_params = [p for head in heads for p in head.parameters()]
    classifier = None
    if config.lambda_task > 0:
        classifier = TaskClassifier(world.feature_dim, 32, t, _rng(config.seed, _RNG_CLF))
        head_params = head_params + classifier.parameters()
    head_opt = Adam(head_params, lr=config.lr)
    if config.logits_optimizer == "adam":
        logits_opt = Adam([logits.matrix], lr=config.logits_lr)
    else:
        logits_opt = SGD([logits.matrix], lr=config.logits_lr)

    data_rng = _rng(config.seed, _RNG_GROUP_DATA)
    noise_rng = _rng(config.seed, _RNG_NOISE)
    trace = AssignmentTrace()
    stats: list[IterationStats] = []
    eps = config.epsilon

    for it in range(1, config.iterations + 1):
        batch = sample_batch(world, world.ratios, config.batch_size, data_rng)
        p_wt = p_wt_from_ground_truth(batch, world.charsets)
        p_tm = gumbel_softmax_rows(logits, config.tau, noise_rng, hard=False)
        p_wm = word_model_probs(p_wt, p_tm)

        loss_cols = [head.word_losses(batch) for head in heads]
        loss_matrix = stack_columns(loss_cols)
        l_int = integrated_loss(loss_matrix, p_wm, eps)
        l_grp = grouping_loss(p_tm, mu)
        total = l_int + l_grp.scale(config.lambda_group)
        if classifier is not None:
            gt = np.array([w.gt_task for w in batch], dtype=np.int64)
            total = total + task_loss(classifier.logits(batch), gt).scale(config.lambda_task)

        # effective per-(word, head) weights must stay in [eps, 1 + eps]
        weights = p_wm.values + eps
        w_min, w_max = float(weights.min()), float(weights.max())
        if w_min < eps - 1e-9 or w_max > 1.0 + eps + 1e-9:
            raise RuntimeError(f"iteration {it}: effective weight outside [{eps}, {1 + eps}]")

        loss_vals = loss_matrix.data
        stat = IterationStats(
            iteration=it,
            total=total.item(),
            integrated=l_int.item(),
            integrated_base=float((p_wm.values * loss_vals).sum()),
            loss_sum=float(loss_vals.sum()),
            grouping=l_grp.item(),
            weight_min=w_min,
            weight_max=w_max,
        )
        if not np.isfinite(stat.total):
            last = trace.entries[-1] if trace.entries else None
            raise TrainingDivergedError(
                f"grouping stage diverged at iteration {it}; last trace entry: {last}"
            )
        stats.append(stat)

        head_opt.zero_grad()
        logits_opt.zero_grad()
        total.backward()
        head_opt.step()
        logits_opt.step()
        logits.require_finite()

        if it % config.eval_every == 0:
            trace.record(it, hard_assignment(logits))

    return GroupingRunResult(logits=logits, heads=heads, trace=trace, stats=stats)


# ---------------------------------------------------------------------------
# stage 3: pruning and per-head fine-tuning
# ---------------------------------------------------------------------------

def finetune_heads(
    config: TrainConfig,
    grouping: Grouping,
    heads: list[RecognitionHead],
    world: SynthWorld,
) -> dict[int, RecognitionHead]:
    """Prune each assigned head to its tasks' characters and train it on them alone.

    The grouping is frozen; assignment logits are not touched. Heads without
    any assigned task are dropped from the result.
    """
    if config.stage != STAGE_FINETUNE:
        raise ValueError("finetune_heads requires a finetune-stage config")
    groups = grouping.groups(num_models=len(heads))
    result: dict[int, RecognitionHead] = {}
    for model_id, tasks in groups.items():
        if not tasks:
            continue
        keep = {START_CODE}
        for task in tasks:
            keep.update(world.charsets[task].symbols)
        head = prune_head(heads[model_id], keep)

        data_rng = _rng(config.seed + model_id, _RNG_FINETUNE_DATA)
        ratios = np.array([world.ratios[task] for task in tasks], dtype=np.float64)
        ratios /= ratios.sum()
        opt = Adam(head.parameters(), lr=config.lr)
        for _ in range(config.iterations):
            picks = data_rng.choice(len(tasks), size=config.batch_size, p=ratios)
            batch = [sample_word(world, tasks[int(i)], data_rng) for i in picks]
            loss = head.word_losses(batch).mean()
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"finetune diverged on head {model_id}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        result[model_id] = head
    return result


# ---------------------------------------------------------------------------
# fixed-grouping training (brute-force oracle backend)
# ---------------------------------------------------------------------------

def train_fixed_grouping(
    config: TrainConfig,
    world: SynthWorld,
    grouping: Grouping,
    pretrained: PretrainResult,
) -> list[RecognitionHead]:
    """Stage-2 budget training with a hard, constant task->model assignment.

    Equivalent to the integrated loss with one-hot word-model rows and no
    epsilon floor: each word contributes only to its assigned head, and the
    contribution is a sum over the batch.
    """
    heads = _init_heads(config, world, pretrained)
    params = [p for head in heads for p in head.parameters()]
    opt = Adam(params, lr=config.lr)
    data_rng = _rng(config.seed, _RNG_GROUP_DATA)

    for it in range(1, config.iterations + 1):
        batch = sample_batch(world, world.ratios, config.batch_size, data_rng)
        by_model: dict[int, list[WordInstance]] = {}
        for word in batch:
            by_model.setdefault(grouping.model_of(word.gt_task), []).append(word)
        total = None
        for model_id, words in sorted(by_model.items()):
            part = heads[model_id].word_losses(words).sum()
            total = part if total is None else total + part
        if not np.isfinite(total.item()):
            raise TrainingDivergedError(f"fixed-grouping training diverged at iteration {it}")
        opt.zero_grad()
        total.backward()
        opt.step()
    return heads


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def teacher_forced_accuracy(head: RecognitionHead, words: list[WordInstance]) -> float:
    """Fraction of positions whose argmax prediction equals the true character."""
    correct = 0
    total = 0
    for word in words:
        pred = head.predict_word(word)
        correct += int((pred == word.labels).sum())
        total += word.length
    return correct / total if total else 0.0


def per_task_accuracy(
    world: SynthWorld,
    grouping: Grouping,
    heads: dict[int, RecognitionHead] | list[RecognitionHead],
    n_per_task: int,
    seed: int,
) -> dict[int, float]:
    """Validation accuracy per task, each word scored by its assigned head."""
    if isinstance(heads, list):
        heads = {j: h for j, h in enumerate(heads)}
    accs: dict[int, float] = {}
    for task in range(world.num_tasks):
        rng = _rng(seed, _RNG_EVAL + task)
        words = sample_task_words(world, task, n_per_task, rng)
        accs[task] = teacher_forced_accuracy(heads[grouping.model_of(task)], words)
    return accs


# ---------------------------------------------------------------------------
# checkpoint i/o
# ---------------------------------------------------------------------------

def write_checkpoint(
    out_dir: str | Path,
    config: TrainConfig,
    logits: AssignmentLogits | None,
    trace: AssignmentTrace | None,
    heads: dict[int, RecognitionHead] | list[RecognitionHead],
):
    """Write config.json, logits.json, trace.csv and per-head manifest + param blob."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    if logits is not None:
        (out / "logits.json").write_text(json.dumps(logits.rows()) + "\n")
    if trace is not None:
        with (out / "trace.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "assignment"])
            for iteration, grouping in trace.entries:
                writer.writerow([iteration, grouping.to_string()])
    if isinstance(heads, list):
        heads = {h.head_id: h for h in heads}
    heads_dir = out / "heads"
    heads_dir.mkdir(exist_ok=True)
    for head_id, head in sorted(heads.items()):
        manifest = {
            "head_id": head_id,
            "feature_dim": head.feature_dim,
            "embed_size": head.embed_size,
            "hidden_size": head.hidden_size,
            "charset": list(head.charset),
            "params": [
                {"name": name, "shape": list(getattr(head, name).shape)}
                for name in RecognitionHead.PARAM_NAMES
            ],
        }
        (heads_dir / f"{head_id}.manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
        blob = b"".join(
            getattr(head, name).data.astype("<f8").tobytes()
            for name in RecognitionHead.PARAM_NAMES
        )
        (heads_dir / f"{head_id}.params.bin").write_bytes(blob)


def read_head(checkpoint_dir: str | Path, head_id: int) -> RecognitionHead:
    base = Path(checkpoint_dir) / "heads"
    manifest = json.loads((base / f"{head_id}.manifest.json").read_text())
    blob = (base / f"{head_id}.params.bin").read_bytes()
    arrays = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += count * 8
    return RecognitionHead.from_arrays(
        manifest["head_id"], manifest["feature_dim"], manifest["embed_size"],
        manifest["hidden_size"], manifest["charset"], arrays,
    )


def read_logits(checkpoint_dir: str | Path) -> AssignmentLogits:
    rows = json.loads((Path(checkpoint_dir) / "logits.json").read_text())
    return AssignmentLogits.from_rows(rows)


def read_trace(checkpoint_dir: str | Path) -> AssignmentTrace:
    trace = AssignmentTrace()
    with (Path(checkpoint_dir) / "trace.csv").open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        for iteration, text in reader:
            trace.record(int(iteration), Grouping.from_string(text))
    return trace
