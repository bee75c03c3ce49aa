"""Batch experiments over the trainer: sweeps, ablations, capacity runs, oracle.

Every experiment is a pure function of (spec, seeds): rerunning a sweep
reproduces byte-identical CSV artifacts. Runs inside a sweep are independent
and may execute in parallel; aggregation happens only after all runs finish.
Failed runs become first-class rows, never silently dropped.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .routing import Grouping
from .synth import ScriptSpec, SynthWorld, build_world
from .trainer import (
    STAGE_FINETUNE,
    STAGE_GROUP,
    STAGE_PRETRAIN,
    PretrainResult,
    TrainConfig,
    finetune_heads,
    per_task_accuracy,
    pretrain_universal,
    train_fixed_grouping,
    train_grouping,
    write_checkpoint,
)

ORACLE_METRIC = "unweighted mean of per-task validation accuracies (teacher-forced, per position)"


class ConfigError(ValueError):
    """Experiment configuration is invalid or unreadable."""


def task_label(task: int) -> str:
    return f"T{task}"


def group_label(tasks) -> str:
    return "+".join(task_label(t) for t in sorted(tasks))


def parse_group_label(label: str) -> tuple[int, ...]:
    if not label:
        return ()
    return tuple(sorted(int(part[1:]) for part in label.split("+")))


# ---------------------------------------------------------------------------
# experiment specification
# ---------------------------------------------------------------------------

@dataclass
class TrainTemplate:
    """Per-stage knobs shared by every run in an experiment."""

    pretrain_iterations: int = 2000
    group_iterations: int = 3000
    finetune_iterations: int = 1000
    batch_size: int = 32
    epsilon: float = 0.2
    tau: float = 1.0
    lambda_group: float = 1.0
    lambda_task: float = 0.0
    mu: float = 1.0
    embed_size: int = 32
    hidden_size: int = 64
    head_configs: tuple[tuple[int, int], ...] | None = None  # heterogeneous override
    lr: float = 1e-3
    logits_lr: float = 0.05
    logits_optimizer: str = "sgd"
    eval_every: int = 10
    pretrain_seed: int = 0
    ablation_iterations: int | None = None  # defaults to group_iterations
    ablation_horizon: int | None = None     # defaults to 15% of group_iterations

    def configs_for(self, m: int) -> tuple[tuple[int, int], ...]:
        if self.head_configs is not None:
            if len(self.head_configs) != m:
                raise ConfigError(
                    f"{len(self.head_configs)} head configs given but {m} heads requested"
                )
            return self.head_configs
        return tuple((self.embed_size, self.hidden_size) for _ in range(m))

    def pretrain_config(self, m: int) -> TrainConfig:
        return TrainConfig(
            stage=STAGE_PRETRAIN, iterations=self.pretrain_iterations,
            batch_size=self.batch_size, head_configs=self.configs_for(m),
            lr=self.lr, seed=self.pretrain_seed,
        )

    def group_config(self, seed: int, m: int, epsilon: float | None = None,
                     iterations: int | None = None) -> TrainConfig:
        return TrainConfig(
            stage=STAGE_GROUP,
            iterations=self.group_iterations if iterations is None else iterations,
            batch_size=self.batch_size,
            epsilon=self.epsilon if epsilon is None else epsilon,
            tau=self.tau, lambda_group=self.lambda_group, lambda_task=self.lambda_task,
            mu=self.mu, head_configs=self.configs_for(m), lr=self.lr,
            logits_lr=self.logits_lr, logits_optimizer=self.logits_optimizer,
            seed=seed, eval_every=self.eval_every,
        )

    def finetune_config(self, seed: int, m: int) -> TrainConfig:
        return TrainConfig(
            stage=STAGE_FINETUNE, iterations=self.finetune_iterations,
            batch_size=self.batch_size, epsilon=0.0, head_configs=self.configs_for(m),
            lr=self.lr, seed=seed,
        )

    def horizon(self) -> int:
        if self.ablation_horizon is not None:
            return self.ablation_horizon
        return max(1, round(0.15 * self.group_iterations))


@dataclass
class ExperimentSpec:
    """World recipe, head counts to sweep, seeds, train template, output dir."""

    scripts: list[ScriptSpec]
    feature_dim: int
    world_seed: int
    head_counts: list[int]
    seeds: list[int]
    template: TrainTemplate
    out_dir: Path
    length_range: tuple[int, int] = (1, 8)

    def __post_init__(self):
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct")
        if not self.head_counts or any(m < 1 for m in self.head_counts):
            raise ConfigError("every head count must be >= 1")
        self.out_dir = Path(self.out_dir)

    def build_world(self) -> SynthWorld:
        return build_world(self.scripts, self.feature_dim, self.world_seed, self.length_range)

    @classmethod
    def from_dict(cls, cfg: dict, out_dir: str | Path | None = None) -> "ExperimentSpec":
        try:
            world = cfg["world"]
            scripts = [
                ScriptSpec(
                    task_id=int(s["task_id"]),
                    charset_size=int(s["charset_size"]),
                    overlap={int(k): float(v) for k, v in s.get("overlap", {}).items()},
                    difficulty=float(s.get("difficulty", 0.3)),
                    sampling_ratio=float(s.get("sampling_ratio", 1.0)),
                )
                for s in world["scripts"]
            ]
            train = dict(cfg.get("train", {}))
            if train.get("head_configs") is not None:
                train["head_configs"] = tuple(tuple(c) for c in train["head_configs"])
            template = TrainTemplate(**train)
            return cls(
                scripts=scripts,
                feature_dim=int(world.get("feature_dim", 16)),
                world_seed=int(world.get("seed", 0)),
                head_counts=[int(m) for m in cfg.get("head_counts", [2])],
                seeds=[int(s) for s in cfg.get("seeds", [0])],
                template=template,
                out_dir=Path(out_dir or cfg.get("out_dir", "runs")),
                length_range=tuple(world.get("length_range", (1, 8))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @classmethod
    def from_json_file(cls, path: str | Path, out_dir: str | Path | None = None) -> "ExperimentSpec":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(cfg, out_dir=out_dir)


# ---------------------------------------------------------------------------
# occurrence aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OccurrenceRow:
    group: tuple[int, ...]       # sorted task ids grouped on one head
    occurrences: int
    heads_at_first: int          # minimum head count when the group first occurred


@dataclass
class OccurrenceTable:
    rows: list[OccurrenceRow]

    @classmethod
    def from_groupings(cls, results: list[tuple[int, Grouping]]) -> "OccurrenceTable":
        """Aggregate (head_count, final grouping) pairs, in ascending head-count order."""
        seen: dict[tuple[int, ...], list[int]] = {}
        for m, grouping in sorted(results, key=lambda r: r[0]):
            for tasks in grouping.groups(num_models=m).values():
                if not tasks:
                    continue
                key = tuple(sorted(tasks))
                if key in seen:
                    seen[key][0] += 1
                else:
                    seen[key] = [1, m]
        rows = [
            OccurrenceRow(group=key, occurrences=count, heads_at_first=first)
            for key, (count, first) in seen.items()
        ]
        rows.sort(key=lambda r: (-r.occurrences, r.heads_at_first, r.group))
        return cls(rows)

    def total_occurrences(self) -> int:
        return sum(r.occurrences for r in self.rows)

    def to_csv(self, path: str | Path):
        lines = ["group,occurrences,heads_at_first_occurrence"]
        for row in self.rows:
            lines.append(f"{group_label(row.group)},{row.occurrences},{row.heads_at_first}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "OccurrenceTable":
        lines = Path(path).read_text().strip().splitlines()
        rows = []
        for line in lines[1:]:
            label, occ, first = line.split(",")
            rows.append(OccurrenceRow(parse_group_label(label), int(occ), int(first)))
        return cls(rows)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    m: int
    seed: int
    status: str                 # "ok" or "failed: <reason>"
    grouping: str = ""          # assignment string when ok
    out_dir: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepResult:
    table: OccurrenceTable
    records: list[RunRecord]
    out_dir: Path

    @property
    def any_failed(self) -> bool:
        return any(not r.ok for r in self.records)


def run_pipeline(
    spec: ExperimentSpec,
    m: int,
    seed: int,
    pretrained: PretrainResult,
    out_dir: Path | None = None,
    finetune: bool = True,
):
    """One full (pretrained) -> group -> finetune run; returns (result, final heads)."""
    world = spec.build_world()
    group_cfg = spec.template.group_config(seed, m)
    result = train_grouping(group_cfg, world, pretrained)
    grouping = result.final_grouping()
    final_heads = None
    if finetune:
        final_heads = finetune_heads(
            spec.template.finetune_config(seed, m), grouping, result.heads, world
        )
    if out_dir is not None:
        write_checkpoint(out_dir, group_cfg, result.logits, result.trace, result.heads)
        if final_heads is not None:
            write_checkpoint(
                Path(out_dir) / "final",
                spec.template.finetune_config(seed, m), None, None, final_heads,
            )
    return result, final_heads


def _sweep_job(payload) -> RunRecord:
    spec, m, seed, pretrained = payload
    run_dir = spec.out_dir / f"run_m{m}_seed{seed}"
    try:
        result, _ = run_pipeline(spec, m, seed, pretrained, out_dir=run_dir)
        return RunRecord(
            m=m, seed=seed, status="ok",
            grouping=result.final_grouping().to_string(),
            out_dir=str(run_dir),
        )
    except Exception as exc:  # failed runs are recorded, the sweep continues
        return RunRecord(m=m, seed=seed, status=f"failed: {exc}", out_dir=str(run_dir))


def _parallel(fn, payloads, workers: int):
    if workers <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads))


def _write_runs_csv(records: list[RunRecord], path: Path):
    lines = ["m,seed,status,grouping,out_dir"]
    for r in records:
        status = r.status.replace(",", ";")
        lines.append(f"{r.m},{r.seed},{status},\"{r.grouping}\",{r.out_dir}")
    path.write_text("\n".join(lines) + "\n")


def run_sweep(spec: ExperimentSpec, workers: int = 1) -> SweepResult:
    """Full three-stage pipeline per (head count, seed); aggregate final groupings."""
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    world = spec.build_world()
    max_m = max(spec.head_counts)
    pairs = [(m, seed) for m in sorted(spec.head_counts) for seed in spec.seeds]
    try:
        pretrained = pretrain_universal(spec.template.pretrain_config(max_m), world)
    except Exception as exc:  # shared pretraining failed: every run fails
        records = [
            RunRecord(m=m, seed=seed, status=f"failed: pretrain: {exc}") for m, seed in pairs
        ]
    else:
        payloads = [(spec, m, seed, pretrained) for m, seed in pairs]
        records = _parallel(_sweep_job, payloads, workers)

    table = OccurrenceTable.from_groupings(
        [(r.m, Grouping.from_string(r.grouping)) for r in records if r.ok]
    )
    table.to_csv(spec.out_dir / "occurrence.csv")
    (spec.out_dir / "occurrence.json").write_text(
        json.dumps(
            [
                {"group": group_label(r.group), "occurrences": r.occurrences,
                 "heads_at_first_occurrence": r.heads_at_first}
                for r in table.rows
            ],
            indent=2,
        ) + "\n"
    )
    _write_runs_csv(records, spec.out_dir / "runs.csv")
    return SweepResult(table=table, records=records, out_dir=spec.out_dir)


# ---------------------------------------------------------------------------
# epsilon ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    epsilon: float
    mean_changes: float
    changes: list[int]  # per seed, in spec.seeds order


@dataclass
class AblationResult:
    rows: list[AblationRow]
    horizon: int
    out_dir: Path


def _ablation_job(payload) -> int:
    spec, epsilon, seed, pretrained = payload
    world = spec.build_world()
    m = spec.head_counts[0]
    iterations = spec.template.ablation_iterations or spec.template.group_iterations
    cfg = spec.template.group_config(seed, m, epsilon=epsilon, iterations=iterations)
    result = train_grouping(cfg, world, pretrained)
    return result.trace.change_count(spec.template.horizon())


def run_epsilon_ablation(spec: ExperimentSpec, epsilons, workers: int = 1) -> AblationResult:
    """Stage-2 runs per (epsilon, seed); mean assignment-change counts over the horizon."""
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 2:
        raise ConfigError("epsilon ablation needs at least 2 epsilon values")
    if len(spec.seeds) < 3:
        raise ConfigError("epsilon ablation needs at least 3 seeds")
    horizon = spec.template.horizon()
    iterations = spec.template.ablation_iterations or spec.template.group_iterations
    if iterations < horizon:
        raise ConfigError(f"ablation iterations {iterations} shorter than horizon {horizon}")

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    world = spec.build_world()
    m = spec.head_counts[0]
    pretrained = pretrain_universal(spec.template.pretrain_config(m), world)

    rows = []
    for eps in epsilons:
        payloads = [(spec, eps, seed, pretrained) for seed in spec.seeds]
        counts = _parallel(_ablation_job, payloads, workers)
        rows.append(AblationRow(epsilon=eps, mean_changes=float(np.mean(counts)), changes=counts))

    lines = ["epsilon,mean_changes,changes"]
    for row in rows:
        lines.append(f"{row.epsilon},{row.mean_changes},{'|'.join(map(str, row.changes))}")
    (spec.out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    return AblationResult(rows=rows, horizon=horizon, out_dir=spec.out_dir)


# ---------------------------------------------------------------------------
# heterogeneous capacity experiment
# ---------------------------------------------------------------------------

@dataclass
class CapacityRow:
    seed: int
    head_id: int
    embed_size: int
    hidden_size: int
    param_count: int
    assigned: tuple[int, ...]
    charset_size: int          # union of assigned tasks' characters (start excluded)
    final_param_count: int | None  # after pruning; None when the head got no task


@dataclass
class CapacityResult:
    rows: list[CapacityRow]
    out_dir: Path

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def largest_to_largest_count(self, world: SynthWorld) -> int:
        """Seeds in which the highest-parameter head took the largest-charset task."""
        sizes = world.charset_sizes()
        big_task = int(np.argmax(sizes))
        hits = 0
        for seed in self.seeds():
            rows = [r for r in self.rows if r.seed == seed]
            big_head = max(rows, key=lambda r: r.param_count)
            if big_task in big_head.assigned:
                hits += 1
        return hits


def _capacity_job(payload) -> list[CapacityRow]:
    spec, seed, pretrained = payload
    from .heads import START_CODE, prune_head

    world = spec.build_world()
    m = len(spec.template.head_configs)
    cfg = spec.template.group_config(seed, m)
    result = train_grouping(cfg, world, pretrained)
    grouping = result.final_grouping()
    groups = grouping.groups(num_models=m)

    rows = []
    for head in result.heads:
        tasks = groups[head.head_id]
        if tasks:
            keep = {START_CODE}
            for task in tasks:
                keep.update(world.charsets[task].symbols)
            final_params = prune_head(head, keep).param_count()
            charset_size = len(keep) - 1
        else:
            final_params = None
            charset_size = 0
        rows.append(CapacityRow(
            seed=seed, head_id=head.head_id,
            embed_size=head.embed_size, hidden_size=head.hidden_size,
            param_count=head.param_count(), assigned=tasks,
            charset_size=charset_size, final_param_count=final_params,
        ))
    return rows


def run_capacity_experiment(spec: ExperimentSpec, workers: int = 1) -> CapacityResult:
    """Distinct-capacity heads, one per task: who ends up with which task."""
    if spec.template.head_configs is None:
        raise ConfigError("capacity experiment needs explicit per-head (embed, hidden) configs")
    configs = spec.template.head_configs
    world = spec.build_world()
    if len(configs) != world.num_tasks:
        raise ConfigError(
            f"capacity experiment needs head count == task count "
            f"({len(configs)} heads vs {world.num_tasks} tasks)"
        )
    if len(set(configs)) != len(configs):
        raise ConfigError("capacity head configs must be pairwise distinct")

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    pretrained = pretrain_universal(spec.template.pretrain_config(len(configs)), world)
    payloads = [(spec, seed, pretrained) for seed in spec.seeds]
    all_rows = [row for rows in _parallel(_capacity_job, payloads, workers) for row in rows]

    lines = ["seed,head_id,embed_size,hidden_size,param_count,assigned,charset_size,final_param_count"]
    for r in all_rows:
        final = "" if r.final_param_count is None else str(r.final_param_count)
        lines.append(
            f"{r.seed},{r.head_id},{r.embed_size},{r.hidden_size},{r.param_count},"
            f"{group_label(r.assigned)},{r.charset_size},{final}"
        )
    (spec.out_dir / "capacity.csv").write_text("\n".join(lines) + "\n")
    return CapacityResult(rows=all_rows, out_dir=spec.out_dir)


# ---------------------------------------------------------------------------
# brute-force grouping oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleEntry:
    grouping: Grouping
    accuracies: dict[int, float]
    mean_accuracy: float


@dataclass
class OracleResult:
    entries: list[OracleEntry]  # sorted by mean accuracy, descending
    metric: str = ORACLE_METRIC

    def top(self) -> OracleEntry:
        return self.entries[0]

    def partition_accuracy(self, partition: frozenset[frozenset[int]]) -> float:
        """Mean accuracy over all head labelings realizing the partition."""
        accs = [e.mean_accuracy for e in self.entries if e.grouping.partition() == partition]
        if not accs:
            raise KeyError("partition never enumerated")
        return float(np.mean(accs))

    def best_partition(self) -> frozenset[frozenset[int]]:
        return self.top().grouping.partition()

    def to_csv(self, path: str | Path, num_tasks: int):
        header = ["rank", "assignment", "partition", "mean_accuracy"]
        header += [f"acc_{task_label(t)}" for t in range(num_tasks)]
        lines = [",".join(header)]
        for rank, e in enumerate(self.entries, 1):
            parts = [str(rank), f"\"{e.grouping.to_string()}\"",
                     "|".join(sorted(group_label(g) for g in e.grouping.partition())),
                     repr(e.mean_accuracy)]
            parts += [repr(e.accuracies[t]) for t in range(num_tasks)]
            lines.append(",".join(parts))
        Path(path).write_text("\n".join(lines) + "\n")


def _oracle_job(payload) -> OracleEntry:
    world, template, m, seed, assignment, pretrained, n_eval, eval_seed = payload
    grouping = Grouping(assignment)
    cfg = template.group_config(seed, m, epsilon=0.0)
    heads = train_fixed_grouping(cfg, world, grouping, pretrained)
    accs = per_task_accuracy(world, grouping, heads, n_eval, seed=eval_seed)
    return OracleEntry(
        grouping=grouping, accuracies=accs,
        mean_accuracy=float(np.mean(list(accs.values()))),
    )


def brute_force_oracle(
    world: SynthWorld,
    m: int,
    template: TrainTemplate,
    seed: int = 0,
    n_eval: int = 200,
    eval_seed: int = 99,
    pretrained: PretrainResult | None = None,
    workers: int = 1,
) -> OracleResult:
    """Train every task->model assignment with a fixed hard grouping and rank them.

    Independent of the routing machinery: no logits, no noise, no epsilon floor.
    Refuses when m^t exceeds 64 enumerated assignments.
    """
    t = world.num_tasks
    if m ** t > 64:
        raise ValueError(f"brute_force_oracle: {m}^{t} = {m ** t} assignments exceeds the 64 guard")
    if pretrained is None:
        pretrained = pretrain_universal(template.pretrain_config(m), world)
    payloads = [
        (world, template, m, seed, assignment, pretrained, n_eval, eval_seed)
        for assignment in itertools.product(range(m), repeat=t)
    ]
    entries = _parallel(_oracle_job, payloads, workers)
    entries.sort(key=lambda e: (-e.mean_accuracy, e.grouping.to_string()))
    return OracleResult(entries=entries)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _csv_to_markdown(path: Path) -> str:
    lines = path.read_text().strip().splitlines()
    if not lines:
        return "(empty)"
    header = lines[0].split(",")
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for line in lines[1:]:
        out.append("| " + " | ".join(line.split(",")) + " |")
    return "\n".join(out)


def report(artifact_dir: str | Path) -> str:
    """Markdown summary of whatever experiment artifacts the directory holds."""
    base = Path(artifact_dir)
    sections = [
        ("Grouping occurrences", "occurrence.csv"),
        ("Run log", "runs.csv"),
        ("Epsilon ablation", "ablation.csv"),
        ("Head capacity vs. task assignment", "capacity.csv"),
        ("Brute-force grouping oracle", "oracle.csv"),
    ]
    out = [
        "# Experiment report",
        "",
        f"Accuracy metric: {ORACLE_METRIC}.",
        "Synthetic-script experiments are desk-scale analogs, not replications.",
        "",
    ]
    warnings = []
    found = 0
    for title, name in sections:
        path = base / name
        if not path.exists():
            warnings.append(f"missing artifact: {name}")
            continue
        found += 1
        out += [f"## {title}", "", _csv_to_markdown(path), ""]
    if warnings:
        out += ["## Warnings", ""] + [f"- {w}" for w in warnings] + [""]
    if found == 0:
        out.insert(5, "No experiment artifacts found.\n")
    text = "\n".join(out)
    if base.exists():
        (base / "report.md").write_text(text)
    return text
