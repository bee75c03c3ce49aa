"""Synthetic scripts: task charsets with controllable pairwise overlap.

Characters are abstract codes mapped to fixed unit prototype vectors; a word
is a random code sequence whose features are the prototypes plus per-task
Gaussian noise. Grouping dynamics depend only on charset overlap and noise
level, which this captures without any rendering pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heads import WordInstance
from .taskprob import CharsetSpec


class OverlapError(ValueError):
    """The requested overlap system cannot be realized."""

    def __init__(self, pair: tuple[int, int], message: str):
        self.pair = pair
        super().__init__(f"tasks {pair}: {message}")


@dataclass
class ScriptSpec:
    """Generation recipe for one synthetic script."""

    task_id: int
    charset_size: int
    overlap: dict[int, float] = field(default_factory=dict)  # other task -> fraction [0, 1]
    difficulty: float = 0.3  # feature noise stddev
    sampling_ratio: float = 1.0

    def __post_init__(self):
        if self.charset_size < 1:
            raise ValueError(f"task {self.task_id}: charset_size must be >= 1")
        if self.difficulty < 0:
            raise ValueError(f"task {self.task_id}: difficulty must be >= 0")
        if self.sampling_ratio <= 0:
            raise ValueError(f"task {self.task_id}: sampling_ratio must be positive")
        for other, frac in self.overlap.items():
            if not 0.0 <= frac <= 1.0:
                raise OverlapError((self.task_id, other), f"overlap fraction {frac} outside [0, 1]")


@dataclass
class SynthWorld:
    """Immutable generated world: charsets, shared prototypes, sampling defaults."""

    charsets: list[CharsetSpec]
    prototypes: dict[int, np.ndarray]  # code -> unit vector in R^d
    feature_dim: int
    seed: int
    sigmas: tuple[float, ...]
    ratios: tuple[float, ...]
    length_range: tuple[int, int] = (1, 8)

    @property
    def num_tasks(self) -> int:
        return len(self.charsets)

    def charset_sizes(self) -> tuple[int, ...]:
        return tuple(len(c.symbols) for c in self.charsets)

    def to_json(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "length_range": list(self.length_range),
            "sigmas": list(self.sigmas),
            "ratios": list(self.ratios),
            "charsets": [
                {"task_id": c.task_id, "symbols": list(c.symbols)} for c in self.charsets
            ],
            "prototypes": {str(code): [float(x) for x in vec] for code, vec in self.prototypes.items()},
        }


def _shared_counts(specs: list[ScriptSpec]) -> dict[tuple[int, int], int]:
    """Symmetrized shared-symbol counts per task pair."""
    t = len(specs)
    sizes = {s.task_id: s.charset_size for s in specs}
    counts: dict[tuple[int, int], int] = {}
    for spec in specs:
        for other, frac in spec.overlap.items():
            if other == spec.task_id or not 0 <= other < t:
                raise OverlapError((spec.task_id, other), "overlap names an unknown task")
            pair = (min(spec.task_id, other), max(spec.task_id, other))
            shared = int(round(frac * min(sizes[pair[0]], sizes[pair[1]])))
            if pair in counts and counts[pair] != shared:
                raise OverlapError(pair, "overlap requested from both sides disagrees")
            counts[pair] = shared
    return counts


def build_world(
    specs: list[ScriptSpec],
    d: int,
    seed: int,
    length_range: tuple[int, int] = (1, 8),
) -> SynthWorld:
    """Allocate character codes honoring pairwise overlaps, then draw prototypes.

    |L_i intersect L_j| = round(overlap_ij * min(|L_i|, |L_j|)); prototypes are
    sampled uniformly on the unit sphere in R^d. A pure function of its inputs.
    """
    specs = sorted(specs, key=lambda s: s.task_id)
    if [s.task_id for s in specs] != list(range(len(specs))):
        raise ValueError("script task_ids must be contiguous from 0")
    if length_range[0] < 1 or length_range[1] < length_range[0]:
        raise ValueError(f"invalid length range {length_range}")

    counts = _shared_counts(specs)
    budget = {s.task_id: s.charset_size for s in specs}
    for (i, j), shared in sorted(counts.items()):
        for task in (i, j):
            if budget[task] < shared:
                raise OverlapError(
                    (i, j), f"shared pools exceed charset size {specs[task].charset_size} of task {task}"
                )
            budget[task] -= shared

    next_code = 1  # code 0 is the reserved start symbol
    members: dict[int, list[int]] = {s.task_id: [] for s in specs}
    for (i, j), shared in sorted(counts.items()):
        pool = list(range(next_code, next_code + shared))
        next_code += shared
        members[i].extend(pool)
        members[j].extend(pool)
    for spec in specs:
        fill = spec.charset_size - len(members[spec.task_id])
        members[spec.task_id].extend(range(next_code, next_code + fill))
        next_code += fill

    charsets = [CharsetSpec(s.task_id, tuple(sorted(members[s.task_id]))) for s in specs]

    rng = np.random.default_rng(seed)
    prototypes: dict[int, np.ndarray] = {}
    for code in range(1, next_code):
        vec = rng.normal(size=d)
        vec /= np.linalg.norm(vec)
        prototypes[code] = vec
    return SynthWorld(
        charsets=charsets,
        prototypes=prototypes,
        feature_dim=d,
        seed=seed,
        sigmas=tuple(s.difficulty for s in specs),
        ratios=tuple(s.sampling_ratio for s in specs),
        length_range=tuple(length_range),
    )


def sample_word(
    world: SynthWorld,
    task: int,
    rng: np.random.Generator,
    length_range: tuple[int, int] | None = None,
) -> WordInstance:
    """Uniform-length, uniform-character word with noisy prototype features."""
    lo, hi = length_range or world.length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {(lo, hi)}")
    symbols = np.array(world.charsets[task].symbols, dtype=np.int64)
    s = int(rng.integers(lo, hi + 1))
    labels = symbols[rng.integers(0, len(symbols), size=s)]
    base = np.stack([world.prototypes[int(c)] for c in labels])
    noise = rng.normal(0.0, world.sigmas[task], (s, world.feature_dim))
    return WordInstance(features=base + noise, labels=labels, gt_task=task)


def sample_batch(
    world: SynthWorld,
    ratios,
    batch_size: int,
    rng: np.random.Generator,
    length_range: tuple[int, int] | None = None,
) -> list[WordInstance]:
    """Tasks drawn i.i.d. from the normalized ratios, then one word per draw."""
    probs = np.asarray(ratios, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] != world.num_tasks:
        raise ValueError(f"need {world.num_tasks} ratios, got shape {probs.shape}")
    if np.any(probs <= 0):
        raise ValueError("sampling ratios must be positive")
    probs = probs / probs.sum()
    tasks = rng.choice(world.num_tasks, size=batch_size, p=probs)
    return [sample_word(world, int(t), rng, length_range) for t in tasks]


def sample_task_words(
    world: SynthWorld,
    task: int,
    n: int,
    rng: np.random.Generator,
    length_range: tuple[int, int] | None = None,
) -> list[WordInstance]:
    """n words from a single task (validation sets)."""
    return [sample_word(world, task, rng, length_range) for _ in range(n)]
