"""Learned grouping of recognition tasks onto a fixed budget of decoder heads.

The package trains multiple sequence-recognition heads jointly with a
differentiable task-to-head router: Gumbel-Softmax samples a soft assignment
matrix, an integrated loss with a small additive floor keeps every head
learning every task, and a hinge penalty keeps heads from idling. Synthetic
scripts with controllable character overlap stand in for real datasets, and a
harness reproduces the grouping-dynamics analyses (multi-seed sweeps, the
base-coefficient ablation, heterogeneous head capacities, and a brute-force
grouping oracle).
"""

from .tensor import DomainError, ShapeMismatchError, Tensor, grad_check
from .optim import SGD, Adam, NaNGradientError
from .routing import (
    AssignmentLogits,
    Grouping,
    ProbMatrix,
    grouping_loss,
    gumbel_softmax_rows,
    hard_assignment,
    sample_gumbel,
    word_model_probs,
)
from .taskprob import (
    CharsetSpec,
    TaskClassifier,
    p_wt_from_coverage,
    p_wt_from_ground_truth,
    task_loss,
    universal_charset,
)
from .heads import (
    START_CODE,
    RecognitionHead,
    UnsupportedCharacterError,
    WordInstance,
    head_forward,
    integrated_loss,
    prune_head,
    seq_loss,
)
from .synth import OverlapError, ScriptSpec, SynthWorld, build_world, sample_batch, sample_word
from .trainer import (
    AssignmentTrace,
    GroupingRunResult,
    TrainConfig,
    TrainingDivergedError,
    count_changes,
    detect_equilibrium,
    finetune_heads,
    pretrain_universal,
    train_grouping,
)
from .harness import (
    ExperimentSpec,
    OccurrenceTable,
    TrainTemplate,
    brute_force_oracle,
    report,
    run_capacity_experiment,
    run_epsilon_ablation,
    run_sweep,
)

__version__ = "0.1.0"
