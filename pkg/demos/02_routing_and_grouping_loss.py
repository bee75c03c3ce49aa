#!/usr/bin/env python3
"""Differentiable task-to-head routing: Gumbel noise, soft samples, the idle-head penalty.

Run:  python demos/02_routing_and_grouping_loss.py
"""

import numpy as np

from taskgrouper.routing import (
    AssignmentLogits,
    ProbMatrix,
    grouping_loss,
    gumbel_softmax_rows,
    hard_assignment,
    sample_gumbel,
    word_model_probs,
)
from taskgrouper.tensor import Tensor

rng = np.random.default_rng(42)

# 1. Standard Gumbel noise: mean ~ 0.577 (Euler-Mascheroni), variance ~ pi^2/6.
g = sample_gumbel(200, 500, rng)
print(f"gumbel sample moments: mean {g.data.mean():.4f}, var {g.data.var():.4f}")

# 2. Assignment logits start all-ones: every head equally likely for every task.
logits = AssignmentLogits(num_tasks=3, num_models=2)
print("initial hard assignment (ties break low):", hard_assignment(logits).to_string())

# 3. Soft sampling perturbs each row with fresh noise and row-softmaxes.
#    Rows live on the simplex and the result is differentiable w.r.t. logits.
p_tm = gumbel_softmax_rows(logits, tau=1.0, rng=rng)
print("one soft task-model sample:\n", np.round(p_tm.values, 3))

# 4. Word-model probabilities compose word-task rows with the sampled matrix.
p_wt = ProbMatrix(Tensor(np.array([
    [1.0, 0.0, 0.0],   # a word known to be task 0
    [0.0, 0.3, 0.7],   # an ambiguous word
])), "word-task")
p_wm = word_model_probs(p_wt, p_tm)
print("word-model rows (each sums to 1):\n", np.round(p_wm.values, 3))

# 5. The grouping penalty charges heads whose expected task load falls below
#    mu. Identity routing is free; uniform routing over too many heads is not.
identity = ProbMatrix(Tensor(np.eye(3)), "task-model")
spread = ProbMatrix(Tensor(np.full((3, 5), 0.2)), "task-model")
print("penalty, identity routing over 3 heads:", grouping_loss(identity, mu=1.0).item())
print("penalty, uniform routing over 5 heads:", round(grouping_loss(spread, mu=1.0).item(), 3))

# 6. Pushing one column of the logits up flips the hard assignment.
logits.matrix.data[:, 1] += 2.0
print("after favoring head 1:", hard_assignment(logits).to_string())
