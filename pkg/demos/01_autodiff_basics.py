#!/usr/bin/env python3
"""A tour of the autodiff core: tensors, backward passes, gradient checking.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from taskgrouper.tensor import Tensor, grad_check
from taskgrouper.optim import Adam

# 1. Tensors wrap float64 numpy arrays. Operations build a compute graph
#    whenever an input has requires_grad set.
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True, name="x")
w = Tensor(np.array([[0.5], [-0.2]]), requires_grad=True, name="w")
y = (x @ w).relu().sum()
print("forward value:", y.item())

# 2. backward() walks the graph once and accumulates gradients into leaves.
y.backward()
print("dy/dx:\n", x.grad)
print("dy/dw:\n", w.grad)

# 3. grad_check compares the analytic gradient against central finite
#    differences and reports the worst relative error over coordinates.
err = grad_check(lambda t: (t @ w).relu().sum(), Tensor(x.data), step=1e-5)
print(f"grad_check on the same function: max relative error {err:.2e}")

# 4. Row softmax keeps rows on the simplex and stays differentiable.
logits = Tensor(np.array([[2.0, 0.0, -1.0]]), requires_grad=True)
probs = logits.softmax_rows()
print("softmax row:", probs.data, "sum:", probs.data.sum())

# 5. A two-parameter fit with Adam: minimize ||a*u + b - v||^2.
rng = np.random.default_rng(0)
u = Tensor(rng.normal(size=(64, 1)))
v = Tensor(3.0 * u.data + 1.5)
a = Tensor(np.zeros((1, 1)), requires_grad=True, name="a")
b = Tensor(np.zeros(1), requires_grad=True, name="b")
opt = Adam([a, b], lr=0.05)
for step in range(300):
    pred = (u @ a) + b
    diff = pred - v
    loss = (diff * diff).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
print(f"fitted a={a.data.ravel()[0]:.3f} (true 3.0), b={b.data[0]:.3f} (true 1.5)")
