"""
Reverse-mode autograd on numpy arrays
=====================================

A two-layer network built from the tensor ops, trained for a few AdamW
steps, then checked against central finite differences.
"""

# %%
import numpy as np

from moee import tensor as T
from moee.gradcheck import check_gradients
from moee.nn import MLP
from moee.optim import AdamW

rng = np.random.default_rng(0)

# %% [markdown]
# Ops record themselves on a tape when an input requires a gradient.
# ``backward`` walks the tape in reverse.

# %%
x = T.tensor(rng.normal(size=(4, 3)), requires_grad=True)
y = T.sum(T.tanh(T.matmul(x, T.tensor(np.eye(3)))))
y.backward()
print("d sum(tanh(x)) / dx == 1 - tanh(x)^2:", np.allclose(x.grad, 1 - np.tanh(x.data) ** 2))

# %% [markdown]
# Fit a small regression problem.

# %%
net = MLP(rng, 3, 16, 1, activation="tanh")
X = rng.normal(size=(64, 3))
Y = np.sin(X.sum(1, keepdims=True))
opt = AdamW(net.named_parameters(), lr=1e-2)
for step in range(201):
    opt.zero_grad()
    loss = T.mse_loss(net(T.tensor(X)), Y)
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  mse {loss.item():.4f}")

# %% [markdown]
# Finite differences: every parameter, every coordinate, float64.

# %%
for r in check_gradients(lambda: T.mse_loss(net(T.tensor(X)), Y), dict(net.named_parameters())):
    print(f"{r.name:16s} checked {r.checked:3d}  max rel err {r.max_rel_error:.2e}")
