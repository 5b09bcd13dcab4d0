#!/usr/bin/env python3
# A short tour of the numpy autodiff engine that everything else runs on.

# %%
import numpy as np

from metapatch.tensor_core import Graph
from metapatch.model import Architecture, Classifier, build_model, param_count

# %% [markdown]
# Graphs are built once; values are bound by name at forward time.
# Here: relu(x @ w) summed against a fixed projection.

# %%
g = Graph(np.float64)
x = g.input("x")
w = g.param("w", (3, 2))
h = g.relu(g.dense(x, w))
out = g.forward({"x": np.array([[1.0, 2.0, 0.5]]), "w": np.arange(6.0).reshape(3, 2) - 2})
print("forward:", out)

grads = g.backward(np.ones_like(out), inputs=("x",))
print("d/dx:", grads["x"])
print("d/dw:\n", grads["w"])

# %% [markdown]
# Finite differences agree with the analytic gradient.

# %%
xv = np.array([[1.0, 2.0, 0.5]])
wv = np.arange(6.0).reshape(3, 2) - 2
eps = 1e-6
num = np.zeros_like(xv)
for i in range(xv.size):
    xp, xm = xv.copy(), xv.copy()
    xp[0, i] += eps
    xm[0, i] -= eps
    num[0, i] = (g.forward({"x": xp, "w": wv}).sum() - g.forward({"x": xm, "w": wv}).sum()) / (2 * eps)
print("numeric d/dx:", num)

# %% [markdown]
# The classifier: WS-conv -> GN -> ReLU -> pool stages and a dense head.

# %%
arch = Architecture()
print(arch, "->", param_count(arch), "parameters")
model = Classifier(build_model(arch, seed=0))
batch = np.random.default_rng(0).uniform(size=(4, 3, 32, 32)).astype(np.float32)
obj, gx = model.input_gradient(batch, np.array([0, 1, 2, 3]))
print("per-sample loss:", obj.round(3), "input grad shape:", gx.shape)
print("passes so far:", model.counters)
