# %% [markdown]
# A tiny tour of the graph engine: build a loss, look at its gradients,
# and check them against central differences.

# %%
import numpy as np

from cecfscil.numerics import Graph, SgdState, backward, grad_check, sgd_step

rng = np.random.default_rng(0)

# %%
# two-layer classifier on 8 random points, 3 classes
g = Graph()
h = g.relu(g.linear(g.const("x"), g.param("w1"), g.param("b1")))
g.cross_entropy(g.linear(h, g.param("w2"), g.param("b2")), g.const("y"))

params = {"w1": rng.normal(0, 0.5, (4, 6)), "b1": np.zeros(6),
          "w2": rng.normal(0, 0.5, (6, 3)), "b2": np.zeros(3)}
data = {"x": rng.normal(size=(8, 4)), "y": rng.integers(0, 3, 8).astype(float)}

loss, grads = backward(g, {**params, **data})
print("loss", round(loss, 4))
print({k: v.shape for k, v in grads.items()})

# %%
# analytic vs numeric gradient, as a max relative error
print("grad check", grad_check(g, {**params, **data}, 1e-6))

# %%
# a few momentum steps on the same batch
state = SgdState(0.2, 0.9)
for step in range(30):
    loss, grads = backward(g, {**params, **data})
    params, state = sgd_step(params, grads, state)
    if step % 10 == 0:
        print(step, round(loss, 4))
