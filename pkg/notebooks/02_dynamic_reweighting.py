# coding: utf-8

# # Dynamic online re-weighting
#
# On a stream that runs through one class at a time, self-training losses
# push the model toward whichever class dominates recently. Re-weighting
# keeps a momentum estimate z of the predicted class frequencies and weights
# each sample inversely to z at its predicted class.

# In[1]:

import numpy as np

from delta_tta import adapt

z = np.array([0.75, 0.25])
probs = np.eye(2)[[0, 1, 1, 1]]
print("raw weights       ", adapt.dot_weights(probs, z, eps=0.0))
print("normalized weights", adapt.normalize_weights(adapt.dot_weights(probs, z, eps=0.0)))
print("updated z         ", adapt.update_z(np.array([0.5, 0.5]), np.eye(2)[[0, 0]], lam=0.9))


# The soft variant uses the whole probability vector instead of the argmax.
# On one-hot predictions the two variants agree exactly.

# In[2]:

rng = np.random.default_rng(1)
p = rng.dirichlet(np.ones(4), size=5)
z = rng.dirichlet(np.ones(4))
print("hard:", adapt.dot_weights(p, z, "hard").round(2))
print("soft:", adapt.dot_weights(p, z, "soft").round(2))


# ## Effect on prediction balance
#
# Per-class prediction counts on a dependent class-balanced stream. A
# smaller spread means less drift toward a few classes.

# In[3]:

from delta_tta import harness
from delta_tta.adapt import method_from_name
from delta_tta.streams import ScenarioSpec, make_scenario

model, _, test = harness.build_task(harness.TaskConfig(epochs=5, seed=2021))
stream = make_scenario(test, ScenarioSpec.parse("ds+cb", rho=0.5, seed=2021))
for name in ("tent", "tent+tbr", "tent+delta", "tent+delta:soft", "tent+tbr+la", "tent+tbr+sample-drop"):
    r = harness.run_episode(model, stream, method_from_name(name), 64)
    print(f"{name:22s} acc {100 * r.acc_mean_class:5.1f}  pred STD {r.pred_std:6.1f}  counts {r.counts}")
