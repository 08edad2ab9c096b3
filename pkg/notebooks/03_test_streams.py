# coding: utf-8

# # Four kinds of test stream
#
# Samples arrive either independently (IS) or dependently (DS). The
# underlying test set is either class balanced (CB) or exponentially
# imbalanced (CI). DS streams split each class over J pieces using a
# Dirichlet draw, so a small concentration rho gives long single-class runs.

# In[1]:

import numpy as np

from delta_tta import streams
from delta_tta.streams import LabeledDataset, ScenarioSpec, make_scenario

y = np.repeat(np.arange(10), 100)
data = LabeledDataset(np.zeros((y.size, 1)), y, 10)

for rho in (1.0, 0.5, 0.1, 0.01):
    s = make_scenario(data, ScenarioSpec.parse("ds+cb", rho=rho, seed=7))
    print(f"rho={rho:<5} mean run length {streams.run_lengths(s.y).mean():6.2f}  "
          f"piece entropy {streams.piece_entropy(s.y, 10):.2f}")
s = make_scenario(data, ScenarioSpec(seed=7))
print(f"i.i.d.     mean run length {streams.run_lengths(s.y).mean():6.2f}  "
      f"piece entropy {streams.piece_entropy(s.y, 10):.2f}")


# The first 60 labels of a strongly dependent stream:

# In[2]:

s = make_scenario(data, ScenarioSpec.parse("ds+cb", rho=0.1, seed=7))
print("".join(str(k) for k in s.y[:60]))


# Class imbalance: class 0 keeps n_max samples, and the last class keeps
# pi * n_max.

# In[3]:

print(streams.ci_counts(10, 0.1, 100))
s = make_scenario(data, ScenarioSpec.parse("ds+ci", rho=0.5, pi=0.1, seed=7))
print("stream length", len(s), "label histogram", np.bincount(s.y, minlength=10))


# Every stream has a manifest of (position, dataset index, label) records.
# The `export-stream` command writes the same records to a file.

# In[4]:

print(s.manifest()[:5])
