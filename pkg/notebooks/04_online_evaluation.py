# coding: utf-8

# # Online evaluation on a shifted synthetic task
#
# Each episode makes a single pass over the stream. Every batch is predicted
# with the current parameters, and only then does the method adapt. The
# metrics use the logged online predictions.

# In[1]:

from delta_tta import harness

cfg = harness.SweepConfig(task=harness.TaskConfig(epochs=5), per_seed_task=True)
methods = ["source", "bn-adapt", "tent", "tent+tbr", "tent+delta", "ent-w", "ent-w+delta"]
scenarios = [("is+cb", None, None), ("ds+cb", 0.1, None), ("ds+ci", 0.5, 0.05)]
result = harness.compare(methods, scenarios, seeds=[2020, 2021, 2022], cfg=cfg, threads=1)
print("seeds", result["seeds"])
print(harness.format_summary(result["summary"]))


# ## Batch size one
#
# With single-sample batches, batch statistics are meaningless. The
# fast-inference / slow-update schedule predicts every sample at once. It
# adapts every L samples on the last window, and the averages start from the
# source statistics.

# In[2]:

from delta_tta.adapt import method_from_name
from delta_tta.streams import ScenarioSpec, make_scenario

model, _, test = harness.build_task(harness.TaskConfig(epochs=5, seed=2020))
stream = make_scenario(test, ScenarioSpec(seed=2020))
for name in ("source", "tent", "tent+delta"):
    r = harness.run_episode(model, stream, method_from_name(name, init="inherit"), 1, schedule=64)
    print(f"{name:11s} acc {100 * r.acc_mean_class:5.1f}  updates {r.n_updates}")


# Reports are written as JSON lines or CSV with a fixed set of columns.

# In[3]:

import tempfile, os

path = os.path.join(tempfile.mkdtemp(), "report.csv")
harness.emit_report(result["reports"], path, "csv")
print(open(path).read().splitlines()[:3])
