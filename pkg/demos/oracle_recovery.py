"""Does the search single out a module trained on the task itself?

For each unseen task we train one more adapter on that task's own data,
hide it among 19 random upstream modules, and search composition weights
from 32 examples. We count how often the hidden module receives the
largest absolute weight, for a few search budgets.
"""
import sys

import numpy as np

from loracompose import taskgen
from loracompose.model import LoraTrainConfig, PretrainConfig, pretrain_base, train_lora
from loracompose.pipeline import AdaptConfig, adapt, few_shot
from loracompose.tensor import make_rng

budgets = [int(b) for b in sys.argv[1:]] or [40, 200, 1000]
suite = taskgen.make_suite(0)
data = {s.task_id: taskgen.generate(s) for s in suite.all_specs()}
base = pretrain_base([data[s.task_id]["train"] for s in suite.upstream], PretrainConfig())
cfg = LoraTrainConfig()
upstream = [train_lora(base, data[s.task_id]["train"], cfg, name=s.task_id, task_id=s.task_id)
            for s in suite.upstream]

for budget in budgets:
    hits = 0
    for run, spec in enumerate(suite.unseen):
        d = data[spec.task_id]
        target = train_lora(base, d["train"], cfg, name="target", task_id=spec.task_id)
        g = make_rng(np.random.SeedSequence([run, 0xA4]))
        pool = [upstream[i] for i in g.choice(len(upstream), 19, replace=False)] + [target]
        pool = [pool[i] for i in g.permutation(len(pool))]
        q = few_shot(d["train"], 32, run, spec.task_id)
        rep = adapt(base, None, q, AdaptConfig(shots=32, budget=budget, seed=run), candidates=pool)
        top = int(np.argmax(np.abs(rep.best_weights.as_array())))
        hits += rep.selected_module_names[top] == "target"
    print(f"budget {budget:5d}: hidden module ranked first in {hits}/{len(suite.unseen)} runs")
