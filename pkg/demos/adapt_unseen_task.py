"""End to end on one unseen task, entirely in memory.

1. build a suite of related synthetic tasks
2. pretrain a shared base network on the upstream tasks
3. train one low-rank adapter per upstream task
4. for an unseen task, search composition weights from five labelled
   examples and compare held-out accuracy with the bare base network
"""
import time

import numpy as np

from loracompose import taskgen
from loracompose.model import LoraTrainConfig, PretrainConfig, evaluate, pretrain_base, train_lora
from loracompose.pipeline import AdaptConfig, adapt, few_shot

t0 = time.perf_counter()
suite = taskgen.make_suite(0)
data = {s.task_id: taskgen.generate(s) for s in suite.all_specs()}
base = pretrain_base([data[s.task_id]["train"] for s in suite.upstream], PretrainConfig())
cfg = LoraTrainConfig()
modules = {s.task_id: train_lora(base, data[s.task_id]["train"], cfg, name=s.task_id, task_id=s.task_id)
           for s in suite.upstream}
print(f"base and {len(modules)} modules ready in {time.perf_counter() - t0:.1f}s")

task = suite.unseen[0]
print(f"\nunseen task {task.task_id}: mixture of {task.params['component_ids']}"
      f" with weights {np.round(task.params['weights'], 2).tolist()}")
d = data[task.task_id]
zero = evaluate(base, None, d["eval"])["accuracy"]
for seed in range(5):
    q = few_shot(d["train"], 5, seed, task.task_id)
    rep = adapt(base, modules, q, AdaptConfig(seed=seed), eval_batch=d["eval"], task_id=task.task_id)
    top = np.argsort(-np.abs(rep.best_weights.as_array()))[:3]
    picks = ", ".join(f"{rep.selected_module_names[i]}={rep.best_weights.values[i]:+.2f}" for i in top)
    print(f"seed {seed}: objective {rep.zero_shot_objective:.3f} -> {rep.best_objective:.3f}, "
          f"accuracy {zero:.3f} -> {rep.eval_metrics['accuracy']:.3f}   top weights: {picks}")
