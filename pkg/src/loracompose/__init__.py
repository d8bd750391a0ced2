"""Few-shot composition of low-rank adapters with a gradient-free search.

The package trains small LoRA modules on synthetic upstream tasks, stores
them in an on-disk registry, and adapts to an unseen task by searching the
weights of an element-wise combination of the modules with CMA-ES.
"""
__version__ = "0.1.0"

from .cmaes import CmaesConfig, CmaesState, MinimizeResult, minimize
from .hub import Registry, load_module, prefilter, save_module
from .lora import ComposedModule, LoraFactors, LoraModule, WeightVector, compose, effective_delta, linear_delta
from .model import BaseModel, Batch, LoraTrainConfig, cross_entropy, evaluate, forward, lora_backward, train_lora
from .pipeline import AdaptConfig, AdaptReport, adapt, objective, run_experiment, usefulness
from .taskgen import Suite, TaskSpec, generate, make_suite

__all__ = [
    "AdaptConfig", "AdaptReport", "BaseModel", "Batch", "CmaesConfig", "CmaesState", "ComposedModule",
    "LoraFactors", "LoraModule", "LoraTrainConfig", "MinimizeResult", "Registry", "Suite", "TaskSpec",
    "WeightVector", "adapt", "compose", "cross_entropy", "effective_delta", "evaluate", "forward",
    "generate", "linear_delta", "load_module", "lora_backward", "make_suite", "minimize", "objective",
    "prefilter", "run_experiment", "save_module", "train_lora", "usefulness",
]
