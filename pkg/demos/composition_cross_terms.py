"""Why composing factors is not the same as averaging updates.

Each module contributes a low-rank update A_i @ B_i. Composition sums the
A factors and the B factors separately, so the update of the composite
also contains the cross products A_i @ B_j. This script shows the size of
those cross terms for two random modules, and that the composite scales
quadratically with the weights.
"""
import numpy as np

from loracompose.lora import LoraModule, compose, effective_delta, linear_delta
from loracompose.tensor import make_rng

rng = make_rng(0)
shapes = {"fc1": (6, 4)}
mods = [
    LoraModule(f"m{i}", f"task{i}", 2,
               {n: (rng.standard_normal((d, 2)), rng.standard_normal((2, k))) for n, (d, k) in shapes.items()})
    for i in range(2)
]

w = np.array([0.8, -0.3])
composed = effective_delta(compose(mods, w), "fc1")
linear = linear_delta(mods, w, "fc1")
print("weights", w)
print("|composed update|           %.4f" % np.linalg.norm(composed))
print("|weighted sum of updates|   %.4f" % np.linalg.norm(linear))
print("|difference (cross terms)|  %.4f" % np.linalg.norm(composed - linear))

for c in (0.5, 1.0, 2.0):
    ratio = np.linalg.norm(effective_delta(compose(mods, c * w), "fc1")) / np.linalg.norm(composed)
    print(f"scale weights by {c}: update norm scales by {ratio:.3f} (c^2 = {c * c})")
