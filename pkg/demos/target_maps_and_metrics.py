"""
Target maps and scoring
=======================

Rasterize a few nuclei into one patch, look at the horizontal/vertical maps,
then score a perturbed prediction against the original.
"""

# %%
import numpy as np

from stpseudo.ingest import CellRecord
from stpseudo.metrics import Evaluator
from stpseudo.synthetic import ellipse
from stpseudo.tiling import TYPE_CLASSES, PatchSpec, rasterize

cells = [
    CellRecord.from_polygon("a", ellipse(10, 10, 6, 4, 16)),
    CellRecord.from_polygon("b", ellipse(28, 12, 4, 7, 16, 0.4)),
    CellRecord.from_polygon("c", ellipse(18, 28, 5, 5, 16)),
]
maps = rasterize(PatchSpec(0, 0, 0, 40, 40), list(zip(cells, ["Neoplastic", "Inflammatory", "Unknown"])))

# %%
# Each instance's horizontal values run from -1 at its left edge to +1 at its right edge.
a = maps.instance_map == maps.instance_map[10, 10]
row = maps.hv[10][a[10], 0]
print(np.round(row, 2))

# %%
# The Unknown nucleus is kept in the instance map but masked out of the type loss.
print("ignored pixels:", int(maps.ignore.sum()), "of", int((maps.instance_map == maps.instance_map[28, 18]).sum()))

# %%
# Score a prediction that drops nucleus ``b`` and swaps the type of ``a``.
pred = maps.instance_map.copy()
pred[pred == maps.instance_map[12, 28]] = 0
labels = {i: lab for i, _, lab in maps.instances}
pred_labels = dict(labels)
pred_labels[int(maps.instance_map[10, 10])] = "Connective"
ev = Evaluator(TYPE_CLASSES[1:])
ev.add(maps.instance_map, pred, labels, pred_labels)
for key, value in ev.report().to_dict().items():
    print(key, value)
