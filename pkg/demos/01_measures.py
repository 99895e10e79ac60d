"""How the four uncertainty measures react to different sample stacks.

Run:  python demos/01_measures.py
"""
import numpy as np

from lesionuq import SampleStack, uncertainty_maps

# Four voxels side by side, T = 6 Monte Carlo samples each.
#   0: confident and consistent
#   1: unsure but consistent (every sample says 0.5)
#   2: confident samples that disagree (half 0.05, half 0.95)
#   3: mildly spread around 0.7
samples = np.array([
    [0.98, 0.50, 0.05, 0.62],
    [0.97, 0.50, 0.95, 0.75],
    [0.99, 0.50, 0.05, 0.70],
    [0.98, 0.50, 0.95, 0.66],
    [0.97, 0.50, 0.05, 0.78],
    [0.99, 0.50, 0.95, 0.71],
])
preds = samples.reshape(6, 4, 1, 1)

# Learned noise variances: high only where the data itself is ambiguous.
variances = np.broadcast_to(np.array([0.01, 0.8, 0.05, 0.1]).reshape(1, 4, 1, 1), preds.shape)

maps = uncertainty_maps(SampleStack(preds, variances)).as_dict()

print(f"{'voxel':<28}" + "".join(f"{m:>11}" for m in maps))
labels = ["confident", "unsure, consistent", "confident, disagreeing", "mild spread"]
for i, name in enumerate(labels):
    print(f"{name:<28}" + "".join(f"{maps[m].values[i, 0, 0]:11.4f}" for m in maps))

# Entropy is high for voxels 1 and 2 alike.  Only mutual information and
# the sample variance separate "every sample unsure" from "samples
# disagree", and only the learned variance flags voxel 1.
