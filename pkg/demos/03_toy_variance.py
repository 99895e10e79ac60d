"""A tiny MC-dropout network that also predicts its own noise variance.

Trains on an image whose left half has flipped labels, then compares the
learned variance and the mutual information between the two halves.

Run:  python demos/03_toy_variance.py [seed]
"""
import sys

from lesionuq import mutual_information
from lesionuq.toynet import learned_variance_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
exp = learned_variance_experiment(seed=seed)

trace = exp.trace
print(f"trained {len(trace)} steps: loss {trace[0]:.4f} -> {trace[-1]:.4f}")
ds = exp.dataset
flips = (ds.labels != ds.truth)
print(f"label flips: noisy half {flips[ds.noisy].mean():.1%}, clean half {flips[~ds.noisy].mean():.1%}")

v_noisy, v_clean = exp.region_means(exp.stack.variances.mean(axis=0))
mi_noisy, mi_clean = exp.region_means(mutual_information(exp.stack).values)
print(f"mean learned variance   noisy {v_noisy:.4f}   clean {v_clean:.4f}")
print(f"mean mutual information noisy {mi_noisy:.4f}   clean {mi_clean:.4f}")

# A coarse picture of the learned variance, one character per pixel.
v = exp.stack.variances.mean(axis=0)[:, :, 0]
ramp = " .:-=+*#"
scale = v.max() or 1.0
print("\nlearned variance (left half is the noisy region):")
for y in range(v.shape[1]):
    print("".join(ramp[min(int(v[x, y] / scale * len(ramp)), len(ramp) - 1)] for x in range(v.shape[0])))
