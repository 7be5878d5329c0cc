"""Accuracy as the calibration error grows.

One model is trained on noise-free projections, then tested on the same
held-out points re-projected through increasingly wrong cameras.  A sweep
level sigma means sigma metres of translation error and 10*sigma degrees
of rotation error.  The single-pixel vote degrades fastest because one
misplaced pixel decides its answer.
"""

from hifanet import experiments as ex

rows = ex.noise_sweep(1, noise_max=0.3, steps=4)

methods = list(dict.fromkeys(r.method for r in rows))
sigmas = sorted({r.sigma for r in rows})
print(f"{'sigma':>6} " + " ".join(f"{m:>18}" for m in methods))
for s in sigmas:
    acc = {r.method: r.avg_accuracy for r in rows if r.sigma == s}
    print(f"{s:6.2f} " + " ".join(f"{acc[m]:18.3f}" for m in methods))
