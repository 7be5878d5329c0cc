"""A look inside the three attention stages on a toy point group.

Each 3D point is seen in N frames; in each frame we cut a k x k patch of
2D features around its projection.  Patch attention collapses a patch to one
vector, instance attention pools the N frames, and inter-point attention
mixes neighbouring points using their 3D offsets as a key bias.
"""

import numpy as np

from hifanet.attention import (
    HiFANetConfig,
    ObservationTensor,
    hifanet_forward,
    init_params,
    interpoint_attention,
    patch_attention,
)

cfg = HiFANetConfig(m=4, n=3, k=5, d=8, d1=4, heads=2, d2=4, class_count=3,
                    ffn_width=16, prior_hidden=16, head_width=16)
params = init_params(cfg, seed=0)
rng = np.random.default_rng(0)

# one patch whose right half belongs to another surface
patch = np.zeros((5, 5, 8))
patch[:, :3] = rng.normal(1.0, 0.1, 8)
patch[:, 3:] = rng.normal(-1.0, 0.1, 8)
_, w = patch_attention(patch, params, cfg, return_weights=True)
print("patch attention weights, head 0 (rows of the 5x5 patch):")
print("(untrained, so which surface wins is arbitrary; the split by surface is not)")
print(np.round(w.data[0].reshape(5, 5), 3))

obs = ObservationTensor(
    features=rng.normal(size=(4, 3, 5, 5, 8)),
    coords=rng.uniform(-3, 3, size=(4, 3)),
    labels=np.zeros(4, dtype=np.uint16),
    frame_ids=np.arange(12, dtype=np.uint32).reshape(4, 3),
    patch_labels=np.zeros((4, 3, 5, 5), dtype=np.uint16),
)
logits = hifanet_forward(obs, params, cfg).data

# the frame order inside a bag carries no meaning
shuffled = ObservationTensor(obs.features[:, ::-1], obs.coords, obs.labels,
                             obs.frame_ids[:, ::-1], obs.patch_labels[:, ::-1])
print("\nlogit change after reversing frame order:",
      np.abs(hifanet_forward(shuffled, params, cfg).data - logits).max())

# only coordinate differences enter the structural prior
x = rng.normal(size=(4, 8))
a = interpoint_attention(x, obs.coords, params, cfg).data
b = interpoint_attention(x, obs.coords + [100.0, -40.0, 3.0], params, cfg).data
print("inter-point output change after moving the whole group 100 m:", np.abs(a - b).max())
