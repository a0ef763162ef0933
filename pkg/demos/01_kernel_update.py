"""Walk through one prototypical kernel update on a synthetic image.

Run: python demos/01_kernel_update.py
"""

import numpy as np

from gfss.pkl import adaptation_learning_rate, assemble_pixel_features, prototypical_kernel_update, segment_scores
from gfss.synthgen import WorldSpec, make_world, sample_episode

# %% A world: one unit prototype per class, features = prototype + noise.
world = make_world(WorldSpec(noise_sigma=0.1))
print("classes:", world.n_classes, "channels:", world.spec.channels)
print("largest prototype cosine:", np.round((world.prototypes @ world.prototypes.T - np.eye(8)).max(), 3))

# %% One training-style image with two base objects on background.
ep = sample_episode(world, batch=1, classes_per_image=2, counter=0)
print("labels present:", np.unique(ep.label_truth))

# %% Kernels slightly off their prototypes, as if half trained.
rng = np.random.default_rng(0)
kernels = world.prototypes[:6] + 0.5 * rng.normal(size=(6, 16))

# Softmax scores over classes, then score-weighted sums of pixel features.
scores = segment_scores(kernels, ep.feats)
protos = assemble_pixel_features(scores, ep.feats)[0]
alpha = adaptation_learning_rate(kernels, protos)[0]
print("adaptation rates:", np.round(alpha, 2))

# %% The update pulls each kernel toward its assembled prototype.
# step_scale 1/C reads the squared error as a mean over channels.
updated = prototypical_kernel_update(kernels, protos, step_scale=1 / 16)


def cos_to_truth(k):
    k = k / np.linalg.norm(k, axis=1, keepdims=True)
    return np.round(np.sum(k * world.prototypes[:6], axis=1), 3)


print("cosine to true prototype before:", cos_to_truth(kernels))
print("cosine to true prototype after: ", cos_to_truth(updated))
