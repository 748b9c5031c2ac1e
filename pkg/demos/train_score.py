"""
Learning a score network by denoising score matching
====================================================

Where no closed-form heat kernel exists, a network trained on simulated
Brownian paths stands in for it. This demo trains a small network on the
plane, where the true score (x - y) / t is known, so the fit can be judged
directly. The trained network then drives the diffusion-mean estimator
exactly as the analytic provider would.

Run with ``python3 demos/train_score.py`` (under a minute on one core).
"""

import numpy as np

from scoremeans.estimators import diffusion_mean
from scoremeans.manifold import get_manifold
from scoremeans.oracle import euclid_score
from scoremeans.sampler import SamplingConfig, build_dataset, sample_paths
from scoremeans.scorenet import NetProvider, TrainConfig, evaluate_dsm, train

r2 = get_manifold("r2")

# %%
# Chained batches: each batch of paths starts where the previous batch
# ended, so the network sees many starting points x0, not only the origin.
ds = build_dataset(r2, SamplingConfig(n_starts=1024, T=1.0, n_steps=100, n_batches=4), seed=2712)
print("training records:", len(ds))

# %%
# One epoch is one optimiser step on a random minibatch. The learning rate
# warms up linearly and then follows a cosine decay.
ck = train(ds, TrainConfig(epochs=3000, batch_size=256, hidden=(64, 64, 64), log_every=500),
           callback=lambda epoch, loss, running: print(f"epoch {epoch:5d}  loss {loss:9.3f}  running mean {running:9.3f}"))
net = NetProvider(ck)
print("final denoising loss on the training set:", evaluate_dsm(ck.params, ds))

# %%
# Compare with the analytic score on queries at typical Brownian distances
rng = np.random.default_rng(5)
t = rng.uniform(0.1, 1.0, 500)
y = rng.normal(size=(500, 2)) * np.sqrt(t)[:, None]
x0 = np.zeros((500, 2))
truth = euclid_score(x0, y, t)
rel = np.linalg.norm(net.score(x0, y, t) - truth, axis=1) / np.linalg.norm(truth, axis=1)
print(f"median relative error of the learned score: {np.median(rel):.3f}")

# %%
# Plug the network into the diffusion-mean estimator
X = sample_paths(r2, [0.0, 0.0], T=0.5, n_steps=100, n_paths=1000, seed=2712).endpoints
est = diffusion_mean(net, r2, X)
print(f"trained provider: |mu| = {np.linalg.norm(est.mu_rep):.4f}, t = {est.t:.4f}")
print(f"closed form     : |mu| = {np.linalg.norm(X.mean(0)):.4f}, t = {np.mean(np.sum((X - X.mean(0)) ** 2, 1)) / 2:.4f}")
