"""
Canonical correlation layer and ranking loss
============================================

The two pathways meet in a CCA layer that keeps running covariance
statistics and re-solves its projections on every training batch.
"""

import numpy as np

from tempoquery import embed

rng = np.random.default_rng(1)

# two 8-d views sharing two latent directions (correlations 0.9 and 0.6)
n, d = 5000, 8
r = np.array([0.9, 0.6] + [0.0] * (d - 2))
zx = rng.standard_normal((n, d))
zy = r * zx + np.sqrt(1 - r ** 2) * rng.standard_normal((n, d))
X = zx @ rng.standard_normal((d, d))
Y = zy @ rng.standard_normal((d, d))

Ux, Uy, corr = embed.cca_closed_form(X, Y)
print("closed form:", np.round(corr, 3))

# the layer converges to the same answer from streamed batches
state = embed.CcaState(d)
for _ in range(5):
    for i in range(0, n, 250):
        embed.cca_layer_forward(state, X[i:i + 250], Y[i:i + 250], mode="train")
print("streamed:   ", np.round(embed.projected_correlations(X, Y, state.U_x, state.U_y), 3))

# ranking loss on cosine similarity, other batch items as negatives
Px, Py, _ = embed.cca_layer_forward(state, X[:32], Y[:32], mode="infer")
loss, (dX, dY) = embed.pairwise_ranking_loss(Px, Py)
print("ranking loss on a batch of 32: %.3f" % loss)
