"""
Soft attention over frames
==========================

The attention network reads the raw excerpt and emits one softmax weight per
frame; each frame is then scaled by its weight.
"""

import numpy as np

from tempoquery import synthdata as sd
from tempoquery.attention import (apply_attention, attention_entropy, attention_forward,
                                  attention_pathway)

rng = np.random.default_rng(2)
h = attention_pathway(sd.N_BINS, 168, rng)

piece = sd.generate_piece(3, 200)
A = sd.render_audio_excerpt(piece, 90, 168).spectrogram

# the output layer starts at zero, so attention starts uniform
a = attention_forward(h, A)
print("sum %.6f, entropy %.3f nats (max ln 168 = %.3f)" % (a.sum(), attention_entropy(a), np.log(168)))

# one-hot attention keeps a single frame
one_hot = np.eye(168)[40]
kept = apply_attention(A, one_hot)
print("nonzero columns:", np.flatnonzero(kept.any(axis=0)))

# with random output weights the vector is peaked but still on the simplex
W = h.params["7.dense/W"]
W[...] = 0.1 * rng.standard_normal(W.shape)
h.touch()
a = attention_forward(h, A)
print("random h: entropy %.3f, min %.2e, sum %.6f" % (attention_entropy(a), a.min(), a.sum()))
