"""
Layers and gradient checks
==========================

The layer library is small: conv, max-pool, dense, ELU, softmax, flatten and
a frequency mean. Every layer has a hand-written backward pass, checked
against central differences.
"""

import numpy as np

from tempoquery import nnet

rng = np.random.default_rng(0)

# the audio pathway for 168-frame excerpts: time is pooled down to 5 columns
g = nnet.audio_pathway(92, 168, rng)
print(g)

# forward returns the output and a tape; backward replays the tape
x = rng.standard_normal((2, 92, 168, 1))
y, tape = g.forward(x)
grads, dx = g.backward(tape, np.ones_like(y))
print("embedding", y.shape, "| input gradient", dx.shape)

# central differences on a random projection of the output, in float64
print("audio pathway max relative error: %.1e" % nnet.grad_check(g, x, n_samples=6))

# the check is sharp enough to catch a wrong rule
class HalfELU(nnet.ELU):
    def backward(self, dy, cache, need_dx=True):
        return 0.5 * dy * np.where(cache > 0, 1.0, cache + 1.0), {}

bad = nnet.Network([nnet.Dense(6, 8, rng), HalfELU(), nnet.Dense(8, 3, rng)], (6,))
print("broken ELU: %.1e" % nnet.grad_check(bad, rng.standard_normal((4, 6))))

# softmax stays finite for large logits
print(nnet.softmax([1000.0, 0.0]))
