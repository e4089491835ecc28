"""Soft input attention over spectrogram frames.

The attention network maps a raw spectrogram to one softmax weight per frame;
the spectrogram is then scaled column by column before it reaches the audio
encoder.
"""

import numpy as np

from . import nnet
from .errors import ShapeError


def attention_pathway(n_bins, n_frames, rng, channels=8):
    """[conv 3x3x8, maxpool (2,1), elu, conv 3x3x8, elu, mean over frequency,
    flatten, dense (8*T -> T), softmax].

    Pooling touches frequency only, so every frame keeps its own logit. The
    last dense layer starts at zero, i.e. attention starts out uniform.
    """
    layers = [
        nnet.Conv2D(1, channels, 3, rng), nnet.MaxPool((2, 1)), nnet.ELU(),
        nnet.Conv2D(channels, channels, 3, rng), nnet.ELU(),
        nnet.FreqMean(), nnet.Flatten(),
        nnet.Dense(channels * n_frames, n_frames, zero=True), nnet.Softmax(),
    ]
    return nnet.Network(layers, (n_bins, n_frames, 1), name="attention")


def _as_batch(A):
    A = np.asarray(A)
    single = A.ndim == 2
    return (A[None] if single else A), single


def attention_forward(h, A, return_tape=False):
    """Attention weights for a spectrogram ``(F, T)`` or a batch ``(N, F, T)``."""
    Ab, single = _as_batch(A)
    if Ab.ndim != 3 or Ab.shape[1:] != h.input_shape[:2]:
        raise ShapeError(f"attention network expects (F, T) = {h.input_shape[:2]}, got {A.shape}")
    a, tape = h.forward(Ab[..., None])
    a = a[0] if single else a
    return (a, tape) if return_tape else a


def apply_attention(A, a):
    """Scale column ``t`` of ``A`` by ``a[t]`` (batched over leading axes)."""
    A = np.asarray(A)
    a = np.asarray(a)
    if A.shape[-1] != a.shape[-1] or A.shape[:-2] != a.shape[:-1]:
        raise ShapeError(f"attention length {a.shape} does not match excerpt {A.shape}")
    return A * a[..., None, :]


def apply_attention_backward(A, a, d_out):
    """Gradients of ``apply_attention`` w.r.t. ``A`` and ``a``."""
    return d_out * a[..., None, :], (d_out * A).sum(axis=-2)


def attention_entropy(a):
    """Entropy in nats, with 0 * log 0 taken as 0. Works row-wise on batches."""
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return -terms.sum(axis=-1)
