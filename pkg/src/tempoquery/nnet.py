"""A small reverse-mode layer library.

Tensors are plain numpy arrays laid out batch-first and channels-last
(``N, H, W, C``). Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)``; a :class:`Network` chains them and
records the caches on a :class:`Tape` so that :func:`backward` can replay the
chain in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagicError,
    ShapeError,
    TapeError,
    TruncatedFileError,
    VersionError,
)

LAYER_KINDS = ("conv2d", "maxpool", "dense", "elu", "softmax", "flatten", "freqmean")


def glorot_uniform(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache, need_dx=True):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2D(Layer):
    """Stride-1 'same' convolution, weights stored as (C_in, k, k, C_out)."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, rng=None):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        rng = np.random.default_rng() if rng is None else rng
        k2 = kernel * kernel
        self.params["W"] = glorot_uniform(
            rng, (in_channels, kernel, kernel, out_channels),
            in_channels * k2, out_channels * k2,
        )
        self.params["b"] = np.zeros(out_channels)

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        return (h, w, self.out_channels)

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.kernel
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        # (n, h, w, c, k, k) view -> one (k, k, c) row per output pixel
        cols = (sliding_window_view(xp, (k, k), axis=(1, 2))
                .transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c))
        y = cols @ self._wmat(x.dtype)
        y += self.params["b"].astype(x.dtype, copy=False)
        return y.reshape(n, h, w, self.out_channels), (x.shape, cols)

    def backward(self, dy, cache, need_dx=True):
        (n, h, w, c), cols = cache
        k = self.kernel
        p = k // 2
        d2 = dy.reshape(-1, self.out_channels)
        grads = {
            "W": (cols.T @ d2).reshape(k, k, c, self.out_channels).transpose(2, 0, 1, 3),
            "b": d2.sum(axis=0),
        }
        if not need_dx:
            return None, grads
        # one small matmul per kernel tap beats materializing d(cols)
        W = self.params["W"].astype(dy.dtype, copy=False)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dy.dtype)
        for i, j in itertools.product(range(k), range(k)):
            dxp[:, i:i + h, j:j + w, :] += dy @ W[:, i, j, :].T
        return dxp[:, p:p + h, p:p + w, :], grads

    def _wmat(self, dtype):
        k = self.kernel
        return (self.params["W"].transpose(1, 2, 0, 3)
                .reshape(k * k * self.in_channels, self.out_channels).astype(dtype, copy=False))

    def __repr__(self):
        return f"Conv2D({self.in_channels}->{self.out_channels}, k={self.kernel})"


class MaxPool(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped. Ties go to the first element in row-major window
    order, so the subgradient is unique."""

    kind = "maxpool"

    def __init__(self, pool=(2, 2)):
        super().__init__()
        self.pool = tuple(pool)
        # routing freeze for finite differences: None, "record" or a stored mask
        self._routing = None

    def output_shape(self, in_shape):
        h, w, c = in_shape
        ph, pw = self.pool
        if h < ph or w < pw:
            raise ShapeError(f"maxpool {self.pool} does not fit input {in_shape}")
        return (h // ph, w // pw, c)

    def _windows(self, x):
        n, h, w, c = x.shape
        ph, pw = self.pool
        ho, wo = h // ph, w // pw
        return x[:, :ho * ph, :wo * pw, :].reshape(n, ho, ph, wo, pw, c)

    def forward(self, x):
        xr = self._windows(x)
        if isinstance(self._routing, np.ndarray):
            mask = self._routing
            if mask.shape != xr.shape:
                raise ShapeError("frozen max-pool routing was recorded for another input shape")
            return np.where(mask, xr, 0).sum(axis=(2, 4)), (x.shape, mask)
        ph, pw = self.pool
        offsets = list(itertools.product(range(ph), range(pw)))
        y = xr[:, :, 0, :, 0].copy()
        for i, j in offsets[1:]:
            np.maximum(y, xr[:, :, i, :, j], out=y)
        mask = np.empty(xr.shape, dtype=bool)
        taken = np.zeros(y.shape, dtype=bool)
        for i, j in offsets:
            m = xr[:, :, i, :, j] == y
            m &= ~taken
            taken |= m
            mask[:, :, i, :, j] = m
        if isinstance(self._routing, str):
            self._routing = mask
        return y, (x.shape, mask)

    def backward(self, dy, cache, need_dx=True):
        (n, h, w, c), mask = cache
        _, ho, ph, wo, pw, _ = mask.shape
        full = np.multiply(mask, dy[:, :, None, :, None, :], dtype=dy.dtype)
        full = full.reshape(n, ho * ph, wo * pw, c)
        if (ho * ph, wo * pw) == (h, w):
            return full, {}
        dx = np.zeros((n, h, w, c), dtype=dy.dtype)
        dx[:, :ho * ph, :wo * pw, :] = full
        return dx, {}

    def __repr__(self):
        return f"MaxPool{self.pool}"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, zero=False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero:
            self.params["W"] = np.zeros((in_features, out_features))
        else:
            rng = np.random.default_rng() if rng is None else rng
            self.params["W"] = glorot_uniform(
                rng, (in_features, out_features), in_features, out_features)
        self.params["b"] = np.zeros(out_features)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        W = self.params["W"].astype(x.dtype, copy=False)
        return x @ W + self.params["b"].astype(x.dtype, copy=False), x

    def backward(self, dy, cache, need_dx=True):
        x = cache
        W = self.params["W"].astype(dy.dtype, copy=False)
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return (dy @ W.T if need_dx else None), grads

    def __repr__(self):
        return f"Dense({self.in_features}->{self.out_features})"


class ELU(Layer):
    kind = "elu"

    def forward(self, x):
        y = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
        return y, y

    def backward(self, dy, cache, need_dx=True):
        y = cache
        return dy * np.where(y > 0, 1.0, y + 1.0), {}


def softmax(v, axis=-1):
    """Numerically stable softmax along ``axis``."""
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(float)
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x):
        y = softmax(x, axis=-1)
        return y, y

    def backward(self, dy, cache, need_dx=True):
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True):
        return dy.reshape(cache), {}


class FreqMean(Layer):
    """Average over the frequency (height) axis: (N, H, W, C) -> (N, W, C)."""

    kind = "freqmean"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (w, c)

    def forward(self, x):
        return x.mean(axis=1), x.shape[1]

    def backward(self, dy, cache, need_dx=True):
        h = cache
        return np.repeat(dy[:, None] / h, h, axis=1), {}


@dataclass
class Tape:
    """Activation record of one forward call."""

    token: int
    version: int
    in_shape: tuple
    out_shape: tuple
    caches: list = field(default_factory=list)


_tokens = itertools.count(1)


class Network:
    """Ordered stack of layers with a declared per-sample input shape.

    Parameters live inside the layers; :attr:`params` exposes them under
    names of the form ``"<index>.<kind>/<W|b>"`` without copying.
    """

    def __init__(self, layers, input_shape, name=""):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.token = next(_tokens)
        self.version = 0
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        self.output_shape = shape

    @property
    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.params.items():
                out[f"{i}.{layer.kind}/{pname}"] = arr
        return out

    def n_params(self):
        return sum(a.size for a in self.params.values())

    def set_params(self, values):
        """Overwrite parameters in place from a ``{name: array}`` mapping."""
        params = self.params
        for name, v in values.items():
            if name not in params:
                raise KeyError(f"{self.name or 'network'} has no parameter {name!r}")
            v = np.asarray(v, dtype=float)
            if v.shape != params[name].shape:
                raise ShapeError(f"{name}: expected {params[name].shape}, got {v.shape}")
            params[name][...] = v
        self.touch()

    def touch(self):
        """Mark parameters as changed; outstanding tapes become stale."""
        self.version += 1

    def forward(self, x):
        x = np.asarray(x)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"{self.name or 'network'} expects (N, {', '.join(map(str, self.input_shape))}),"
                f" got {x.shape}")
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(float)
        tape = Tape(self.token, self.version, x.shape, (), [])
        for layer in self.layers:
            x, cache = layer.forward(x)
            tape.caches.append(cache)
        tape.out_shape = x.shape
        return x, tape

    def backward(self, tape, dy, need_input_grad=True):
        """Gradients of the scalar whose gradient at the output is ``dy``.

        Returns ``(grads, dx)``; ``dx`` is None when ``need_input_grad`` is
        false, which saves the first layer's input-gradient work.
        """
        if tape.token != self.token:
            raise TapeError("tape was recorded on a different network")
        if tape.version != self.version:
            raise TapeError("parameters changed since the tape was recorded")
        dy = np.asarray(dy)
        if dy.shape != tape.out_shape:
            raise ShapeError(f"upstream gradient shape {dy.shape} != output {tape.out_shape}")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dy, g = layer.backward(dy, tape.caches[i], need_dx=need_input_grad or i > 0)
            for pname, arr in g.items():
                grads[f"{i}.{layer.kind}/{pname}"] = arr
        return grads, dy

    def __call__(self, x):
        return self.forward(x)[0]

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network({self.name!r}, in={self.input_shape}, [{body}])"


def forward(net, x):
    return net.forward(x)


def backward(net, tape, dy, need_input_grad=True):
    return net.backward(tape, dy, need_input_grad)


# --------------------------------------------------------------------------
# gradient verification


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f, arr, index, step=1e-5):
    """d f / d arr[index] by central differences, perturbing ``arr`` in place."""
    old = arr[index]
    arr[index] = old + step
    fp = f()
    arr[index] = old - step
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * step)


def sample_indices(rng, shape, n):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


@contextlib.contextmanager
def frozen_routing(*nets):
    """Pin every max-pool of ``nets`` to the winners of its next forward call.

    Max pooling is only piecewise smooth: a central difference whose stencil
    straddles a switch of the winning element measures a blend of two
    pieces. Inside this context the first forward records the winners and
    later calls reuse them, so differences are taken on the same smooth
    piece the analytic gradient belongs to.
    """
    pools = [layer for net in nets for layer in net.layers if isinstance(layer, MaxPool)]
    for layer in pools:
        layer._routing = "record"
    try:
        yield
    finally:
        for layer in pools:
            layer._routing = None


GRAD_FLOOR = 1e-6


def probe_error(f, arr, index, analytic, step=1e-5, floor=GRAD_FLOOR):
    """Relative error of ``analytic`` against a central difference of ``f``.

    Round-off in ``f`` leaves the difference with an absolute error near
    ``1e-16 * |f| / step``; ``floor`` keeps that noise from being divided
    by a vanishing gradient.
    """
    return float(relative_error(analytic, central_difference(f, arr, index, step), floor))


def grad_check(net, x, seed=0, step=1e-5, n_samples=12, return_details=False):
    """Largest relative error between analytic and central-difference gradients.

    The scalar being differentiated is ``sum(r * net(x))`` for a random
    projection ``r``. Up to ``n_samples`` coordinates of every parameter
    tensor and of the input are probed, with max-pool routing frozen at
    ``x`` (see :func:`frozen_routing`).
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    y, tape = net.forward(x)
    r = rng.standard_normal(y.shape)
    grads, dx = net.backward(tape, r)

    def loss():
        return float(np.sum(r * net.forward(x)[0]))

    details = {}
    targets = list(net.params.items()) + [("input", x)]
    analytic = dict(grads, input=dx)
    with frozen_routing(net):
        loss()
        for name, arr in targets:
            errs = []
            for idx in sample_indices(rng, arr.shape, n_samples):
                errs.append(probe_error(loss, arr, idx, analytic[name][idx], step))
            details[name] = max(errs)
    worst = max(details.values())
    return (worst, details) if return_details else worst


# --------------------------------------------------------------------------
# concrete pathways


def conv_pathway(input_shape, rng, embed_dim=32, name=""):
    """[conv 3x3x16, elu, pool 2, conv 3x3x32, elu, pool 2, extra time pools,
    flatten, dense 64, elu, dense embed_dim].

    ELU is monotone, so each pool is placed before its ELU: same function,
    a quarter of the elementwise work. Extra (1, 2) pools over the width
    (time) axis are appended until it is at most 6, which only triggers for
    spectrogram inputs.
    """
    h, w, c = input_shape
    layers = [
        Conv2D(c, 16, 3, rng), MaxPool((2, 2)), ELU(),
        Conv2D(16, 32, 3, rng), MaxPool((2, 2)), ELU(),
    ]
    h, w = h // 4, w // 4
    while w > 6:
        layers.append(MaxPool((1, 2)))
        w //= 2
    layers.append(Flatten())
    flat = h * w * 32
    layers += [Dense(flat, 64, rng), ELU(), Dense(64, embed_dim, rng)]
    return Network(layers, input_shape, name=name)


def sheet_pathway(rng, embed_dim=32):
    return conv_pathway((80, 100, 1), rng, embed_dim, name="sheet")


def audio_pathway(n_bins, n_frames, rng, embed_dim=32):
    return conv_pathway((n_bins, n_frames, 1), rng, embed_dim, name="audio")


# --------------------------------------------------------------------------
# CMP1 checkpoints

CHECKPOINT_MAGIC = b"CMP1"
CHECKPOINT_VERSION = 1
_COUNT_ENTRY = "meta/entry_count"


def save_params(path, entries):
    """Write ``{name: array}`` as a CMP1 file (little-endian float64 payloads).

    A leading ``meta/entry_count`` entry lets the reader detect truncation at
    an entry boundary.
    """
    entries = dict(entries)
    entries.pop(_COUNT_ENTRY, None)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    items = [(_COUNT_ENTRY, np.array([len(entries) + 1], dtype=float))] + list(entries.items())
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _take(buf, pos, n):
    if pos + n > len(buf):
        raise TruncatedFileError(f"checkpoint truncated at byte {len(buf)} (needed {pos + n})")
    return buf[pos:pos + n], pos + n


def load_params(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a CMP1 checkpoint")
    raw, pos = _take(buf, 4, 4)
    (version,) = struct.unpack("<I", raw)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    while pos < len(buf):
        raw, pos = _take(buf, pos, 4)
        (nlen,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, nlen)
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 4)
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, 4 * rank)
        shape = struct.unpack(f"<{rank}I", raw)
        raw, pos = _take(buf, pos, 8 * int(np.prod(shape, dtype=np.int64)))
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    count = out.pop(_COUNT_ENTRY, None)
    if count is None or int(count[0]) != len(out) + 1:
        raise TruncatedFileError(f"{path}: checkpoint is missing entries")
    return out
