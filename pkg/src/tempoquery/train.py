"""Model variants, training loop and checkpoints.

Three variants are trained the same way:

* ``BL``        -- no attention, 84-frame excerpts
* ``BL_AT``     -- attention, 84-frame excerpts
* ``BL_AT_LC``  -- attention, 168-frame excerpts
"""

from __future__ import annotations

import ctypes
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nnet
from .attention import apply_attention, attention_pathway
from .embed import CcaState, RankingLossConfig, cca_layer_backward, cca_layer_forward, \
    pairwise_ranking_loss
from .errors import ConfigError, FormatError, NumericalError, TrainingDiverged, VariantError
from .retrieval import MetricsReport, true_ranks
from .synthdata import N_BINS

log = logging.getLogger(__name__)

# activations run in float32; parameters and optimizer state stay float64
COMPUTE_DTYPE = np.float32
VALID_POOL = 500
# Per-network learning-rate multipliers. The attention logits come from a
# dense layer with 8*T inputs; at the full rate its softmax collapses onto a
# single frame within the first epoch.
LR_SCALE = {"attention": 0.1}


@dataclass(frozen=True)
class ModelVariant:
    tag: str
    t_frames: int
    attention_enabled: bool

    def __post_init__(self):
        expected = VARIANT_SPECS.get(self.tag)
        if expected is None:
            raise VariantError(f"unknown variant {self.tag!r}; choose from {sorted(VARIANT_SPECS)}")
        if (self.t_frames, self.attention_enabled) != expected:
            raise VariantError(f"{self.tag} requires t_frames={expected[0]}, attention={expected[1]}")


VARIANT_SPECS = {"BL": (84, False), "BL_AT": (84, True), "BL_AT_LC": (168, True)}
VARIANT_TAGS = tuple(VARIANT_SPECS)


def variant(tag):
    tag = tag.replace("+", "_").replace(" ", "").upper()
    if tag not in VARIANT_SPECS:
        raise VariantError(f"unknown variant {tag!r}; choose from {sorted(VARIANT_SPECS)}")
    t, att = VARIANT_SPECS[tag]
    return ModelVariant(tag, t, att)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "BL"
    t_frames: int = 84
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 150
    seed: int = 0
    margin: float = 0.7
    cca_eps: float = 1e-3
    cca_rho: float = 0.9
    patience: int = 10

    def __post_init__(self):
        for k in ("lr", "batch_size", "margin", "cca_eps", "patience"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if self.epochs < 0 or self.seed < 0:
            raise ConfigError("epochs and seed must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not 0 <= self.cca_rho < 1:
            raise ConfigError("cca_rho must lie in [0, 1)")
        try:
            v = variant(self.variant)
        except VariantError as e:
            raise ConfigError(str(e)) from None
        if v.t_frames != self.t_frames:
            raise ConfigError(f"variant {v.tag} needs t_frames={v.t_frames}, config says {self.t_frames}")

    @property
    def model_variant(self):
        return variant(self.variant)


CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))


def parse_config(text):
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in CONFIG_KEYS:
            raise ConfigError(f"line {ln}: unknown key {k!r}")
        values[k] = v
    missing = set(CONFIG_KEYS) - set(values)
    if missing:
        raise ConfigError(f"missing keys: {', '.join(sorted(missing))}")
    types = {f.name: f.type for f in fields(TrainConfig)}
    conv = {"str": str, "int": int, "float": float}
    try:
        return TrainConfig(**{k: conv[types[k]](v) for k, v in values.items()})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def format_config(cfg):
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())


def read_config(path):
    return parse_config(Path(path).read_text())


def write_config(cfg, path):
    Path(path).write_text(format_config(cfg))


@dataclass
class TrainedModel:
    """Both pathways, the optional attention network and the CCA layer."""

    variant: ModelVariant
    sheet: nnet.Network
    audio: nnet.Network
    attention: nnet.Network | None
    cca: CcaState
    norm: tuple = (0.0, 1.0)
    n_bins: int = N_BINS
    config: TrainConfig | None = None
    history: list = field(default_factory=list)

    @classmethod
    def initialize(cls, v, seed=0, n_bins=N_BINS, cca_eps=1e-3, cca_rho=0.9, config=None):
        rng = np.random.default_rng(seed)
        sheet = nnet.sheet_pathway(rng)
        audio = nnet.audio_pathway(n_bins, v.t_frames, rng)
        att = attention_pathway(n_bins, v.t_frames, rng) if v.attention_enabled else None
        return cls(v, sheet, audio, att, CcaState(eps=cca_eps, rho=cca_rho),
                   n_bins=n_bins, config=config)

    def networks(self):
        nets = {"sheet": self.sheet, "audio": self.audio}
        if self.attention is not None:
            nets["attention"] = self.attention
        return nets

    # -- inference ---------------------------------------------------------

    def normalize(self, specs, dtype=COMPUTE_DTYPE):
        mean, std = self.norm
        return ((np.asarray(specs, dtype=dtype) - mean) / std).astype(dtype)

    def _check_specs(self, specs):
        specs = np.asarray(specs)
        if specs.ndim == 2:
            specs = specs[None]
        if specs.shape[1:] != (self.n_bins, self.variant.t_frames):
            raise VariantError(f"{self.variant.tag} expects excerpts of shape "
                               f"{(self.n_bins, self.variant.t_frames)}, got {specs.shape[1:]}")
        return specs

    def attend(self, specs, batch=64):
        """Attention vectors for raw spectrograms ``(N, F, T)``."""
        if self.attention is None:
            raise VariantError(f"variant {self.variant.tag} has no attention pathway")
        specs = self._check_specs(specs)
        out = [self.attention(self.normalize(specs[i:i + batch])[..., None])
               for i in range(0, len(specs), batch)]
        return np.concatenate(out).astype(np.float64)

    def _audio_input(self, A, a):
        # gain T: uniform attention hands the encoder the unweighted input
        return (apply_attention(A, a.astype(A.dtype)) * A.shape[-1])[..., None]

    def encode_audio(self, specs, batch=64):
        """Audio pathway output before the CCA projection."""
        specs = self._check_specs(specs)
        out = []
        for i in range(0, len(specs), batch):
            A = self.normalize(specs[i:i + batch])
            if self.attention is not None:
                a = self.attention(A[..., None])
                out.append(self.audio(self._audio_input(A, a)))
            else:
                out.append(self.audio(A[..., None]))
        return np.concatenate(out).astype(np.float64)

    def encode_sheet(self, scores, batch=64):
        scores = np.asarray(scores, dtype=COMPUTE_DTYPE)
        if scores.ndim == 2:
            scores = scores[None]
        out = [self.sheet(scores[i:i + batch, ..., None]) for i in range(0, len(scores), batch)]
        return np.concatenate(out).astype(np.float64)

    def embed_sheet(self, scores):
        return self.encode_sheet(scores) @ self.cca.U_x

    def embed_audio(self, specs):
        return self.encode_audio(specs) @ self.cca.U_y

    # -- (de)serialization -------------------------------------------------

    def to_entries(self):
        e = {}
        for prefix, net in self.networks().items():
            for k, arr in net.params.items():
                e[f"{prefix}/{k}"] = arr
        e.update(self.cca.to_entries())
        e["meta/variant"] = np.array([VARIANT_TAGS.index(self.variant.tag)], dtype=float)
        e["meta/t_frames"] = np.array([self.variant.t_frames], dtype=float)
        e["meta/n_bins"] = np.array([self.n_bins], dtype=float)
        e["meta/norm"] = np.array(self.norm, dtype=float)
        if self.config is not None:
            cfg = asdict(self.config)
            cfg["variant"] = VARIANT_TAGS.index(cfg["variant"])
            for k, v in cfg.items():
                e[f"config/{k}"] = np.array([v], dtype=float)
        if self.history:
            for k in self.history[0]:
                e[f"history/{k}"] = np.array([h[k] for h in self.history], dtype=float)
        return e

    @classmethod
    def from_entries(cls, e):
        try:
            tag = VARIANT_TAGS[int(e["meta/variant"][0])]
            v = variant(tag)
            if int(e["meta/t_frames"][0]) != v.t_frames:
                raise FormatError("checkpoint t_frames disagrees with its variant")
            n_bins = int(e["meta/n_bins"][0])
            model = cls.initialize(v, 0, n_bins)
            for prefix, net in model.networks().items():
                net.set_params({k: e[f"{prefix}/{k}"] for k in net.params})
            model.cca = CcaState.from_entries(e)
            model.norm = tuple(float(x) for x in e["meta/norm"])
            if "config/seed" in e:
                raw = {k: e[f"config/{k}"][0] for k in CONFIG_KEYS}
                raw["variant"] = VARIANT_TAGS[int(raw["variant"])]
                model.config = TrainConfig(**{
                    f.name: {"str": str, "int": int, "float": float}[f.type](raw[f.name])
                    for f in fields(TrainConfig)})
            keys = [k[len("history/"):] for k in e if k.startswith("history/")]
            if keys:
                cols = {k: e[f"history/{k}"] for k in keys}
                model.history = [
                    {k: (int(cols[k][i]) if k == "epoch" else float(cols[k][i])) for k in keys}
                    for i in range(len(cols[keys[0]]))]
        except (KeyError, IndexError, ValueError) as err:
            raise FormatError(f"incomplete or inconsistent checkpoint: {err}") from None
        return model


def save_model(model, path):
    nnet.save_params(path, model.to_entries())


def load_model(path):
    return TrainedModel.from_entries(nnet.load_params(path))


# --------------------------------------------------------------------------
# training


def _keep_heap_memory():
    """Stop glibc from handing large activation buffers back to the OS after
    every step; re-faulting those pages dominated step time. No-op elsewhere."""
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)          # M_MMAP_MAX
        libc.mallopt(-1, 1 << 30)    # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _snapshot(model):
    return ({p: {k: a.copy() for k, a in net.params.items()} for p, net in model.networks().items()},
            model.cca.copy())


def _restore(model, snap):
    params, cca = snap
    for p, net in model.networks().items():
        net.set_params(params[p])
    model.cca = cca.copy()


def validation_mrr(model, scores, specs):
    X = model.embed_sheet(scores)
    Y = model.embed_audio(specs)
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-300)
    Yn = Y / np.maximum(np.linalg.norm(Y, axis=1, keepdims=True), 1e-300)
    S = (Yn @ Xn.T).astype(np.float32)
    ids = np.arange(len(X))
    return MetricsReport.from_ranks(true_ranks(S, ids, ids), len(X)).mrr


def train_step(model, scores, specs, loss_cfg, dtype=COMPUTE_DTYPE, cca_mode="train",
               need_spec_grad=False):
    """One forward/backward pass through the whole graph.

    Returns ``(loss, grads)`` with ``grads`` keyed by network name; with
    ``need_spec_grad`` the gradient w.r.t. the normalized spectrogram batch
    is added under ``"input"``. ``cca_mode="infer"`` keeps the CCA state
    untouched, which gradient checks rely on.
    """
    xs = np.asarray(scores, dtype=dtype)[..., None]
    A = model.normalize(specs, dtype)
    X, tape_s = model.sheet.forward(xs)
    att = model.attention is not None
    if att:
        a, tape_h = model.attention.forward(A[..., None])
        Y, tape_g = model.audio.forward(model._audio_input(A, a))
    else:
        Y, tape_g = model.audio.forward(A[..., None])
    Px, Py, _ = cca_layer_forward(model.cca, X, Y, cca_mode)
    loss, (dPx, dPy) = pairwise_ranking_loss(Px, Py, loss_cfg)
    dX, dY = cca_layer_backward(model.cca, dPx.astype(dtype), dPy.astype(dtype))
    grads = {"sheet": model.sheet.backward(tape_s, dX, False)[0]}
    grads["audio"], dW = model.audio.backward(tape_g, dY, att or need_spec_grad)
    if att:
        T = A.shape[-1]
        dW = dW[..., 0] * T
        da = (dW * A).sum(axis=1)
        grads["attention"], dA_h = model.attention.backward(tape_h, da, need_spec_grad)
        if need_spec_grad:
            grads["input"] = dW * a[:, None, :] + dA_h[..., 0]
    elif need_spec_grad:
        grads["input"] = dW[..., 0]
    return loss, grads


def _sgd_update(model, grads, velocity, lr, momentum=0.9):
    for p, net in model.networks().items():
        params = net.params
        step = lr * LR_SCALE.get(p, 1.0)
        for k, g in grads[p].items():
            v = velocity.setdefault((p, k), np.zeros_like(params[k]))
            v *= momentum
            v -= step * g
            params[k] += v
        net.touch()


def train(cfg, variant_, ds, log_every=1):
    """Train one variant on the train split, selecting by validation MRR.

    ``variant_`` may be a :class:`ModelVariant` or a tag string. The returned
    model carries the parameters and CCA statistics of the best epoch.
    """
    _keep_heap_memory()
    v = variant(variant_) if isinstance(variant_, str) else variant_
    if v.tag != cfg.variant:
        cfg = replace(cfg, variant=v.tag, t_frames=v.t_frames)
    if ds.n_frames != v.t_frames:
        raise ConfigError(f"variant {v.tag} needs {v.t_frames}-frame excerpts, "
                          f"dataset has {ds.n_frames}")
    tr = np.flatnonzero(ds.split_mask("train"))
    va = np.flatnonzero(ds.split_mask("valid"))
    if len(tr) < 2 or len(va) < 1:
        raise ConfigError("train and valid splits must be nonempty")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = TrainedModel.initialize(v, int(seeds[0].generate_state(1)[0]), ds.n_bins,
                                    cfg.cca_eps, cfg.cca_rho, cfg)
    train_specs = ds.spectrograms[tr]
    model.norm = (float(train_specs.mean(dtype=np.float64)),
                  float(train_specs.std(dtype=np.float64)) or 1.0)
    del train_specs
    if cfg.epochs == 0:
        return model

    va = np.sort(np.random.default_rng(seeds[1]).permutation(va)[:VALID_POOL])
    va_scores, va_specs = ds.scores[va], ds.spectrograms[va]
    loss_cfg = RankingLossConfig(cfg.margin)
    order_rng = np.random.default_rng(seeds[2])

    best_mrr = validation_mrr(model, va_scores, va_specs)
    best = _snapshot(model)
    model.history.append({"epoch": 0, "train_loss": float("nan"), "valid_mrr": best_mrr,
                          "best_mrr": best_mrr, "lr": cfg.lr})
    lr = cfg.lr
    since_best = 0
    halvings = 0
    velocity = {}
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(tr)
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[i:i + cfg.batch_size])
            if len(idx) < 2:
                continue
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = train_step(model, ds.scores[idx], ds.spectrograms[idx], loss_cfg)
            except NumericalError as e:
                loss, reason = np.nan, str(e)
            else:
                reason = "non-finite loss"
            if not np.isfinite(loss):
                _restore(model, best)
                raise TrainingDiverged(f"{reason} in epoch {epoch}", last_good=model)
            _sgd_update(model, grads, velocity, lr)
            losses.append(loss)
        mrr_now = validation_mrr(model, va_scores, va_specs)
        if mrr_now > best_mrr:
            best_mrr, best, since_best, halvings = mrr_now, _snapshot(model), 0, 0
        else:
            since_best += 1
        model.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                              "valid_mrr": mrr_now, "best_mrr": best_mrr, "lr": lr})
        if epoch % log_every == 0:
            log.info("%s epoch %d loss %.4f valid MRR %.2f (best %.2f) lr %.4g",
                     v.tag, epoch, np.mean(losses), mrr_now, best_mrr, lr)
        if since_best >= cfg.patience:
            halvings += 1
            if halvings > 2:
                log.info("%s: no improvement after %d halvings, stopping", v.tag, halvings - 1)
                break
            lr /= 2
            since_best = 0
    _restore(model, best)
    return model
