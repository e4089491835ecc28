"""CCA embedding layer, cosine similarity and the pairwise ranking loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVectorError, InvalidArgument, NumericalError, ShapeError

EMBED_DIM = 32


def _inv_sqrt(C, name):
    C = (C + C.T) / 2
    if not np.all(np.isfinite(C)):
        raise NumericalError(f"{name} has non-finite entries")
    evals, evecs = np.linalg.eigh(C)
    lo, hi = evals[0], evals[-1]
    if lo <= 1e-12 * max(hi, 1.0):
        raise NumericalError(
            f"{name} is not positive definite after regularization "
            f"(eigenvalues in [{lo:.3e}, {hi:.3e}], condition {hi / max(lo, 1e-300):.3e})")
    return (evecs / np.sqrt(evals)) @ evecs.T


def cca_from_covariances(Sxx, Syy, Sxy, eps):
    """Canonical projections from (unregularized) covariance blocks.

    Returns ``(Ux, Uy, corr)`` where column ``k`` of ``Ux``/``Uy`` is the
    k-th canonical direction of each view and ``corr`` is sorted descending.
    """
    d = Sxx.shape[0]
    Kx = _inv_sqrt(Sxx + eps * np.eye(d), "Sigma_xx")
    Ky = _inv_sqrt(Syy + eps * np.eye(Syy.shape[0]), "Sigma_yy")
    T = Kx @ Sxy @ Ky
    U, s, Vt = np.linalg.svd(T)
    k = min(Sxx.shape[0], Syy.shape[0])
    Ux = Kx @ U[:, :k]
    Uy = Ky @ Vt[:k].T
    return Ux, Uy, np.clip(s[:k], 0.0, 1.0)


def covariances(X, Y):
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    n = len(X)
    return mx, my, Xc.T @ Xc / (n - 1), Yc.T @ Yc / (n - 1), Xc.T @ Yc / (n - 1)


def cca_closed_form(X, Y, eps=1e-3):
    """Classical regularized CCA of two sample matrices (rows are samples)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ShapeError(f"views must be n x d with equal n, got {X.shape} and {Y.shape}")
    n, d = X.shape
    if n <= max(d, Y.shape[1]):
        raise InvalidArgument(f"need more samples than dimensions (n={n}, d={d})")
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    _, _, Sxx, Syy, Sxy = covariances(X, Y)
    return cca_from_covariances(Sxx, Syy, Sxy, eps)


def projected_correlations(X, Y, Ux, Uy):
    """Per-component Pearson correlation of ``X @ Ux`` with ``Y @ Uy``."""
    P, Q = X @ Ux, Y @ Uy
    P = P - P.mean(axis=0)
    Q = Q - Q.mean(axis=0)
    return (P * Q).sum(axis=0) / np.sqrt((P * P).sum(axis=0) * (Q * Q).sum(axis=0))


@dataclass
class CcaState:
    """Running statistics and current projections of the CCA layer."""

    dim: int = EMBED_DIM
    eps: float = 1e-3
    rho: float = 0.9
    mu_x: np.ndarray = None
    mu_y: np.ndarray = None
    sigma_xx: np.ndarray = None
    sigma_yy: np.ndarray = None
    sigma_xy: np.ndarray = None
    U_x: np.ndarray = None
    U_y: np.ndarray = None
    corr: np.ndarray = None
    n_updates: int = 0

    def __post_init__(self):
        d = self.dim
        for name, init in (("mu_x", np.zeros(d)), ("mu_y", np.zeros(d)),
                           ("sigma_xx", np.eye(d)), ("sigma_yy", np.eye(d)),
                           ("sigma_xy", np.zeros((d, d))), ("U_x", np.eye(d)),
                           ("U_y", np.eye(d)), ("corr", np.zeros(d))):
            if getattr(self, name) is None:
                setattr(self, name, init)

    def copy(self):
        return CcaState(self.dim, self.eps, self.rho,
                        *(getattr(self, k).copy() for k in
                          ("mu_x", "mu_y", "sigma_xx", "sigma_yy", "sigma_xy", "U_x", "U_y", "corr")),
                        self.n_updates)

    def to_entries(self, prefix="cca/"):
        out = {prefix + k: np.asarray(getattr(self, k), dtype=float) for k in
               ("mu_x", "mu_y", "sigma_xx", "sigma_yy", "sigma_xy", "U_x", "U_y", "corr")}
        out[prefix + "eps"] = np.array([self.eps])
        out[prefix + "rho"] = np.array([self.rho])
        out[prefix + "n_updates"] = np.array([self.n_updates], dtype=float)
        return out

    @classmethod
    def from_entries(cls, entries, prefix="cca/"):
        g = lambda k: np.array(entries[prefix + k], dtype=float)  # noqa: E731
        return cls(int(g("mu_x").shape[0]), float(g("eps")[0]), float(g("rho")[0]),
                   g("mu_x"), g("mu_y"), g("sigma_xx"), g("sigma_yy"), g("sigma_xy"),
                   g("U_x"), g("U_y"), g("corr"), int(g("n_updates")[0]))


def cca_layer_forward(state, Xb, Yb, mode="infer"):
    """Project a batch of activations through the CCA layer.

    In ``train`` mode the running statistics move towards the batch
    statistics with momentum ``rho`` (the very first batch initializes them),
    and the projections are re-solved before projecting. ``infer`` mode only
    applies the current projections. Returns ``(Xb @ U_x, Yb @ U_y, state)``.
    """
    Xb = np.asarray(Xb)
    Yb = np.asarray(Yb)
    if mode == "train":
        if len(Xb) < 2 or len(Yb) != len(Xb):
            raise InvalidArgument("train mode needs matched batches of at least 2 items")
        mx, my, Sxx, Syy, Sxy = covariances(Xb.astype(np.float64), Yb.astype(np.float64))
        r = 0.0 if state.n_updates == 0 else state.rho
        state.mu_x = r * state.mu_x + (1 - r) * mx
        state.mu_y = r * state.mu_y + (1 - r) * my
        state.sigma_xx = r * state.sigma_xx + (1 - r) * Sxx
        state.sigma_yy = r * state.sigma_yy + (1 - r) * Syy
        state.sigma_xy = r * state.sigma_xy + (1 - r) * Sxy
        state.U_x, state.U_y, state.corr = cca_from_covariances(
            state.sigma_xx, state.sigma_yy, state.sigma_xy, state.eps)
        state.n_updates += 1
    elif mode != "infer":
        raise InvalidArgument(f"mode must be 'train' or 'infer', got {mode!r}")
    Ux = state.U_x.astype(Xb.dtype, copy=False)
    Uy = state.U_y.astype(Yb.dtype, copy=False)
    return Xb @ Ux, Yb @ Uy, state


def cca_layer_backward(state, dPx, dPy):
    """Gradient through the projections, holding U_x and U_y fixed."""
    return dPx @ state.U_x.T.astype(dPx.dtype, copy=False), dPy @ state.U_y.T.astype(dPy.dtype, copy=False)


# --------------------------------------------------------------------------
# similarity and loss


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVectorError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def normalize_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVectorError(f"row {int(np.argmin(norms))} has zero norm")
    return X / norms, norms


def cosine_matrix(X, Y):
    """``S[i, j] = cos(X[i], Y[j])``."""
    Xn, _ = normalize_rows(np.asarray(X, dtype=float))
    Yn, _ = normalize_rows(np.asarray(Y, dtype=float))
    return Xn @ Yn.T


@dataclass(frozen=True)
class RankingLossConfig:
    margin: float = 0.7
    similarity: str = field(default="cosine")

    def __post_init__(self):
        if not 0 < self.margin <= 2:
            raise InvalidArgument(f"margin must lie in (0, 2] for cosine similarity, got {self.margin}")
        if self.similarity != "cosine":
            raise InvalidArgument("only cosine similarity is supported")


def ranking_loss_from_similarities(S, margin):
    """Loss and active-hinge mask for a similarity matrix ``S[i, j] = s(x_i, y_j)``."""
    S = np.asarray(S, dtype=np.float64)
    n = len(S)
    hinge = margin - np.diag(S)[:, None] + S
    np.fill_diagonal(hinge, 0.0)
    active = hinge > 0
    return float(hinge[active].sum() / n), active


def pairwise_ranking_loss(X, Y, cfg=RankingLossConfig()):
    """Hinge ranking loss with in-batch negatives.

    ``loss = 1/n * sum_i sum_{j != i} max(0, margin - s(x_i, y_i) + s(x_i, y_j))``.
    Returns ``(loss, (dX, dY))``. Hinges exactly at zero contribute no gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise ShapeError(f"embedding batches must have equal 2-d shapes, got {X.shape}, {Y.shape}")
    n = len(X)
    if n < 2:
        raise InvalidArgument("the ranking loss needs at least two pairs")
    Xn, nx = normalize_rows(X)
    Yn, ny = normalize_rows(Y)
    loss, active = ranking_loss_from_similarities(Xn @ Yn.T, cfg.margin)

    G = active.astype(np.float64) / n
    np.fill_diagonal(G, -G.sum(axis=1))
    dXn = G @ Yn
    dYn = G.T @ Xn
    dX = (dXn - Xn * (dXn * Xn).sum(axis=1, keepdims=True)) / nx
    dY = (dYn - Yn * (dYn * Yn).sum(axis=1, keepdims=True)) / ny
    return loss, (dX, dY)
