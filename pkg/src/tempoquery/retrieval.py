"""Nearest-neighbour retrieval of score snippets from audio queries, and the
ranking metrics R@k, MRR and median rank."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateEmbeddingError, InvalidArgument, ShapeError


@dataclass(frozen=True)
class EmbeddingIndex:
    """Projected sheet embeddings of a candidate pool (row i <-> ``ids[i]``)."""

    matrix: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or len(self.matrix) != len(self.ids):
            raise ShapeError("index matrix and ids disagree")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidArgument("candidate ids must be unique")
        if not np.all(np.isfinite(self.matrix)):
            raise InvalidArgument("index contains non-finite embeddings")
        norms = np.linalg.norm(self.matrix, axis=1)
        bad = np.flatnonzero(norms == 0)
        if len(bad):
            raise DegenerateEmbeddingError(self.ids[bad[0]])

    def __len__(self):
        return len(self.ids)

    @property
    def unit(self):
        return self.matrix / np.linalg.norm(self.matrix, axis=1, keepdims=True)

    def similarities(self, queries):
        """Cosine similarities, one row per query, rounded to float32."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(qn == 0):
            raise DegenerateEmbeddingError("query", "query embedding has zero norm")
        return ((q / qn) @ self.unit.T).astype(np.float32)


def build_index(model, snippets, ids=None):
    snippets = np.asarray(snippets)
    if snippets.ndim == 2:
        snippets = snippets[None]
    if len(snippets) == 0:
        raise InvalidArgument("cannot index an empty pool")
    ids = np.arange(len(snippets)) if ids is None else np.asarray(ids)
    emb = model.embed_sheet(snippets)
    return EmbeddingIndex(emb.astype(np.float64), ids)


def rank_order(sims, ids):
    """Candidate positions sorted by descending similarity, ties by ascending id."""
    return np.lexsort((ids, -np.asarray(sims)))


def query(index, model, excerpt):
    """All candidate ids, best match first."""
    spec = np.asarray(excerpt)
    if spec.ndim != 2:
        raise ShapeError(f"expected one (F, T) excerpt, got {spec.shape}")
    if spec.shape != (model.n_bins, model.variant.t_frames):
        raise ShapeError(f"excerpt {spec.shape} does not match model input "
                         f"{(model.n_bins, model.variant.t_frames)}")
    sims = index.similarities(model.embed_audio(spec[None]))[0]
    return index.ids[rank_order(sims, index.ids)]


def true_ranks(S, ids, true_pos):
    """Rank of each query's counterpart under the id tie-break.

    ``rank = #(sim > s_true) + #(sim == s_true and id < id_true) + 1``.
    """
    S = np.asarray(S)
    ids = np.asarray(ids)
    rows = np.arange(len(S))
    s_true = S[rows, true_pos][:, None]
    id_true = ids[true_pos][:, None]
    better = (S > s_true) | ((S == s_true) & (ids[None, :] < id_true))
    return better.sum(axis=1) + 1


def recall_at_k(ranks, k):
    ranks = np.asarray(ranks)
    return 100.0 * np.count_nonzero(ranks <= k) / len(ranks)


def mrr(ranks):
    """Mean reciprocal rank in percent, summed exactly and rounded once."""
    counts = Counter(int(r) for r in np.asarray(ranks).ravel())
    n = sum(counts.values())
    return float(100 * sum(Fraction(c, r) for r, c in counts.items()) / n)


def median_rank(ranks):
    """Lower median, so the result is always an attained rank."""
    r = np.sort(np.asarray(ranks))
    return int(r[(len(r) + 1) // 2 - 1])


@dataclass(frozen=True)
class MetricsReport:
    r1: float
    r5: float
    r25: float
    mrr: float
    mr: int
    n_queries: int
    pool_size: int

    @classmethod
    def from_ranks(cls, ranks, pool_size):
        ranks = np.asarray(ranks)
        return cls(recall_at_k(ranks, 1), recall_at_k(ranks, 5), recall_at_k(ranks, 25),
                   mrr(ranks), median_rank(ranks), len(ranks), pool_size)

    def csv_line(self, variant):
        return (f"{variant},{self.pool_size},{self.r1:.2f},{self.r5:.2f},{self.r25:.2f},"
                f"{self.mrr:.2f},{self.mr}")


CSV_HEADER = "variant,pool,R@1,R@5,R@25,MRR,MR"


def parse_csv_line(line):
    parts = line.strip().split(",")
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields ({CSV_HEADER}), got {len(parts)}")
    variant, pool, r1, r5, r25, m, mr = parts
    return {"variant": variant, "pool": int(pool), "R@1": float(r1), "R@5": float(r5),
            "R@25": float(r25), "MRR": float(m), "MR": int(mr)}


@dataclass
class Evaluation:
    report: MetricsReport
    pool: np.ndarray        # dataset indices of the candidates, in index order
    similarity: np.ndarray  # (n_queries, pool) float32, query i <-> candidate i
    ranks: np.ndarray


def sample_pool(ds, pool_size, seed, split="test"):
    candidates = np.flatnonzero(ds.split_mask(split)) if split else np.arange(len(ds))
    if pool_size < 1 or pool_size > len(candidates):
        raise InvalidArgument(
            f"pool of {pool_size} requested but the {split or 'full'} set has {len(candidates)} pairs")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(candidates, size=pool_size, replace=False))


def evaluate(model, ds, pool_size, seed=0, split="test", details=False):
    """Audio-to-sheet retrieval over a seeded candidate pool.

    Every pair in the pool is used once as a query; its own snippet is the
    only correct answer. Candidate ids are dataset indices.
    """
    pool = sample_pool(ds, pool_size, seed, split)
    index = build_index(model, ds.scores[pool], ids=pool)
    queries = model.embed_audio(ds.spectrograms[pool])
    S = index.similarities(queries)
    ranks = true_ranks(S, pool, np.arange(len(pool)))
    report = MetricsReport.from_ranks(ranks, pool_size)
    if details:
        return Evaluation(report, pool, S, ranks)
    return report
