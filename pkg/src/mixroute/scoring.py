"""Similarity scoring over an embedding bank.

The scoring pipeline turns one embedded query into per-model evidence:

1. ``select_support`` picks the bank rows most similar to the query.
2. ``coarse_scores`` weighs each model's historical correctness on
   those rows by query similarity; this prior picks the aggregator and
   the candidate set.
3. ``mixed_similarity`` refines the per-row weights with the
   candidates' live responses (response similarity) and completion
   costs (length similarity).
4. ``filter_support``/``fine_scores`` re-score every model on the rows
   the refined weights retained.

All functions cast stored float32 to float64 before arithmetic and are
pure: no hidden state, safe under concurrent callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bank import EmbeddingBank
from .errors import AlphaOutOfRange, EmptyBank

WEIGHT_SUM_TOL = 1e-9


def kth_largest_threshold(values: Sequence[float] | np.ndarray, alpha: int) -> float:
    """Value of the alpha-th largest element.

    Ordering is stable descending with ties broken by ascending index,
    so the result is always an element of ``values``. Under ties the
    set ``{i : values[i] >= result}`` may hold more than ``alpha``
    members; callers that need exactly alpha entries truncate
    themselves.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if not 1 <= alpha <= v.size:
        raise AlphaOutOfRange(f"rank {alpha} outside [1, {v.size}]")
    order = np.argsort(-v, kind="stable")
    return float(v[order[alpha - 1]])


@dataclass(frozen=True)
class SupportSet:
    """Bank rows backing one routing decision.

    ``indices`` are bank row numbers ordered by descending query
    similarity (ties by ascending row); ``similarities`` is aligned.
    ``base_size`` is the clamped neighbor count the threshold was taken
    at and ``threshold`` the effective cutoff after tolerance.
    """

    indices: np.ndarray
    similarities: np.ndarray
    base_size: int
    tolerance: float
    threshold: float

    def __post_init__(self):
        self.indices.setflags(write=False)
        self.similarities.setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.indices.size)


def select_support(
    bank: EmbeddingBank,
    query_embedding: np.ndarray,
    base_size: int,
    tolerance: float,
) -> SupportSet:
    """Rows whose query similarity clears the tolerant base cutoff.

    The cutoff starts at the ``base_size``-th largest similarity
    (clamped to the bank size) and the tolerance in [0, 1] relaxes it
    multiplicatively; it never tightens it, so the support always holds
    at least min(base_size, N) rows even when similarities go negative.
    """
    if bank.n_records == 0:
        raise EmptyBank("support selection needs at least one bank row")
    if not 0.0 <= tolerance <= 1.0:
        raise ValueError(f"tolerance must be in [0, 1], got {tolerance}")
    e = np.asarray(query_embedding, dtype=np.float64).ravel()
    if e.shape != (bank.dim,):
        raise ValueError(f"query embedding has dim {e.shape[0]}, bank dim {bank.dim}")

    sims = bank.query_embeddings.astype(np.float64) @ e
    base = min(int(base_size), bank.n_records)
    kth = kth_largest_threshold(sims, base)
    threshold = min(tolerance * kth, kth)

    idx = np.nonzero(sims >= threshold)[0]
    idx = idx[np.argsort(-sims[idx], kind="stable")]
    return SupportSet(
        indices=idx.astype(np.int64),
        similarities=sims[idx].copy(),
        base_size=base,
        tolerance=float(tolerance),
        threshold=float(threshold),
    )


def coarse_scores(bank: EmbeddingBank, support: SupportSet) -> np.ndarray:
    """Per-model prior: query-similarity mass on rows the model got right."""
    v_sup = bank.capability[:, support.indices].astype(np.float64)
    return v_sup @ support.similarities


def response_similarity(
    bank: EmbeddingBank,
    support: SupportSet,
    response_embeddings: np.ndarray,
    candidate_columns: Sequence[int],
) -> np.ndarray:
    """Per support row, summed cosine between each candidate's live
    response and that candidate's stored response on the row."""
    cols = list(candidate_columns)
    r = np.asarray(response_embeddings, dtype=np.float64)
    if r.shape != (len(cols), bank.dim):
        raise ValueError(
            f"expected {len(cols)} response embeddings of dim {bank.dim}, got shape {r.shape}"
        )
    if not cols:
        return np.zeros(support.size, dtype=np.float64)
    er_sup = bank.response_embeddings[np.ix_(support.indices, cols)].astype(np.float64)
    return np.einsum("pkd,kd->p", er_sup, r)


def cost_similarity(
    bank: EmbeddingBank,
    support: SupportSet,
    candidate_costs: Sequence[int],
    candidate_columns: Sequence[int],
) -> np.ndarray:
    """Per support row, summed closeness of squared completion cost.

    For each candidate the squared-cost deviation is scaled by the
    worst deviation across the support; a candidate whose deviations
    are all zero contributes 1 to every row.
    """
    cols = list(candidate_columns)
    live = np.asarray(candidate_costs, dtype=np.float64)
    if live.shape != (len(cols),):
        raise ValueError("candidate_costs and candidate_columns must align")
    if (live < 0).any():
        raise ValueError("live costs must be non-negative")
    if not cols:
        return np.zeros(support.size, dtype=np.float64)
    c_bank = bank.costs[np.ix_(support.indices, cols)].astype(np.float64)
    dev = np.abs(c_bank**2 - live[None, :] ** 2)
    worst = dev.max(axis=0)
    safe = np.where(worst > 0.0, worst, 1.0)
    terms = np.where(worst > 0.0, 1.0 - dev / safe, 1.0)
    return terms.sum(axis=1)


@dataclass(frozen=True)
class MixedWeights:
    """Convex weights of the three similarity terms plus the filter share.

    epsilon weighs query similarity (scaled by the candidate count so
    its magnitude tracks the K-summed response and cost terms), sigma
    the response term, delta the cost term. beta is the fraction of
    support rows the filter keeps.
    """

    epsilon: float = 0.5
    sigma: float = 0.3
    delta: float = 0.2
    beta: float = 0.5

    def __post_init__(self):
        for name in ("epsilon", "sigma", "delta", "beta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        total = self.epsilon + self.sigma + self.delta
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"epsilon + sigma + delta must be 1, got {total}")


def mixed_similarity(
    bank: EmbeddingBank,
    support: SupportSet,
    response_embeddings: np.ndarray,
    candidate_columns: Sequence[int],
    candidate_costs: Sequence[int],
    weights: MixedWeights,
) -> np.ndarray:
    """Blend of query, response and cost similarity on support rows.

    The candidate count K is taken from ``candidate_columns``; when a
    live call failed upstream the caller simply omits that candidate
    and the query term scales by the surviving count.
    """
    k = len(candidate_columns)
    res = response_similarity(bank, support, response_embeddings, candidate_columns)
    cost = cost_similarity(bank, support, candidate_costs, candidate_columns)
    return weights.epsilon * k * support.similarities + weights.sigma * res + weights.delta * cost


def filter_support(support: SupportSet, mixed: np.ndarray, beta: float) -> np.ndarray:
    """Positions (into support order) whose mixed similarity clears the
    floor(beta * N_sup)-th largest value; the floor is clamped to 1 so
    at least one row always survives. Ties at the cutoff are kept."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    m = np.asarray(mixed, dtype=np.float64).ravel()
    if m.size != support.size:
        raise ValueError("mixed similarities must align with the support set")
    keep = max(1, math.floor(beta * support.size))
    threshold = kth_largest_threshold(m, keep)
    return np.nonzero(m >= threshold)[0].astype(np.int64)


@dataclass(frozen=True)
class ScoreReport:
    """Everything the scoring pipeline computed for one query.

    ``filtered_indices`` are positions into the support ordering, not
    bank rows; ``mixed_similarities`` covers every support row. The
    optional term vectors carry the raw (unweighted) query, response
    and cost components for explain output.
    """

    coarse: np.ndarray
    fine: np.ndarray
    filtered_indices: np.ndarray
    mixed_similarities: np.ndarray
    query_term: np.ndarray | None = None
    response_term: np.ndarray | None = None
    cost_term: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "coarse": [float(x) for x in self.coarse],
            "fine": [float(x) for x in self.fine],
            "filtered_indices": [int(p) for p in self.filtered_indices],
            "mixed_similarities": [float(x) for x in self.mixed_similarities],
        }
        for name in ("query_term", "response_term", "cost_term"):
            vec = getattr(self, name)
            if vec is not None:
                out[name] = [float(x) for x in vec]
        return out


def fine_scores(
    bank: EmbeddingBank,
    support: SupportSet,
    filtered_positions: np.ndarray,
    mixed: np.ndarray,
) -> np.ndarray:
    """Per-model score over the filtered rows, for all M bank models.

    Models outside the candidate set score too; the adaptive switch
    may pick them.
    """
    pos = np.asarray(filtered_positions, dtype=np.int64)
    m = np.asarray(mixed, dtype=np.float64).ravel()
    rows = support.indices[pos]
    v = bank.capability[:, rows].astype(np.float64)
    return v @ m[pos]
