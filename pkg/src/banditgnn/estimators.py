"""Importance-sampled aggregation estimators and their variance functionals.

A vertex aggregates ``mu = sum_j alpha_j h_j`` over its neighbors.  The
single-play estimator averages ``alpha/q * h`` over k draws with
replacement; the multiple-play estimator sums it over a DepRound subset.
Rewards are negative partial derivatives of the effective variance with
respect to the sampling probabilities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .bandit import PlayMode
from .errors import ContractError, NumericError


@dataclass
class NeighborView:
    alphas: np.ndarray
    embeddings: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.q = np.asarray(self.q, dtype=np.float64)
        n = self.alphas.size
        if self.embeddings.shape[0] != n or self.q.size != n:
            raise ContractError("alphas, embeddings and q must have equal lengths")
        if np.any(self.alphas < 0):
            raise ContractError("alphas must be nonnegative")

    @property
    def n(self) -> int:
        return self.alphas.size

    @property
    def norms_sq(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.embeddings, self.embeddings)

    def mean(self) -> np.ndarray:
        """The exact aggregate sum_j alpha_j h_j."""
        return self.alphas @ self.embeddings

    def with_q(self, q) -> "NeighborView":
        return NeighborView(self.alphas, self.embeddings, q)


@dataclass
class VarianceRecord:
    effective_variance: float
    constant_term: float
    true_variance: float
    step: int = 0


def mc_estimate_single(view: NeighborView, draws, k: int | None = None) -> np.ndarray:
    """(1/k) sum over draws of alpha/q * h."""
    draws = np.asarray(draws, dtype=np.int64)
    k = draws.size if k is None else k
    if draws.size != k or k == 0:
        raise ContractError(f"expected {k} draws, got {draws.size}")
    q = view.q[draws]
    if np.any(q <= 0):
        raise ContractError("drew an arm with zero probability")
    coef = view.alphas[draws] / q
    return coef @ view.embeddings[draws] / k


def mc_estimate_multi(view: NeighborView, subset, k: int | None = None) -> np.ndarray:
    """sum over the subset of alpha/q * h (k defaults to round(sum q))."""
    subset = np.asarray(subset, dtype=np.int64)
    k = int(round(view.q.sum())) if k is None else k
    if subset.size != k:
        raise ContractError(f"subset has {subset.size} elements, expected {k}")
    q = view.q[subset]
    if np.any(q <= 0):
        raise ContractError("subset contains an arm with zero probability")
    return (view.alphas[subset] / q) @ view.embeddings[subset]


def _ratio_sum(num: np.ndarray, q: np.ndarray) -> float:
    live = num > 0
    if np.any(q[live] <= 0):
        raise NumericError("zero sampling probability on an arm with nonzero contribution")
    return float(np.sum(num[live] / q[live]))


def effective_variance(view: NeighborView, k: int = 1,
                       mode: PlayMode | str = PlayMode.SINGLE) -> float:
    """The q-dependent part of the estimator variance.

    single_play: (1/k) sum alpha^2 |h|^2 / q.
    multiple_play: sum alpha |h|^2 / q, the upper bound on the DepRound
    estimator's second moment.
    """
    mode = PlayMode(mode)
    if mode is PlayMode.SINGLE:
        return _ratio_sum(view.alphas**2 * view.norms_sq, view.q) / k
    return _ratio_sum(view.alphas * view.norms_sq, view.q)


def constant_term(view: NeighborView, k: int = 1) -> float:
    """|mu|^2 / k, the q-independent part of the single-play variance."""
    mu = view.mean()
    return float(mu @ mu) / k


def true_variance_single(view: NeighborView, k: int = 1, step: int = 0) -> VarianceRecord:
    """Exact single-play estimator variance by enumerating every arm."""
    mu = view.mean()
    live = view.q > 0
    diffs = (view.alphas[live] / view.q[live])[:, None] * view.embeddings[live] - mu
    if np.any(~live & (view.alphas * np.sqrt(view.norms_sq) > 0)):
        raise NumericError("zero sampling probability on an arm with nonzero contribution")
    v = float(view.q[live] @ np.einsum("ij,ij->i", diffs, diffs)) / k
    return VarianceRecord(
        effective_variance=effective_variance(view, k, PlayMode.SINGLE),
        constant_term=constant_term(view, k),
        true_variance=v,
        step=step,
    )


class OptimalQ(NamedTuple):
    q: np.ndarray
    degenerate: bool


def _water_fill(score: np.ndarray, k: int) -> np.ndarray:
    """Marginals q = min(1, c * score) with sum(q) = k."""
    n = score.size
    q = np.zeros(n)
    free = np.ones(n, dtype=bool)
    budget = float(k)
    while True:
        total = score[free].sum()
        if budget <= 0 or total <= 0:
            break
        q[free] = budget * score[free] / total
        over = free & (q > 1.0)
        if not over.any():
            break
        q[over] = 1.0
        free &= ~over
        budget = k - (n - free.sum())
    return q


def optimal_distribution(view: NeighborView, k: int = 1,
                         mode: PlayMode | str = PlayMode.SINGLE,
                         as_printed: bool = False) -> OptimalQ:
    """Sampling probabilities minimizing the effective variance.

    single_play: q* proportional to alpha_j |h_j|, normalized to one.  With
    ``as_printed`` the squared norm alpha_j |h_j|^2 is used instead, which
    does not minimize the variance and exists for comparison only.

    multiple_play: marginals summing to k that minimize sum alpha |h|^2 / q
    under q <= 1, i.e. q proportional to sqrt(alpha) |h| with water-filling
    at the cap.

    Falls back to uniform (degenerate=True) when every contribution is zero.
    """
    mode = PlayMode(mode)
    norms = np.sqrt(view.norms_sq)
    if mode is PlayMode.SINGLE:
        score = view.alphas * (norms**2 if as_printed else norms)
        k_eff = 1
    else:
        score = np.sqrt(view.alphas) * norms
        k_eff = k
    if k_eff > view.n:
        raise ContractError(f"cannot place k={k_eff} draws on {view.n} arms")
    if not np.any(score > 0):
        return OptimalQ(np.full(view.n, k_eff / view.n), True)
    positive = int((score > 0).sum())
    if positive < k_eff:
        # every contributing arm is taken surely; spread the rest evenly
        q = np.where(score > 0, 1.0, (k_eff - positive) / (view.n - positive))
        return OptimalQ(q, False)
    if mode is PlayMode.SINGLE:
        return OptimalQ(score / score.sum(), False)
    return OptimalQ(_water_fill(score, k_eff), False)


def reward_single(alpha, q, h_norm_sq, k: int = 1):
    """alpha^2 |h|^2 / (k q^2); vectorizes over arrays."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise ContractError("reward needs q > 0")
    out = np.asarray(alpha, dtype=np.float64) ** 2 * np.asarray(h_norm_sq) / (k * q**2)
    return float(out) if out.ndim == 0 else out


def reward_multi(alpha, q, h_norm_sq):
    """alpha |h|^2 / q^2; a subset's reward is the sum over its arms."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise ContractError("reward needs q > 0")
    out = np.asarray(alpha, dtype=np.float64) * np.asarray(h_norm_sq) / q**2
    return float(out) if out.ndim == 0 else out


def adjusted_attention(q, subset, unnormalized) -> np.ndarray:
    """Subset-local softmax rescaled by the subset's sampling mass.

    ``q`` covers the whole neighborhood and should sum to one; the result is
    aligned with ``subset`` and sums to sum(q[subset]).
    """
    q = np.asarray(q, dtype=np.float64)
    subset = np.asarray(subset, dtype=np.int64)
    u = np.asarray(unnormalized, dtype=np.float64)
    if subset.size == 0 or u.shape != subset.shape:
        raise ContractError("need one unnormalized attention value per subset element")
    total = u.sum()
    if not total > 0:
        raise ContractError("unnormalized attention values must not all be zero")
    return q[subset].sum() * u / total


def write_variance_csv(path, rows: Iterable[tuple[int, int, VarianceRecord, str]]) -> None:
    """CSV with columns step, vertex, V_e, V_c, V, sampler."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["step", "vertex", "V_e", "V_c", "V", "sampler"])
        for step, vertex, rec, tag in rows:
            out.writerow([step, vertex, repr(rec.effective_variance), repr(rec.constant_term),
                          repr(rec.true_variance), tag])
