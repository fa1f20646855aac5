"""Per-vertex adversarial bandit state: EXP3, EXP3.M and DepRound.

Each vertex owns one bandit whose arms are the slots of its CSR row.  The
single-play sampler draws k arms with replacement from a distribution that
sums to one and is updated by EXP3; the multiple-play sampler draws a
k-subset with DepRound from marginals that sum to k and is updated by
EXP3.M with weight capping.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from .errors import ContractError, ParameterError

SUM_TOL = 1e-9
_INT_EPS = 1e-12
_RESCALE_AT = 1e150
_TINY = np.finfo(np.float64).tiny


class PlayMode(str, enum.Enum):
    SINGLE = "single_play"
    MULTIPLE = "multiple_play"


class DeltaSchedule(NamedTuple):
    delta: float
    t_min: float


def _delta_formula(eta: float, k: int, n: int, T: int) -> float:
    return math.sqrt((1 - eta) * eta**4 * k**5 * math.log(n / k) / (T * n**4))


def _t_min(eta: float, k: int, n: int) -> float:
    return math.log(n / k) * n**2 * (1 - eta) / (k * eta**2)


def delta_schedule(eta: float, k: int, n: int, T: int) -> DeltaSchedule:
    """Horizon-tuned learning rate and the horizon it is valid from.

    Warns (but still returns) when T is below the validity threshold.
    """
    if not 0 < eta <= 1:
        raise ParameterError(f"eta must be in (0, 1], got {eta}")
    if k < 1 or T < 1:
        raise ParameterError("k and T must be >= 1")
    if n <= k:
        raise ParameterError(f"n={n} must exceed k={k}")
    t_min = _t_min(eta, k, n)
    if T < t_min:
        warnings.warn(
            f"T={T} is below the validity threshold {t_min:.1f} for n={n}, k={k}",
            RuntimeWarning,
            stacklevel=2,
        )
    return DeltaSchedule(_delta_formula(eta, k, n, T), t_min)


@dataclass(frozen=True)
class BanditConfig:
    eta: float = 0.4
    k: int = 1
    T: int = 1000
    delta: float | None = None
    mode: PlayMode = PlayMode.SINGLE
    reward_clip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", PlayMode(self.mode))
        if not 0 < self.eta <= 1:
            raise ParameterError(f"eta must be in (0, 1], got {self.eta}")
        if self.k < 1 or self.T < 1:
            raise ParameterError("k and T must be >= 1")
        if self.delta is not None and not self.delta > 0:
            raise ParameterError("delta must be positive")

    def delta_for(self, n: int) -> float:
        """Learning rate for a neighborhood of size n (no warning)."""
        if self.delta is not None:
            return self.delta
        return _cached_delta(self.eta, self.k, n, self.T)


@lru_cache(maxsize=4096)
def _cached_delta(eta, k, n, T):
    if n <= k:
        raise ParameterError(f"n={n} must exceed k={k}")
    return _delta_formula(eta, k, n, T)


@dataclass
class PolicyRow:
    w: np.ndarray
    q: np.ndarray
    capped: np.ndarray
    t: int = 1
    clipped: int = 0

    @property
    def n(self) -> int:
        return int(self.w.size)


# ---------------------------------------------------------------------------
# sampling


def sample_with_replacement(q, k: int, rng: np.random.Generator) -> np.ndarray:
    """k independent categorical draws from the distribution q."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or np.any(q < 0) or abs(q.sum() - 1.0) > SUM_TOL:
        raise ContractError("q must be a nonnegative vector summing to 1")
    cum = np.cumsum(q)
    idx = np.searchsorted(cum, rng.random(k) * cum[-1], side="right")
    return np.minimum(idx, np.flatnonzero(q > 0)[-1])


def _check_marginals(k, q):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ContractError("q must be one-dimensional")
    if abs(q.sum() - k) > SUM_TOL:
        raise ContractError(f"DepRound needs sum(q) = k = {k}, got {q.sum()!r}")
    if np.any(q < -SUM_TOL) or np.any(q > 1 + SUM_TOL):
        raise ContractError("DepRound marginals must lie in [0, 1]")
    return q


def _snap(x: float) -> float:
    if x <= _INT_EPS:
        return 0.0
    if x >= 1.0 - _INT_EPS:
        return 1.0
    return x


def depround(k: int, q, rng: np.random.Generator) -> np.ndarray:
    """Dependent rounding of marginals q (summing to k) into a k-subset.

    Fractional entries are paired left to right: the survivor of each pair
    update is carried into the next pair, so at most n-1 updates occur.
    Returns the selected indices in increasing order.
    """
    p = [_snap(x) for x in _check_marginals(k, q).tolist()]
    n = len(p)
    carry = -1
    updates = 0
    for j in range(n):
        b = p[j]
        if b == 0.0 or b == 1.0:
            continue
        if carry < 0:
            carry = j
            continue
        a = p[carry]
        beta = min(1.0 - a, b)
        gamma = min(a, 1.0 - b)
        if rng.random() * (beta + gamma) < gamma:
            a, b = a + beta, b - beta
        else:
            a, b = a - gamma, b + gamma
        a, b = _snap(a), _snap(b)
        p[carry], p[j] = a, b
        updates += 1
        if not (a == 0.0 or a == 1.0):
            continue
        carry = j if not (b == 0.0 or b == 1.0) else -1
    assert updates <= max(n - 1, 0), "DepRound exceeded n-1 pair updates"
    if carry >= 0:
        # only floating-point residue can remain once the pairs are exhausted
        p[carry] = float(round(p[carry]))
    chosen = np.array([i for i, x in enumerate(p) if x == 1.0], dtype=np.int64)
    if chosen.size != k:
        raise ContractError(f"DepRound produced {chosen.size} items, expected {k}")
    return chosen


def depround_many(k: int, q, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent DepRound draws as a boolean (size, n) matrix.

    Vectorized over draws; uses the same left-to-right pairing as
    :func:`depround`.
    """
    q = _check_marginals(k, q)
    n = q.size
    p = np.tile(np.where(q <= _INT_EPS, 0.0, np.where(q >= 1 - _INT_EPS, 1.0, q)), (size, 1))
    carry = np.full(size, -1, dtype=np.int64)
    rows = np.arange(size)
    for j in range(n):
        b = p[:, j]
        frac_b = (b > 0.0) & (b < 1.0)
        start = frac_b & (carry < 0)
        carry[start] = j
        pair = np.flatnonzero(frac_b & ~start)
        if pair.size == 0:
            continue
        ci = carry[pair]
        a, bb = p[pair, ci], b[pair]
        beta = np.minimum(1.0 - a, bb)
        gamma = np.minimum(a, 1.0 - bb)
        up = rng.random(pair.size) * (beta + gamma) < gamma
        a = np.where(up, a + beta, a - gamma)
        bb = np.where(up, bb - beta, bb + gamma)
        a = np.where(a <= _INT_EPS, 0.0, np.where(a >= 1 - _INT_EPS, 1.0, a))
        bb = np.where(bb <= _INT_EPS, 0.0, np.where(bb >= 1 - _INT_EPS, 1.0, bb))
        p[pair, ci] = a
        p[pair, j] = bb
        a_int = (a == 0.0) | (a == 1.0)
        b_frac = (bb > 0.0) & (bb < 1.0)
        carry[pair] = np.where(a_int, np.where(b_frac, j, -1), ci)
    left = carry >= 0
    p[rows[left], carry[left]] = np.round(p[rows[left], carry[left]])
    chosen = p == 1.0
    if np.any(chosen.sum(axis=1) != k):
        raise ContractError("DepRound produced a subset of the wrong size")
    return chosen


# ---------------------------------------------------------------------------
# updates


def _importance_rewards(row: PolicyRow, rewards: Mapping[int, float], sampled, config, delta):
    n = row.n
    allowed = None if sampled is None else {int(s) for s in np.atleast_1d(sampled)}
    r_hat = np.zeros(n)
    for j, r in rewards.items():
        j = int(j)
        if not 0 <= j < n:
            raise ContractError(f"reward for arm {j} outside row of size {n}")
        if allowed is not None and j not in allowed:
            raise ContractError(f"reward for arm {j} which was not sampled")
        if not math.isfinite(r):
            raise ContractError(f"non-finite reward for arm {j}")
        if row.q[j] <= 0:
            raise ContractError(f"arm {j} has zero probability but received a reward")
        r_hat[j] = r / row.q[j]
    clipped = 0
    if config.reward_clip:
        cap = 1.0 / delta
        over = r_hat > cap
        clipped = int(over.sum())
        r_hat[over] = cap
    return r_hat, clipped


def _grow(w: np.ndarray, exponent: np.ndarray) -> np.ndarray:
    w = w * np.exp(exponent)
    top = w.max()
    if not np.isfinite(top):
        raise ContractError("bandit weight overflow; enable reward clipping")
    if top > _RESCALE_AT:
        # probabilities depend only on weight ratios
        w = np.maximum(w / top, _TINY)
    return w


def exp3_update(row: PolicyRow, rewards: Mapping[int, float], config: BanditConfig,
                sampled=None) -> PolicyRow:
    """One EXP3 step on a single-play row.

    ``rewards`` maps arm slots to the (summed) rewards observed this step;
    arms not present receive a zero importance-weighted reward.
    """
    n = row.n
    eta = config.eta
    delta = config.delta_for(n)
    r_hat, clipped = _importance_rewards(row, rewards, sampled, config, delta)
    w = _grow(row.w, delta * r_hat / n)
    q = (1 - eta) * w / w.sum() + eta / n
    return PolicyRow(w=w, q=q, capped=np.zeros(n, dtype=bool), t=row.t + 1, clipped=clipped)


def capping_threshold(w: np.ndarray, ratio: float) -> tuple[float, np.ndarray]:
    """Solve a = ratio * (m a + sum of the uncapped weights) for the cap a.

    Scans prefixes of the weights sorted in decreasing order; the number
    of capped arms m is the unique prefix length for which the solution
    separates the m largest weights from the rest.  Returns the threshold
    and a boolean mask of capped arms.
    """
    order = np.argsort(-w, kind="stable")
    ws = w[order]
    n = ws.size
    rest = np.concatenate([np.cumsum(ws[::-1])[::-1][1:], [0.0]])  # sum of ws[m:]
    for m in range(1, n):
        denom = 1.0 - ratio * m
        if denom <= 0:
            break
        a = ratio * rest[m - 1] / denom
        if ws[m - 1] >= a * (1 - 1e-12) and ws[m] < a:
            mask = np.zeros(n, dtype=bool)
            mask[order[:m]] = True
            return min(a, float(ws[m - 1])), mask
    raise AssertionError("capping threshold equation has no feasible solution")


def exp3m_update(row: PolicyRow, rewards: Mapping[int, float], config: BanditConfig,
                 sampled=None) -> PolicyRow:
    """One EXP3.M step on a multiple-play row whose marginals sum to k.

    Capped arms keep their weight; after the update the largest weights are
    capped at the threshold so that no marginal exceeds one.  The stored
    weights stay uncapped; the threshold only enters the marginals.
    """
    n, k, eta = row.n, config.k, config.eta
    if k >= n:
        raise ParameterError(f"EXP3.M needs k < n (k={k}, n={n})")
    delta = config.delta_for(n)
    r_hat, clipped = _importance_rewards(row, rewards, sampled, config, delta)
    exponent = np.where(row.capped, 0.0, delta * r_hat / n)
    w = _grow(row.w, exponent)
    ratio = (1.0 / k - eta / n) / (1 - eta)
    capped = np.zeros(n, dtype=bool)
    w_eff = w
    if w.max() >= ratio * w.sum():
        a, capped = capping_threshold(w, ratio)
        w_eff = np.where(capped, a, w)
    q = k * ((1 - eta) * w_eff / w_eff.sum() + eta / n)
    q[capped] = 1.0
    np.minimum(q, 1.0, out=q)
    return PolicyRow(w=w, q=q, capped=capped, t=row.t + 1, clipped=clipped)


# ---------------------------------------------------------------------------
# whole-graph state


@dataclass
class PolicyState:
    config: BanditConfig
    row_offsets: np.ndarray
    w: np.ndarray
    q: np.ndarray
    capped: np.ndarray
    steps: np.ndarray
    exhaustive: np.ndarray
    clip_events: int = 0
    _touched: set = field(default_factory=set, repr=False)

    @property
    def num_vertices(self) -> int:
        return int(self.steps.size)

    def row(self, i: int) -> PolicyRow:
        a, b = int(self.row_offsets[i]), int(self.row_offsets[i + 1])
        return PolicyRow(w=self.w[a:b].copy(), q=self.q[a:b].copy(),
                         capped=self.capped[a:b].copy(), t=int(self.steps[i]))

    def store(self, i: int, row: PolicyRow) -> None:
        a, b = int(self.row_offsets[i]), int(self.row_offsets[i + 1])
        if row.n != b - a:
            raise ContractError(f"row {i} has {b - a} arms, got {row.n}")
        self.w[a:b] = row.w
        self.q[a:b] = row.q
        self.capped[a:b] = row.capped
        self.steps[i] = row.t
        self.clip_events += row.clipped
        self._touched.add(int(i))

    def update(self, i: int, rewards: Mapping[int, float], sampled=None) -> PolicyRow:
        """Apply the configured bandit update to vertex i (no-op if exhaustive)."""
        if self.exhaustive[i]:
            return self.row(i)
        fn = exp3_update if self.config.mode is PlayMode.SINGLE else exp3m_update
        new = fn(self.row(i), rewards, self.config, sampled)
        self.store(i, new)
        return new

    def pop_touched(self) -> set:
        touched, self._touched = self._touched, set()
        return touched

    def copy(self) -> "PolicyState":
        return PolicyState(self.config, self.row_offsets.copy(), self.w.copy(), self.q.copy(),
                           self.capped.copy(), self.steps.copy(), self.exhaustive.copy(),
                           self.clip_events)

    def save(self, path) -> None:
        """Write the state as JSON; floats round-trip exactly."""
        cfg = self.config
        rows = {}
        for i in range(self.num_vertices):
            r = self.row(i)
            rows[str(i)] = {"w": r.w.tolist(), "q": r.q.tolist(),
                            "U": np.flatnonzero(r.capped).tolist(), "t": r.t}
        doc = {
            "config": {"eta": cfg.eta, "k": cfg.k, "T": cfg.T, "delta": cfg.delta,
                       "mode": cfg.mode.value, "reward_clip": cfg.reward_clip},
            "exhaustive": np.flatnonzero(self.exhaustive).tolist(),
            "clip_events": self.clip_events,
            "rows": rows,
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "PolicyState":
        doc = json.loads(Path(path).read_text())
        cfg = BanditConfig(**doc["config"])
        rows = doc["rows"]
        n_vert = len(rows)
        sizes = [len(rows[str(i)]["w"]) for i in range(n_vert)]
        offsets = np.zeros(n_vert + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        capped = np.zeros(offsets[-1], dtype=bool)
        for i in range(n_vert):
            capped[offsets[i] + np.asarray(rows[str(i)]["U"], dtype=np.int64)] = True
        exhaustive = np.zeros(n_vert, dtype=bool)
        exhaustive[doc["exhaustive"]] = True
        return cls(
            config=cfg,
            row_offsets=offsets,
            w=np.array([x for i in range(n_vert) for x in rows[str(i)]["w"]], dtype=np.float64),
            q=np.array([x for i in range(n_vert) for x in rows[str(i)]["q"]], dtype=np.float64),
            capped=capped,
            steps=np.array([rows[str(i)]["t"] for i in range(n_vert)], dtype=np.int64),
            exhaustive=exhaustive,
            clip_events=doc["clip_events"],
        )


def init_policy(graph, config: BanditConfig) -> PolicyState:
    """Uniform policy over every CSR row (q = 1/n, or k/n for multiple play).

    Rows with at most k arms are flagged exhaustive: they are sampled in
    full and never updated.
    """
    deg = graph.degrees.astype(np.int64)
    rows = graph.edge_rows
    exhaustive = deg <= config.k
    if config.mode is PlayMode.SINGLE:
        q = 1.0 / deg[rows]
    else:
        q = np.minimum(config.k / deg[rows], 1.0)
    if config.delta is None:
        sizes = np.unique(deg[~exhaustive])
        short = [int(n) for n in sizes if config.T < _t_min(config.eta, config.k, int(n))]
        if short:
            n_rows = int(np.isin(deg[~exhaustive], short).sum())
            warnings.warn(
                f"horizon T={config.T} is below the delta-schedule validity threshold for "
                f"{n_rows} vertices (neighborhood sizes >= {min(short)}); reward clipping "
                f"{'keeps' if config.reward_clip else 'does NOT keep'} delta*r_hat <= 1",
                RuntimeWarning,
                stacklevel=2,
            )
    return PolicyState(
        config=config,
        row_offsets=graph.row_offsets.copy(),
        w=np.ones(graph.num_edges),
        q=q,
        capped=np.zeros(graph.num_edges, dtype=bool),
        steps=np.ones(graph.num_nodes, dtype=np.int64),
        exhaustive=exhaustive,
    )
