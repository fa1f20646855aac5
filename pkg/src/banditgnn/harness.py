"""Minibatch training with bandit neighbor samplers, regret simulation and
variance reporting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bandit import (BanditConfig, PlayMode, PolicyRow, PolicyState, delta_schedule, depround,
                     exp3_update, exp3m_update, init_policy)
from .errors import ContractError, DataError, NumericError, ParameterError
from .estimators import (NeighborView, effective_variance, optimal_distribution,
                         reward_multi, reward_single)
from .graph import Graph, WeightMode, generate_synthetic, load_cora, load_dataset
from .model import (LayerBlock, ModelParams, SampleBlock, adam_step, forward, full_block,
                    loss_and_backward, make_layer, metrics, row_slots)

log = logging.getLogger(__name__)

ARCHES = ("gcn", "attentive")
SAMPLERS = ("bandit", "uniform")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    k: int = 1
    hidden: int = 16
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    eta: float = 0.4
    T: int | None = None  # None: epochs * steps per epoch
    delta: float | None = None
    mode: PlayMode = PlayMode.SINGLE
    arch: str = "gcn"
    sampler: str = "bandit"
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        self.mode = PlayMode(self.mode)
        if self.batch_size < 1 or self.k < 1 or self.epochs < 1 or self.hidden < 1:
            raise ParameterError("epochs, batch_size, k and hidden must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.arch not in ARCHES:
            raise ParameterError(f"arch must be one of {ARCHES}, got {self.arch!r}")
        if self.sampler not in SAMPLERS:
            raise ParameterError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")


@dataclass
class TrainResult:
    test_accuracy: float
    test_f1: float
    best_val: float
    best_epoch: int
    params: ModelParams
    policy: PolicyState
    history: list[dict] = field(default_factory=list)
    failed_steps: int = 0


# ---------------------------------------------------------------------------
# sampling


def sample_layer(graph: Graph, policy: PolicyState, targets, rng: np.random.Generator,
                 include_self: bool = False, uniform: bool = False) -> LayerBlock:
    """Sample every target's neighbors from its policy row.

    Rows with at most k neighbors are taken in full with q = 1.  With
    ``uniform`` the policy is ignored and q is 1/n (or k/n).
    """
    targets = np.asarray(targets, dtype=np.int64)
    k = policy.config.k
    single = policy.config.mode is PlayMode.SINGLE
    owner, slots = row_slots(graph, targets)
    deg = graph.degrees[targets].astype(np.int64)
    if uniform:
        d = deg[owner].astype(np.float64)
        q_all = 1.0 / d if single else np.minimum(k / d, 1.0)
    else:
        q_all = policy.q[slots]
    full = deg <= k
    sizes = deg
    row_start = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    # rows taken in full
    pos = np.flatnonzero(full[owner])
    pick_owner, pick_pos, pick_mult = [owner[pos]], [pos], [np.ones(pos.size)]
    live = np.flatnonzero(~full)
    if live.size:
        if single:
            cum = np.cumsum(q_all)
            base = np.where(row_start > 0, cum[row_start - 1], 0.0)
            tops = cum[row_start + sizes - 1]
            rows = np.repeat(live, k)
            u = base[rows] + rng.random(rows.size) * (tops[rows] - base[rows])
            pos = np.searchsorted(cum, u, side="right")
            pos = np.clip(pos, row_start[rows], row_start[rows] + sizes[rows] - 1)
            uniq, counts = np.unique(pos, return_counts=True)
            pick_owner.append(owner[uniq])
            pick_pos.append(uniq)
            pick_mult.append(counts / k)
        else:
            for r in live:
                a = row_start[r]
                chosen = depround(k, q_all[a:a + sizes[r]], rng)
                pick_owner.append(np.full(chosen.size, r))
                pick_pos.append(a + chosen)
                pick_mult.append(np.ones(chosen.size))
    et = np.concatenate(pick_owner)
    pos = np.concatenate(pick_pos)
    mult = np.concatenate(pick_mult)
    exhaustive_edge = full[et]
    q = np.where(exhaustive_edge, 1.0, q_all[pos])
    row_total = np.bincount(owner, q_all, targets.size)
    q_norm = np.where(exhaustive_edge, 1.0 / deg[et], q_all[pos] / row_total[et])
    return make_layer(graph, targets, et, slots[pos], mult, q, q_norm, include_self)


def sample_block(graph: Graph, policy: PolicyState, batch, rng: np.random.Generator,
                 attentive: bool = False, uniform: bool = False) -> SampleBlock:
    """Top-down: sample the batch's neighbors, then theirs."""
    upper = sample_layer(graph, policy, np.unique(batch), rng, attentive, uniform)
    lower = sample_layer(graph, policy, upper.sources, rng, attentive, uniform)
    return SampleBlock([lower, upper], policy.config.mode)


def row_alphas(graph: Graph, params: ModelParams | None, targets) -> tuple[np.ndarray, np.ndarray]:
    """Aggregation weights over the full rows of ``targets`` at layer 0.

    Returns (row position, CSR slot) pairs flattened with the weights.
    Attentive models get their exact softmax attention.
    """
    owner, slots = row_slots(graph, targets)
    if params is None or not params.attentive:
        alpha = graph.edge_weights[slots]
        if not np.all(np.isfinite(alpha)):
            raise ContractError("graph has no fixed weights; pass attentive params")
        return owner, slots, alpha
    W, a = params.values["W0"], params.values["a0"]
    d = W.shape[1]
    targets = np.asarray(targets, dtype=np.int64)
    nbr = graph.neighbor_ids[slots]
    s = (graph.features[targets] @ W @ a[:d])[owner] + graph.features[nbr] @ W @ a[d:]
    r = np.maximum(s, 0.0)
    top = np.full(targets.size, -np.inf)
    np.maximum.at(top, owner, r)
    e = np.exp(r - top[owner])
    return owner, slots, e / np.bincount(owner, e, targets.size)[owner]


# ---------------------------------------------------------------------------
# training


def resolve_graph(dataset: str, arch: str = "gcn", **synthetic) -> Graph:
    """'cora', 'synthetic' (keyword parameters forwarded) or a dataset directory."""
    mode = WeightMode.SYMMETRIC_NORMALIZED
    if dataset == "cora":
        return load_cora(mode)
    if dataset == "synthetic":
        return generate_synthetic(weight_mode=mode, **synthetic)
    if not Path(dataset).is_dir():
        raise DataError(f"dataset {dataset!r} is neither 'cora', 'synthetic' nor a directory")
    return load_dataset(dataset, mode)


def _bandit_step(graph, policy, result, block, single, k):
    """Feed rewards of the layer-0 draws back into the layer-1 rows."""
    lower = block.layers[0]
    alpha = result.edge_alpha(0)
    h_sq = graph.norms_sq[graph.neighbor_ids[lower.edge_slot]]
    if single:
        r = lower.mult * k * reward_single(alpha, lower.q, h_sq, k)  # summed over duplicate draws
    else:
        r = reward_multi(alpha, lower.q, h_sq)
    bounds = np.searchsorted(lower.edge_target, np.arange(lower.targets.size + 1))
    offsets = graph.row_offsets
    for pos, v in enumerate(lower.targets):
        if policy.exhaustive[v]:
            continue
        a, b = bounds[pos], bounds[pos + 1]
        arms = lower.edge_slot[a:b] - offsets[v]
        policy.update(int(v), dict(zip(arms.tolist(), r[a:b].tolist())), arms)


def _mean_ve(graph, policy, params, block, k, single):
    lower = block.layers[0]
    live = lower.targets[~policy.exhaustive[lower.targets]]
    if live.size == 0:
        return 0.0
    owner, slots, alpha = row_alphas(graph, params, live)
    h_sq = graph.norms_sq[graph.neighbor_ids[slots]]
    q = policy.q[slots]
    terms = (alpha**2 * h_sq / (k * q)) if single else alpha * h_sq / q
    return float(np.bincount(owner, terms, live.size).mean())


def train(config: TrainConfig, graph: Graph, out_dir=None) -> TrainResult:
    """Minibatch training; returns test metrics of the best-validation model."""
    attentive = config.arch == "attentive"
    if attentive and graph.weight_mode is not WeightMode.ATTENTIVE:
        graph = graph.with_weights(WeightMode.ATTENTIVE)
    train_ids = graph.split_ids("train")
    val_ids = graph.split_ids("val")
    test_ids = graph.split_ids("test")
    if train_ids.size == 0:
        raise ContractError("graph has no training vertices")
    steps_per_epoch = math.ceil(train_ids.size / config.batch_size)
    T = config.T or config.epochs * steps_per_epoch
    bandit_cfg = BanditConfig(eta=config.eta, k=config.k, T=T, delta=config.delta,
                              mode=config.mode)
    policy = init_policy(graph, bandit_cfg)
    init_rng, shuffle_rng, sample_rng, drop_rng = (
        np.random.default_rng([config.seed, s]) for s in range(4))
    params = ModelParams.init(graph.features.shape[1], config.hidden, graph.num_classes,
                              attentive, init_rng)
    multi_label = graph.multi_label
    single = config.mode is PlayMode.SINGLE
    eval_block = full_block(graph, np.arange(graph.num_nodes))
    labels = graph.labels

    best_val, best_epoch, best_params = -1.0, -1, params.copy()
    history: list[dict] = []
    failed = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(train_ids)
        epoch_failed = 0
        for start in range(0, order.size, config.batch_size):
            batch = np.sort(order[start:start + config.batch_size])
            step += 1
            block = sample_block(graph, policy, batch, sample_rng, attentive,
                                 uniform=config.sampler == "uniform")
            if config.debug:
                block.check_closure()
            try:
                result = forward(graph, params, block, config.dropout, drop_rng)
                loss = loss_and_backward(result, labels[block.batch], multi_label)
                adam_step(params, config.lr, config.weight_decay)
            except NumericError as exc:
                params.zero_grad()
                failed += 1
                epoch_failed += 1
                log.warning("step %d aborted: %s", step, exc)
                continue
            mean_ve = _mean_ve(graph, policy, params, block, config.k, single)
            if config.sampler == "bandit":
                _bandit_step(graph, policy, result, block, single, config.k)
                touched = policy.pop_touched()
                if config.debug and not touched <= set(block.layers[0].targets.tolist()):
                    raise AssertionError("policy rows outside layer 1 changed")
            train_acc = metrics(result.logits, labels[block.batch], multi_label)[0]
            history.append({"epoch": epoch, "step": step, "loss": loss, "train_acc": train_acc,
                            "val_metric": math.nan, "mean_Ve": mean_ve,
                            "clip_events": policy.clip_events})
        if epoch_failed == steps_per_epoch:
            raise NumericError(f"every step of epoch {epoch} failed")
        logits = forward(graph, params, eval_block).logits
        val = metrics(logits[val_ids], labels[val_ids], multi_label)[1] if val_ids.size else 0.0
        if history:
            history[-1]["val_metric"] = val
        if val > best_val:
            best_val, best_epoch, best_params = val, epoch, params.copy()

    logits = forward(graph, best_params, eval_block).logits
    test_acc, test_f1 = (metrics(logits[test_ids], labels[test_ids], multi_label)
                         if test_ids.size else (0.0, 0.0))
    result = TrainResult(test_acc, test_f1, best_val, best_epoch, best_params, policy,
                         history, failed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_train_log(out / "train_log.csv", history)
        best_params.save(out / "model.json")
        policy.save(out / "policy.json")
    return result


TRAIN_LOG_COLUMNS = ("epoch", "step", "loss", "train_acc", "val_metric", "mean_Ve", "clip_events")


def write_train_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRAIN_LOG_COLUMNS)
        for row in history:
            out.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                          for c in TRAIN_LOG_COLUMNS])


# ---------------------------------------------------------------------------
# regret simulation


STREAMS = ("uniform", "skewed", "drifting", "switch")


@dataclass
class RegretTrace:
    ve: np.ndarray
    ve_star: np.ndarray
    cum_ve: np.ndarray
    cum_ve_star: np.ndarray
    bound: np.ndarray
    q_history: np.ndarray
    n: int
    k: int
    mode: PlayMode

    @property
    def T(self) -> int:
        return int(self.ve.size)

    @property
    def regret(self) -> np.ndarray:
        return self.cum_ve - self.cum_ve_star

    def holds(self) -> bool:
        return bool(self.cum_ve[-1] <= self.bound[-1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "Ve_t", "Ve_star", "cum_Ve", "cum_Ve_star", "bound"])
            for t in range(self.T):
                out.writerow([t + 1, repr(float(self.ve[t])), repr(float(self.ve_star[t])),
                              repr(float(self.cum_ve[t])), repr(float(self.cum_ve_star[t])),
                              repr(float(self.bound[t]))])


def regret_bound(cum_star, t, n: int, k: int):
    """3 * (cumulative optimal variance) + 10 sqrt(t n^4 ln(n/k) / k^3)."""
    return 3 * np.asarray(cum_star) + 10 * np.sqrt(np.asarray(t) * n**4 * math.log(n / k) / k**3)


def make_stream(name: str, n: int, T: int, rng: np.random.Generator):
    """Per-step (alpha, |h|) arrays of shape (T, n); alpha rows sum to one, |h| <= 1."""
    if name not in STREAMS:
        raise ParameterError(f"stream must be one of {STREAMS}, got {name!r}")
    if name == "uniform":
        return np.full((T, n), 1.0 / n), np.ones((T, n))
    base_alpha = 0.6 ** rng.permutation(n)
    base_alpha /= base_alpha.sum()
    base_h = rng.uniform(0.1, 1.0, n)
    alpha = np.tile(base_alpha, (T, 1))
    h = np.tile(base_h, (T, 1))
    if name == "drifting":
        phase = rng.uniform(0, 2 * np.pi, n)
        t = np.arange(T)[:, None] / T
        alpha = np.exp(1.5 * np.sin(2 * np.pi * t + phase))
        alpha /= alpha.sum(axis=1, keepdims=True)
    elif name == "switch":
        half = T // 2
        alpha[half:] = base_alpha[::-1]
        h[half:] = base_h[::-1]
    return alpha, h


def simulate_regret(n: int, k: int, T: int, stream: str = "skewed", seed: int = 0,
                    mode: PlayMode | str | None = None, eta: float = 0.4,
                    delta: float | None = None) -> RegretTrace:
    """Run one bandit row against a synthetic reward stream.

    ``mode`` defaults to single play for k = 1 and multiple play otherwise.
    """
    if not n > k >= 1:
        raise ParameterError(f"need n > k >= 1, got n={n}, k={k}")
    mode = PlayMode(mode) if mode is not None else (PlayMode.SINGLE if k == 1 else PlayMode.MULTIPLE)
    rng = np.random.default_rng(seed)
    alpha, h = make_stream(stream, n, T, np.random.default_rng([seed, 1]))
    cfg = BanditConfig(eta=eta, k=k, T=T, delta=delta, mode=mode)
    if delta is None:
        delta_schedule(eta, k, n, T)  # warns below the validity threshold
    single = mode is PlayMode.SINGLE
    update = exp3_update if single else exp3m_update
    row = PolicyRow(w=np.ones(n), q=np.full(n, (1.0 if single else k) / n),
                    capped=np.zeros(n, dtype=bool))
    ve = np.empty(T)
    ve_star = np.empty(T)
    q_hist = np.empty((T, n))
    for t in range(T):
        view = NeighborView(alpha[t], h[t][:, None], row.q)
        ve[t] = effective_variance(view, k, mode)
        star = optimal_distribution(view, k, mode).q
        ve_star[t] = effective_variance(view.with_q(star), k, mode)
        q_hist[t] = row.q
        h_sq = h[t] ** 2
        if single:
            cum = np.cumsum(row.q)
            draws = np.minimum(np.searchsorted(cum, rng.random(k) * cum[-1], side="right"), n - 1)
            arms, counts = np.unique(draws, return_counts=True)
            r = counts * reward_single(alpha[t, arms], row.q[arms], h_sq[arms], k)
        else:
            arms = depround(k, row.q, rng)
            r = reward_multi(alpha[t, arms], row.q[arms], h_sq[arms])
        row = update(row, dict(zip(arms.tolist(), np.atleast_1d(r).tolist())), cfg, arms)
    cum_ve, cum_star = np.cumsum(ve), np.cumsum(ve_star)
    bound = regret_bound(cum_star, np.arange(1, T + 1), n, k)
    return RegretTrace(ve, ve_star, cum_ve, cum_star, bound, q_hist, n, k, mode)


# ---------------------------------------------------------------------------
# variance report


@dataclass
class VarianceRow:
    vertex: int
    uniform: float
    bandit: float
    oracle: float


def variance_report(graph: Graph, params: ModelParams | None, policy: PolicyState,
                    vertices=None) -> list[VarianceRow]:
    """Effective variance of each vertex's layer-0 aggregation under three samplers.

    Rows the sampler takes in full have zero estimator variance, so all
    three columns report the constant term there.
    """
    cfg = policy.config
    k, mode = cfg.k, cfg.mode
    single = mode is PlayMode.SINGLE
    vertices = graph.split_ids("train") if vertices is None else np.asarray(vertices)
    owner, slots, alpha = row_alphas(graph, params, vertices)
    bounds = np.searchsorted(owner, np.arange(vertices.size + 1))
    out = []
    for pos, v in enumerate(vertices):
        a, b = bounds[pos], bounds[pos + 1]
        emb = graph.features[graph.neighbor_ids[slots[a:b]]]
        n = b - a
        if policy.exhaustive[v]:
            mu = alpha[a:b] @ emb
            vc = float(mu @ mu) / (k if single else 1)
            out.append(VarianceRow(int(v), vc, vc, vc))
            continue
        view = NeighborView(alpha[a:b], emb, policy.q[slots[a:b]])
        uni = np.full(n, (1.0 if single else k) / n)
        star = optimal_distribution(view, k, mode).q
        out.append(VarianceRow(
            int(v),
            effective_variance(view.with_q(uni), k, mode),
            effective_variance(view, k, mode),
            effective_variance(view.with_q(star), k, mode),
        ))
    return out


def write_variance_report(path, rows: list[VarianceRow]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["vertex", "uniform", "bandit", "oracle"])
        for r in rows:
            out.writerow([r.vertex, repr(r.uniform), repr(r.bandit), repr(r.oracle)])
        if rows:
            means = [float(np.mean([getattr(r, c) for r in rows]))
                     for c in ("uniform", "bandit", "oracle")]
            out.writerow(["mean"] + [repr(m) for m in means])
