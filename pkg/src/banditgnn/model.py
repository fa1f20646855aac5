"""Two-layer GCN and single-head attention GNN with hand-written gradients.

A forward pass runs over a :class:`SampleBlock`: layer 0 aggregates input
features of sampled vertices into hidden embeddings for the layer-1
vertices, and layer 1 aggregates those into logits for the batch.  Each
aggregation is an importance-weighted sum with coefficients
``mult * alpha / q``; sampling probabilities are constants of the step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .bandit import PlayMode
from .errors import ContractError, DataError, NumericError, StructuralError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Weights plus gradient and Adam moment buffers.

    ``W0`` (D0 x Dh) and ``W1`` (Dh x C) are the layer transforms.  In
    attentive mode ``a0`` (2 Dh) and ``a1`` (2 C) score pairs as
    ``a . [W h_i || W h_j]``, with the attention transform tied to the
    layer transform.
    """

    values: dict[str, np.ndarray]
    attentive: bool = False
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.values = {k: np.asarray(v, dtype=np.float64) for k, v in self.values.items()}
        for name in ("W0", "W1"):
            if name not in self.values or self.values[name].ndim != 2:
                raise StructuralError(f"missing or non-matrix parameter {name}")
        if self.values["W0"].shape[1] != self.values["W1"].shape[0]:
            raise StructuralError("W0 columns must match W1 rows")
        if self.attentive:
            for name, w in (("a0", "W0"), ("a1", "W1")):
                want = (2 * self.values[w].shape[1],)
                if name not in self.values or self.values[name].shape != want:
                    raise StructuralError(f"attention vector {name} must have shape {want}")
        for name, val in self.values.items():
            self.grads.setdefault(name, np.zeros_like(val))
            self.m.setdefault(name, np.zeros_like(val))
            self.v.setdefault(name, np.zeros_like(val))

    @classmethod
    def init(cls, in_dim: int, hidden: int, num_classes: int, attentive: bool,
             rng: np.random.Generator) -> "ModelParams":
        """Glorot-uniform weights."""
        def glorot(shape):
            fan = shape[0] + (shape[1] if len(shape) > 1 else 1)
            lim = np.sqrt(6.0 / fan)
            return rng.uniform(-lim, lim, size=shape)

        values = {"W0": glorot((in_dim, hidden)), "W1": glorot((hidden, num_classes))}
        if attentive:
            values["a0"] = glorot((2 * hidden,))
            values["a1"] = glorot((2 * num_classes,))
        return cls(values, attentive)

    @property
    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.values.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ModelParams":
        dup = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelParams(dup(self.values), self.attentive, dup(self.grads), dup(self.m),
                           dup(self.v), self.step)

    def save(self, path) -> None:
        """JSON with shape and row-major values per parameter."""
        doc = {
            "attentive": self.attentive,
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                       for k, v in self.values.items()},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "ModelParams":
        doc = json.loads(Path(path).read_text())
        values = {}
        for k, entry in doc["params"].items():
            arr = np.asarray(entry["values"], dtype=np.float64)
            if arr.size != int(np.prod(entry["shape"])):
                raise StructuralError(f"parameter {k}: value count does not match shape")
            values[k] = arr.reshape(entry["shape"])
        return cls(values, bool(doc["attentive"]))


# ---------------------------------------------------------------------------
# sample blocks


@dataclass
class LayerBlock:
    """One aggregation: targets gather from sources along sampled edges.

    Edges are sorted by target.  ``edge_slot`` indexes the graph's CSR
    arrays, ``mult`` is the draw multiplicity factor (count/k for
    single-play, 1 otherwise), ``q`` the probability used to sample and
    ``q_norm`` that probability divided by its row total.
    """

    targets: np.ndarray
    sources: np.ndarray
    edge_target: np.ndarray
    edge_source: np.ndarray
    edge_slot: np.ndarray
    mult: np.ndarray
    q: np.ndarray
    q_norm: np.ndarray
    self_source: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.edge_slot.size)


@dataclass
class SampleBlock:
    layers: list[LayerBlock]
    mode: PlayMode = PlayMode.MULTIPLE

    @property
    def batch(self) -> np.ndarray:
        return self.layers[1].targets

    def check_closure(self) -> None:
        if len(self.layers) != 2:
            raise StructuralError("a block needs exactly two layers")
        lower, upper = self.layers
        if not np.array_equal(lower.targets, upper.sources):
            raise StructuralError("layer-1 sources must be exactly the layer-0 targets")
        for l, blk in enumerate(self.layers):
            if blk.edge_target.size and np.any(np.diff(blk.edge_target) < 0):
                raise StructuralError(f"layer {l} edges are not grouped by target")
            if np.any(np.bincount(blk.edge_target, minlength=blk.targets.size) == 0):
                raise StructuralError(f"layer {l} has a target without sampled neighbors")


def make_layer(graph, targets, edge_target, edge_slot, mult, q, q_norm,
               include_self: bool) -> LayerBlock:
    """Assemble a layer from per-edge arrays (edge_target indexes ``targets``)."""
    targets = np.asarray(targets, dtype=np.int64)
    edge_target = np.asarray(edge_target, dtype=np.int64)
    edge_slot = np.asarray(edge_slot, dtype=np.int64)
    if np.any(graph.edge_rows[edge_slot] != targets[edge_target]):
        raise StructuralError("edge slot does not belong to its target's row")
    nbr = graph.neighbor_ids[edge_slot]
    pool = np.concatenate([nbr, targets]) if include_self else nbr
    sources = np.unique(pool)
    order = np.lexsort((nbr, edge_target))
    edge_target, edge_slot, nbr = edge_target[order], edge_slot[order], nbr[order]
    pos = np.searchsorted(sources, targets)
    pos = np.minimum(pos, sources.size - 1)
    self_source = np.where(sources[pos] == targets, pos, -1)
    return LayerBlock(
        targets=targets,
        sources=sources,
        edge_target=edge_target,
        edge_source=np.searchsorted(sources, nbr),
        edge_slot=edge_slot,
        mult=np.asarray(mult, dtype=np.float64)[order],
        q=np.asarray(q, dtype=np.float64)[order],
        q_norm=np.asarray(q_norm, dtype=np.float64)[order],
        self_source=self_source,
    )


def row_slots(graph, vertices) -> tuple[np.ndarray, np.ndarray]:
    """All CSR slots of the given rows, with the position of their row."""
    vertices = np.asarray(vertices, dtype=np.int64)
    starts = graph.row_offsets[vertices]
    counts = graph.row_offsets[vertices + 1] - starts
    owner = np.repeat(np.arange(vertices.size), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    slots = np.repeat(starts, counts) + np.arange(counts.sum()) - first
    return owner, slots


def exhaustive_layer(graph, targets) -> LayerBlock:
    """Every neighbor with q = 1, so the estimator is the exact sum."""
    targets = np.asarray(targets, dtype=np.int64)
    owner, slots = row_slots(graph, targets)
    ones = np.ones(slots.size)
    deg = graph.degrees[targets[owner]].astype(np.float64)
    return make_layer(graph, targets, owner, slots, ones, ones, 1.0 / deg, include_self=False)


def full_block(graph, targets) -> SampleBlock:
    """Exhaustive two-hop block for the given output vertices."""
    upper = exhaustive_layer(graph, np.unique(targets))
    lower = exhaustive_layer(graph, upper.sources)
    return SampleBlock([lower, upper], PlayMode.MULTIPLE)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class LayerTrace:
    block: LayerBlock
    h_in: np.ndarray
    z: np.ndarray
    coef: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray | None = None
    score: np.ndarray | None = None
    mass: np.ndarray | None = None
    matrix: sp.csr_matrix | None = None


@dataclass
class ForwardResult:
    logits: np.ndarray
    targets: np.ndarray
    params: ModelParams
    layers: list[LayerTrace]
    hidden_pre: np.ndarray
    masks: list[np.ndarray | None]

    def edge_alpha(self, layer: int = 0) -> np.ndarray:
        """Per-edge aggregation weights (alpha, or adjusted attention)."""
        return self.layers[layer].alpha


def _segment_max(values, seg, m):
    out = np.full(m, -np.inf)
    np.maximum.at(out, seg, values)
    return out


def _layer_forward(h_in, W, a, blk: LayerBlock, weights, layer: int) -> LayerTrace:
    z = h_in @ W
    m = blk.targets.size
    et, es = blk.edge_target, blk.edge_source
    if a is None:
        alpha = weights[blk.edge_slot]
        if not np.all(np.isfinite(alpha)):
            raise StructuralError("graph has no fixed aggregation weights; use attentive mode")
        trace = LayerTrace(blk, h_in, z, None, alpha)
    else:
        if np.any(blk.self_source < 0):
            raise StructuralError(f"layer {layer}: attentive targets must appear among sources")
        d = W.shape[1]
        zt = z[blk.self_source]
        score = zt[et] @ a[:d] + z[es] @ a[d:]
        r = np.maximum(score, 0.0)
        e = np.exp(r - _segment_max(r, et, m)[et])
        beta = e / np.bincount(et, e, m)[et]
        mass = np.bincount(et, blk.q_norm, m)[et]
        alpha = mass * beta
        trace = LayerTrace(blk, h_in, z, None, alpha, beta, score, mass)
    trace.coef = blk.mult * alpha / blk.q
    trace.matrix = sp.csr_matrix((trace.coef, (et, es)), shape=(m, blk.sources.size))
    return trace


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in layer {layer}")


def forward(graph, params: ModelParams, block: SampleBlock, dropout: float = 0.0,
            rng: np.random.Generator | None = None) -> ForwardResult:
    """Logits for ``block.batch``; keeps what the backward pass needs."""
    block.check_closure()
    lower, upper = block.layers
    vals = params.values
    x = graph.features[lower.sources]
    if x.shape[1] != vals["W0"].shape[0]:
        raise StructuralError(f"features have {x.shape[1]} columns, W0 expects {vals['W0'].shape[0]}")
    masks = [None, None]
    if dropout > 0:
        if rng is None:
            raise ContractError("dropout needs an rng")
        keep = 1.0 - dropout
        masks[0] = (rng.random(x.shape) < keep) / keep
        x = x * masks[0]
    t0 = _layer_forward(x, vals["W0"], vals.get("a0") if params.attentive else None,
                        lower, graph.edge_weights, 0)
    pre = t0.matrix @ t0.z
    _check_finite(pre, 0)
    h = np.maximum(pre, 0.0)
    if dropout > 0:
        keep = 1.0 - dropout
        masks[1] = (rng.random(h.shape) < keep) / keep
        h = h * masks[1]
    t1 = _layer_forward(h, vals["W1"], vals.get("a1") if params.attentive else None,
                        upper, graph.edge_weights, 1)
    logits = t1.matrix @ t1.z
    _check_finite(logits, 1)
    return ForwardResult(logits, upper.targets, params, [t0, t1], pre, masks)


def _layer_backward(tr: LayerTrace, d_out, W, a, grads, wname, aname):
    blk = tr.block
    et, es = blk.edge_target, blk.edge_source
    dz = tr.matrix.T @ d_out
    if a is not None:
        m, d = blk.targets.size, W.shape[1]
        d_coef = np.einsum("ij,ij->i", d_out[et], tr.z[es])
        d_beta = d_coef * blk.mult / blk.q * tr.mass
        d_r = tr.beta * (d_beta - np.bincount(et, tr.beta * d_beta, m)[et])
        d_s = d_r * (tr.score > 0)
        zt = tr.z[blk.self_source]
        grads[aname] += np.concatenate([d_s @ zt[et], d_s @ tr.z[es]])
        np.add.at(dz, es, d_s[:, None] * a[d:])
        np.add.at(dz, blk.self_source[et], d_s[:, None] * a[:d])
    grads[wname] += tr.h_in.T @ dz
    return dz @ W.T


def loss_and_backward(result: ForwardResult, labels, multi_label: bool = False) -> float:
    """Mean cross-entropy; accumulates gradients into ``result.params.grads``."""
    logits = result.logits
    n, c = logits.shape
    labels = np.asarray(labels)
    if multi_label:
        y = labels.astype(np.float64)
        if y.shape != logits.shape or np.any((y != 0) & (y != 1)):
            raise DataError("multi-label targets must be a 0/1 matrix matching the logits")
        loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
        d_logits = (0.5 * (1.0 + np.tanh(0.5 * logits)) - y) / y.size
    else:
        labels = labels.astype(np.int64).ravel()
        if labels.size != n or np.any((labels < 0) | (labels >= c)):
            raise DataError(f"labels must be {n} class ids in [0, {c})")
        shift = logits - logits.max(axis=1, keepdims=True)
        logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), labels].mean())
        d_logits = np.exp(logp)
        d_logits[np.arange(n), labels] -= 1.0
        d_logits /= n
    params = result.params
    vals, grads = params.values, params.grads
    t0, t1 = result.layers
    att = params.attentive
    d_h = _layer_backward(t1, d_logits, vals["W1"], vals.get("a1") if att else None,
                          grads, "W1", "a1")
    if result.masks[1] is not None:
        d_h = d_h * result.masks[1]
    d_pre = d_h * (result.hidden_pre > 0)
    _layer_backward(t0, d_pre, vals["W0"], vals.get("a0") if att else None, grads, "W0", "a0")
    return loss


def adam_step(params: ModelParams, lr: float, weight_decay: float = 0.0) -> None:
    """Adam with decoupled weight decay; clears gradients afterwards."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = ADAM_BETAS
    params.step += 1
    c1 = 1.0 - b1**params.step
    c2 = 1.0 - b2**params.step
    for name, p in params.values.items():
        g = params.grads[name]
        m, v = params.m[name], params.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + ADAM_EPS) + weight_decay * p)
    params.zero_grad()


# ---------------------------------------------------------------------------
# metrics


def metrics(logits, labels, multi_label: bool = False) -> tuple[float, float]:
    """(accuracy, micro-F1).  Multi-label predictions threshold sigmoid at 0.5."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0, 0.0
    if not multi_label:
        acc = float(np.mean(logits.argmax(axis=1) == labels.ravel()))
        return acc, acc
    pred = logits > 0
    truth = labels.astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 1.0
    return float(np.mean(pred == truth)), float(f1)
