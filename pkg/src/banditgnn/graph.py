"""Graph storage, edge-weight construction, text ingestion and synthetic graphs.

Graphs are held in CSR form with self-loops and both edge directions
materialized.  Each CSR row is sorted by neighbor id, so the position of an
arm inside a vertex's row is stable and can be used to index per-edge
bandit state.
"""

from __future__ import annotations

import enum
import gzip
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError, StructuralError

SPLIT_NAMES = ("train", "val", "test")
_SPLIT_TOKENS = {"train", "val", "test", "none"}
_FEATURE_NORM_TOL = 1e-12


class WeightMode(str, enum.Enum):
    ROW_NORMALIZED = "row_normalized"
    SYMMETRIC_NORMALIZED = "symmetric_normalized"
    ATTENTIVE = "attentive"


@dataclass
class Graph:
    num_nodes: int
    row_offsets: np.ndarray
    neighbor_ids: np.ndarray
    edge_weights: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    split_masks: dict[str, np.ndarray]
    weight_mode: WeightMode = WeightMode.ROW_NORMALIZED
    _edge_rows: np.ndarray | None = field(default=None, repr=False, compare=False)
    _norms_sq: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_edges(self) -> int:
        return int(self.neighbor_ids.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        """Degree of every vertex counting its self-loop."""
        return np.diff(self.row_offsets)

    @property
    def multi_label(self) -> bool:
        return self.labels.ndim == 2

    @property
    def num_classes(self) -> int:
        if self.multi_label:
            return int(self.labels.shape[1])
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def edge_rows(self) -> np.ndarray:
        """Owning vertex of every CSR edge slot."""
        if self._edge_rows is None:
            self._edge_rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        return self._edge_rows

    @property
    def norms_sq(self) -> np.ndarray:
        """Squared L2 norm of every feature row."""
        if self._norms_sq is None:
            self._norms_sq = np.einsum("ij,ij->i", self.features, self.features)
        return self._norms_sq

    def row(self, i: int) -> slice:
        return slice(int(self.row_offsets[i]), int(self.row_offsets[i + 1]))

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_ids[self.row(i)]

    def split_ids(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split_masks[name])

    def edge_index(self, i: int, j: int) -> int:
        """CSR slot of edge (i, j); raises KeyError when absent."""
        sl = self.row(i)
        row = self.neighbor_ids[sl]
        pos = int(np.searchsorted(row, j))
        if pos >= row.size or row[pos] != j:
            raise KeyError((i, j))
        return sl.start + pos

    def with_weights(self, mode: WeightMode | str) -> "Graph":
        mode = WeightMode(mode)
        return Graph(
            num_nodes=self.num_nodes,
            row_offsets=self.row_offsets,
            neighbor_ids=self.neighbor_ids,
            edge_weights=compute_weights(self, mode),
            features=self.features,
            labels=self.labels,
            split_masks=self.split_masks,
            weight_mode=mode,
        )

    def check(self) -> None:
        """Assert the structural invariants; raises StructuralError."""
        ro = self.row_offsets
        if ro.shape != (self.num_nodes + 1,) or ro[0] != 0:
            raise StructuralError("row_offsets must have length num_nodes+1 and start at 0")
        if np.any(np.diff(ro) < 0):
            raise StructuralError("row_offsets must be nondecreasing")
        if ro[-1] != self.neighbor_ids.size:
            raise StructuralError("last row offset must equal the number of edges")
        if self.neighbor_ids.size and (
            self.neighbor_ids.min() < 0 or self.neighbor_ids.max() >= self.num_nodes
        ):
            raise StructuralError("neighbor id out of range")
        rows = self.edge_rows
        if np.any(np.bincount(rows[self.neighbor_ids == rows], minlength=self.num_nodes) != 1):
            raise StructuralError("every row must contain its own node id exactly once")
        same_row = rows[1:] == rows[:-1]
        if np.any(self.neighbor_ids[1:][same_row] <= self.neighbor_ids[:-1][same_row]):
            raise StructuralError("rows must be strictly increasing (no duplicate neighbors)")
        if self.features.shape[0] != self.num_nodes or self.labels.shape[0] != self.num_nodes:
            raise StructuralError("features/labels row count differs from num_nodes")
        masks = np.stack([self.split_masks[s] for s in SPLIT_NAMES])
        if np.any(masks.sum(axis=0) > 1):
            raise StructuralError("split masks overlap")


def build_graph(
    num_nodes: int,
    edges: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    splits: np.ndarray | dict[str, np.ndarray],
    weight_mode: WeightMode | str = WeightMode.ROW_NORMALIZED,
    normalize_features: bool = True,
) -> Graph:
    """Symmetrize, deduplicate and self-loop an edge list into a Graph.

    ``splits`` is either a dict of boolean masks or a per-node array of
    split tokens (``train``/``val``/``test``/``none``).
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise StructuralError(f"edge endpoint out of range [0, {num_nodes})")
    loops = np.arange(num_nodes, dtype=np.int64)
    src = np.concatenate([edges[:, 0], edges[:, 1], loops])
    dst = np.concatenate([edges[:, 1], edges[:, 0], loops])
    key = np.unique(src * num_nodes + dst)
    src, dst = key // num_nodes, key % num_nodes
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])

    features = np.asarray(features, dtype=np.float64)
    if normalize_features:
        features = normalize_rows(features)
    if not isinstance(splits, dict):
        tokens = np.asarray(splits)
        splits = {s: tokens == s for s in SPLIT_NAMES}
    g = Graph(
        num_nodes=num_nodes,
        row_offsets=offsets,
        neighbor_ids=dst.astype(np.int64),
        edge_weights=np.empty(0),
        features=features,
        labels=np.asarray(labels, dtype=np.int64),
        split_masks={s: np.asarray(splits[s], dtype=bool) for s in SPLIT_NAMES},
        weight_mode=WeightMode(weight_mode),
    )
    g.edge_weights = compute_weights(g, g.weight_mode)
    g.check()
    return g


def normalize_rows(features: np.ndarray) -> np.ndarray:
    """Scale each nonzero row to unit Euclidean norm.

    Rows already within 1e-12 of unit norm are left untouched so that
    normalizing twice is bit-for-bit idempotent.
    """
    norms = np.linalg.norm(features, axis=1)
    scale = np.ones_like(norms)
    fix = (norms > 0) & (np.abs(norms - 1.0) > _FEATURE_NORM_TOL)
    scale[fix] = norms[fix]
    return features / scale[:, None]


def compute_weights(graph: Graph, mode: WeightMode | str) -> np.ndarray:
    """Fixed aggregation weights per CSR edge.

    row_normalized gives 1/deg(i), symmetric_normalized gives
    1/sqrt(deg(i) deg(j)); attentive returns NaN sentinels because the
    weights come from the attention parameters instead.
    """
    mode = WeightMode(mode)
    deg = graph.degrees.astype(np.float64)
    if np.any(deg == 0):
        raise StructuralError("zero-degree row: self-loops missing")
    rows = graph.edge_rows
    if mode is WeightMode.ROW_NORMALIZED:
        return 1.0 / deg[rows]
    if mode is WeightMode.SYMMETRIC_NORMALIZED:
        return 1.0 / np.sqrt(deg[rows] * deg[graph.neighbor_ids])
    return np.full(graph.num_edges, np.nan)


# ---------------------------------------------------------------------------
# text I/O


def _open_text(path, mode="rt"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode, encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _read_lines(path):
    with _open_text(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield line_no, line


def _read_edges(path) -> np.ndarray:
    pairs = []
    for line_no, line in _read_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(path, line_no, f"expected 'src dst', got {line!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ParseError(path, line_no, f"non-integer node id in {line!r}") from None
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _read_matrix(path, dtype, what):
    rows = []
    width = None
    for line_no, line in _read_lines(path):
        try:
            row = [dtype(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(path, line_no, f"malformed {what} row") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(path, line_no, f"expected {width} values, got {len(row)}")
        rows.append(row)
    return rows, width


def load_graph(
    edges_path,
    features_path,
    labels_path,
    splits_path,
    weight_mode: WeightMode | str = WeightMode.ROW_NORMALIZED,
    normalize_features: bool = True,
) -> Graph:
    """Read the four whitespace-separated text files into a Graph.

    Files ending in ``.gz`` are decompressed transparently.
    """
    feat_rows, _ = _read_matrix(features_path, float, "feature")
    num_nodes = len(feat_rows)
    features = np.array(feat_rows, dtype=np.float64).reshape(num_nodes, -1)

    label_rows, width = _read_matrix(labels_path, int, "label")
    if len(label_rows) != num_nodes:
        raise StructuralError(
            f"{labels_path}: {len(label_rows)} label rows for {num_nodes} feature rows"
        )
    labels = np.array(label_rows, dtype=np.int64)
    if width == 1:
        labels = labels[:, 0]
    elif labels.size and not np.isin(labels, (0, 1)).all():
        raise ParseError(labels_path, 1, "multi-label rows must be 0/1")

    tokens = []
    for line_no, line in _read_lines(splits_path):
        if line not in _SPLIT_TOKENS:
            raise ParseError(splits_path, line_no, f"unknown split token {line!r}")
        tokens.append(line)
    if len(tokens) != num_nodes:
        raise StructuralError(f"{splits_path}: {len(tokens)} split rows for {num_nodes} nodes")

    edges = _read_edges(edges_path)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1)][0]
        raise StructuralError(f"{edges_path}: edge {tuple(bad)} references node outside [0, {num_nodes})")
    return build_graph(
        num_nodes, edges, features, labels, np.array(tokens), weight_mode, normalize_features
    )


def dataset_paths(directory) -> tuple[Path, Path, Path, Path]:
    """Locate edges/features/labels/splits files (plain or .gz) in a directory."""
    directory = Path(directory)
    found = []
    for stem in ("edges", "features", "labels", "splits"):
        for name in (f"{stem}.txt", f"{stem}.txt.gz"):
            if (directory / name).exists():
                found.append(directory / name)
                break
        else:
            raise FileNotFoundError(f"{directory}: missing {stem}.txt")
    return tuple(found)


def load_dataset(directory, weight_mode=WeightMode.ROW_NORMALIZED, normalize_features=True) -> Graph:
    return load_graph(*dataset_paths(directory), weight_mode=weight_mode,
                      normalize_features=normalize_features)


def save_graph(graph: Graph, directory, compress_features: bool = False) -> tuple[Path, ...]:
    """Write the graph as the four text files accepted by :func:`load_graph`.

    Each undirected edge is written once (i < j); self-loops are implied.
    Floats use shortest round-trip repr, so reloading is exact.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows, cols = graph.edge_rows, graph.neighbor_ids
    keep = rows < cols
    paths = (
        directory / "edges.txt",
        directory / ("features.txt.gz" if compress_features else "features.txt"),
        directory / "labels.txt",
        directory / "splits.txt",
    )
    with _open_text(paths[0], "wt") as fh:
        fh.writelines(f"{i} {j}\n" for i, j in zip(rows[keep].tolist(), cols[keep].tolist()))
    with _open_text(paths[1], "wt") as fh:
        for row in graph.features.tolist():
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
    with _open_text(paths[2], "wt") as fh:
        if graph.multi_label:
            fh.writelines(" ".join(map(str, r)) + "\n" for r in graph.labels.tolist())
        else:
            fh.writelines(f"{c}\n" for c in graph.labels.tolist())
    tokens = np.full(graph.num_nodes, "none", dtype=object)
    for s in SPLIT_NAMES:
        tokens[graph.split_masks[s]] = s
    with _open_text(paths[3], "wt") as fh:
        fh.writelines(f"{t}\n" for t in tokens)
    return paths


def _fmt(v: float) -> str:
    # integral values (bag-of-words) stay compact
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


# ---------------------------------------------------------------------------
# synthetic graphs


def generate_synthetic(
    num_nodes: int,
    avg_degree: float,
    num_classes: int,
    feature_dim: int,
    seed: int,
    homophily: float = 0.8,
    feature_noise: float = 1.0,
    split_fractions: tuple[float, float, float] = (0.5, 0.2, 0.3),
    weight_mode: WeightMode | str = WeightMode.ROW_NORMALIZED,
) -> Graph:
    """Stochastic-block graph with class-correlated, unit-norm Gaussian features.

    A fraction ``homophily`` of the expected degree comes from same-class
    pairs, so the intra-class edge probability exceeds the inter-class one
    whenever homophily > 1/num_classes.
    """
    if num_nodes < 2:
        raise ParameterError("num_nodes must be >= 2")
    if avg_degree < 1:
        raise ParameterError("avg_degree must be >= 1")
    if num_classes < 1 or feature_dim < 1:
        raise ParameterError("num_classes and feature_dim must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % num_classes)
    sizes = np.bincount(labels, minlength=num_classes).astype(np.float64)
    intra_pairs = float(np.sum(sizes * (sizes - 1)) / num_nodes)
    inter_pairs = float(num_nodes - 1 - intra_pairs)
    if inter_pairs == 0:
        p_in, p_out = avg_degree / intra_pairs, 0.0
    elif intra_pairs == 0:
        p_in, p_out = 0.0, avg_degree / inter_pairs
    else:
        p_in = homophily * avg_degree / intra_pairs
        p_out = (1 - homophily) * avg_degree / inter_pairs
    if p_in > 1 or p_out > 1:
        raise ParameterError(
            f"edge probability {max(p_in, p_out):.3g} > 1; lower avg_degree or raise num_nodes"
        )
    iu, ju = np.triu_indices(num_nodes, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    centers = rng.normal(size=(num_classes, feature_dim))
    features = centers[labels] + feature_noise * rng.normal(size=(num_nodes, feature_dim))
    features = normalize_rows(features)

    order = rng.permutation(num_nodes)
    n_train = int(round(split_fractions[0] * num_nodes))
    n_val = int(round(split_fractions[1] * num_nodes))
    n_test = min(int(round(split_fractions[2] * num_nodes)), num_nodes - n_train - n_val)
    tokens = np.full(num_nodes, "none", dtype=object)
    tokens[order[:n_train]] = "train"
    tokens[order[n_train:n_train + n_val]] = "val"
    tokens[order[n_train + n_val:n_train + n_val + n_test]] = "test"
    return build_graph(num_nodes, edges, features, labels, tokens, weight_mode,
                       normalize_features=False)


# ---------------------------------------------------------------------------
# Cora


CORA_SPLIT_SIZES = (1208, 500, 1000)


def convert_linqs_cora(content_path, cites_path, out_dir, seed: int = 0) -> tuple[Path, ...]:
    """Convert the LINQS ``cora.content``/``cora.cites`` pair to the text format.

    Paper ids are renumbered in content-file order, class names are mapped
    to ids in sorted order, and nodes are split 1208/500/1000 by a seeded
    permutation.  Features are written gzipped.
    """
    ids, feats, names = [], [], []
    for line_no, line in _read_lines(content_path):
        parts = line.split()
        if len(parts) < 3:
            raise ParseError(content_path, line_no, "expected '<id> <features...> <class>'")
        ids.append(parts[0])
        feats.append([int(t) for t in parts[1:-1]])
        names.append(parts[-1])
    index = {pid: n for n, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names], dtype=np.int64)
    edges = []
    for line_no, line in _read_lines(cites_path):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(cites_path, line_no, "expected two paper ids")
        if parts[0] in index and parts[1] in index:
            edges.append((index[parts[1]], index[parts[0]]))
    n = len(ids)
    n_train, n_val, n_test = CORA_SPLIT_SIZES
    if n_train + n_val + n_test > n:
        raise StructuralError(f"Cora split needs {sum(CORA_SPLIT_SIZES)} nodes, found {n}")
    order = np.random.default_rng(seed).permutation(n)
    tokens = np.full(n, "none", dtype=object)
    tokens[order[:n_train]] = "train"
    tokens[order[n_train:n_train + n_val]] = "val"
    tokens[order[n_train + n_val:n_train + n_val + n_test]] = "test"
    g = build_graph(n, np.array(edges), np.array(feats, dtype=np.float64), labels, tokens,
                    normalize_features=False)
    return save_graph(g, out_dir, compress_features=True)


def bundled_cora_dir() -> Path:
    return Path(str(resources.files("banditgnn") / "data" / "cora"))


def load_cora(weight_mode=WeightMode.SYMMETRIC_NORMALIZED, normalize_features=True) -> Graph:
    """The bundled Cora citation graph (2708 nodes, 7 classes)."""
    directory = os.environ.get("BANDITGNN_CORA_DIR") or bundled_cora_dir()
    return load_dataset(directory, weight_mode, normalize_features)
