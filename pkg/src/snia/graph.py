"""Attributed graph storage, TSV dataset I/O, component extraction and splits.

On-disk layout of a dataset directory (all ids 0-based, tab separated)::

    meta.tsv      N  F  Y            (single line)
    edges.tsv     u  v               (each undirected edge once is enough)
    features.tsv  node  feature      (COO of the ones in the binary matrix)
    labels.tsv    node  label
    splits.tsv    node  train|val|test
    targets.tsv   node               (one id per line)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

MAX_TARGETS = 1000


class ParseError(ValueError):
    """A dataset file line could not be parsed."""


class ValidationError(ValueError):
    """Parsed data violates a graph invariant."""


def _readonly(a, dtype=np.int64):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _rows_to_csr(n_rows, rows, cols):
    """CSR (indptr, indices) from coordinate pairs, sorted and deduplicated."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size:
        n_cols = int(cols.max()) + 1
        keys = np.unique(rows * n_cols + cols)
        rows, cols = keys // n_cols, keys % n_cols
    counts = np.bincount(rows, minlength=n_rows)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, cols


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph with binary bag-of-words node features.

    Adjacency and features are both kept in CSR form; neither stores self
    loops or duplicates and all column indices are sorted per row.
    """

    indptr: np.ndarray
    indices: np.ndarray
    feat_indptr: np.ndarray
    feat_indices: np.ndarray
    labels: np.ndarray
    num_features: int
    num_labels: int

    def __post_init__(self):
        for name in ("indptr", "indices", "feat_indptr", "feat_indices", "labels"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels, num_features, num_labels,
                   validate=True) -> Graph:
        """Build from an edge list and (node, feature) pairs.

        Edges are symmetrized and deduplicated; self loops are dropped with a
        warning.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        loops = edges[:, 0] == edges[:, 1]
        if loops.any():
            log.warning("dropping %d self-loop(s)", int(loops.sum()))
            edges = edges[~loops]
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValidationError(f"edge endpoint outside [0, {num_nodes})")
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        indptr, indices = _rows_to_csr(num_nodes, rows, cols)

        features = np.asarray(features, dtype=np.int64).reshape(-1, 2)
        if features.size and (features[:, 0].min() < 0 or features[:, 0].max() >= num_nodes):
            raise ValidationError(f"feature row outside [0, {num_nodes})")
        if features.size and (features[:, 1].min() < 0 or features[:, 1].max() >= num_features):
            raise ValidationError(f"feature index outside [0, {num_features})")
        feat_indptr, feat_indices = _rows_to_csr(num_nodes, features[:, 0], features[:, 1])

        g = cls(indptr, indices, feat_indptr, feat_indices,
                np.asarray(labels, dtype=np.int64), int(num_features), int(num_labels))
        if validate:
            g.validate()
        return g

    # -- basic properties -------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def num_edges(self) -> int:
        return self.indices.shape[0] // 2

    @cached_property
    def degrees(self) -> np.ndarray:
        return _readonly(np.diff(self.indptr))

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def features_of(self, u: int) -> np.ndarray:
        return self.feat_indices[self.feat_indptr[u]:self.feat_indptr[u + 1]]

    @cached_property
    def dense_features(self) -> np.ndarray:
        X = np.zeros((self.num_nodes, self.num_features))
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.feat_indptr))
        X[rows, self.feat_indices] = 1.0
        X.setflags(write=False)
        return X

    @cached_property
    def feature_matrix(self) -> CSRMatrix:
        return CSRMatrix(self.feat_indptr, self.feat_indices,
                         np.ones(self.feat_indices.shape[0]),
                         (self.num_nodes, self.num_features))

    @cached_property
    def norm_adj(self) -> CSRMatrix:
        """D^-1/2 (A + I) D^-1/2 with the self loops inserted in sorted position."""
        return normalized_adjacency(self.indptr, self.indices)

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once, as (u, v) with u < v, lexicographically sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def validate(self) -> None:
        n = self.num_nodes
        if self.labels.shape != (n,):
            raise ValidationError(f"expected {n} labels, got {self.labels.shape[0]}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise ValidationError(f"label outside [0, {self.num_labels})")
        if self.feat_indptr.shape != (n + 1,):
            raise ValidationError("feature CSR row count mismatch")
        if self.feat_indices.size and self.feat_indices.max() >= self.num_features:
            raise ValidationError(f"feature index outside [0, {self.num_features})")
        for ptr, idx, what in ((self.indptr, self.indices, "adjacency"),
                               (self.feat_indptr, self.feat_indices, "features")):
            if idx.size:
                row_of = np.repeat(np.arange(n), np.diff(ptr))
                step = np.diff(idx)
                same_row = row_of[1:] == row_of[:-1]
                if np.any(step[same_row] <= 0):
                    raise ValidationError(f"{what} columns not strictly increasing")
        if self.indices.size:
            if self.indices.max() >= n:
                raise ValidationError("neighbor id out of range")
            rows = np.repeat(np.arange(n), self.degrees)
            if np.any(rows == self.indices):
                raise ValidationError("self loop stored in adjacency")
            fwd = rows * n + self.indices
            bwd = np.sort(self.indices * n + rows)
            if not np.array_equal(fwd, bwd):
                raise ValidationError("adjacency is not symmetric")


@dataclass(frozen=True, eq=False)
class CSRMatrix:
    """Minimal compressed-row real matrix; the operand type of ``spmm``."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple

    def __matmul__(self, dense):
        dense = np.ascontiguousarray(dense, dtype=np.float64)
        if dense.ndim == 1:
            return self.__matmul__(dense[:, None])[:, 0]
        if dense.shape[0] != self.shape[1]:
            raise ValueError(f"shape mismatch: sparse {self.shape} @ dense {dense.shape}")
        return _kernels.csr_matmul(self.indptr, self.indices, self.data, dense)

    @cached_property
    def T(self) -> CSRMatrix:
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        order = np.lexsort((rows, self.indices))
        counts = np.bincount(self.indices, minlength=self.shape[1])
        indptr = np.zeros(self.shape[1] + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return CSRMatrix(indptr, rows[order], self.data[order], (self.shape[1], self.shape[0]))

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out

    @classmethod
    def from_dense(cls, a) -> CSRMatrix:
        a = np.asarray(a, dtype=np.float64)
        rows, cols = np.nonzero(a)
        indptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=a.shape[0]), out=indptr[1:])
        return cls(indptr, cols.astype(np.int64), a[rows, cols], a.shape)


def normalized_adjacency(indptr, indices) -> CSRMatrix:
    n = indptr.shape[0] - 1
    deg = np.diff(indptr)
    rows = np.concatenate([np.repeat(np.arange(n), deg), np.arange(n)])
    cols = np.concatenate([indices, np.arange(n)])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    dtilde = deg + 1.0
    data = 1.0 / np.sqrt(dtilde[rows] * dtilde[cols])
    new_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg + 1, out=new_ptr[1:])
    return CSRMatrix(new_ptr, cols, data, (n, n))


# --------------------------------------------------------------------------
# injection


@dataclass(frozen=True, eq=False)
class InjectedGraph:
    """``base`` plus one pendant node (id N) wired only to ``target``."""

    base: Graph
    target: int
    features: frozenset = frozenset()
    budget: int | None = None

    def __post_init__(self):
        if not 0 <= self.target < self.base.num_nodes:
            raise ValueError(f"target {self.target} outside graph")
        if self.budget is not None and len(self.features) > self.budget:
            raise ValueError(f"{len(self.features)} features exceed budget {self.budget}")
        if self.features and (min(self.features) < 0
                              or max(self.features) >= self.base.num_features):
            raise ValueError("injected feature index out of range")

    @property
    def injected_id(self) -> int:
        return self.base.num_nodes

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes + 1

    def injected_degree(self) -> int:
        return 1

    def with_feature(self, a: int) -> InjectedGraph:
        return InjectedGraph(self.base, self.target, self.features | {int(a)}, self.budget)

    def with_features(self, feats) -> InjectedGraph:
        return InjectedGraph(self.base, self.target,
                             self.features | {int(a) for a in feats}, self.budget)

    def feature_indices(self) -> np.ndarray:
        return np.array(sorted(self.features), dtype=np.int64)

    def feature_vector(self) -> np.ndarray:
        x = np.zeros(self.base.num_features)
        x[self.feature_indices()] = 1.0
        return x

    def materialize(self):
        """(indptr, indices, dense X) of the explicit (N+1)-node graph."""
        g = self.base
        edges = np.concatenate([g.edge_list(), [[self.target, self.injected_id]]])
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        indptr, indices = _rows_to_csr(self.num_nodes, rows, cols)
        X = np.vstack([g.dense_features, self.feature_vector()[None, :]])
        return indptr, indices, X


# --------------------------------------------------------------------------
# structure ops


def induced_subgraph(g: Graph, nodes) -> Graph:
    """Subgraph on ``nodes`` (sorted ascending), re-indexed densely in that order."""
    nodes = np.sort(np.asarray(nodes, dtype=np.int64))
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(nodes.shape[0])
    edges = g.edge_list()
    keep = (remap[edges[:, 0]] >= 0) & (remap[edges[:, 1]] >= 0)
    edges = remap[edges[keep]]
    frows = np.repeat(np.arange(g.num_nodes), np.diff(g.feat_indptr))
    fkeep = remap[frows] >= 0
    feats = np.stack([remap[frows[fkeep]], g.feat_indices[fkeep]], axis=1)
    return Graph.from_edges(nodes.shape[0], edges, feats, g.labels[nodes],
                            g.num_features, g.num_labels)


def connected_components(g: Graph) -> np.ndarray:
    """Per-node component label, equal to the smallest node id in the component."""
    return _kernels.component_labels(g.indptr, g.indices)


def largest_connected_component(g: Graph) -> Graph:
    """Induced subgraph on the biggest component.

    Ties go to the component whose smallest node id is smallest; node order
    is preserved by the re-indexing.
    """
    comp = connected_components(g)
    sizes = np.bincount(comp, minlength=g.num_nodes)
    best = int(np.argmax(sizes))
    if sizes[best] == g.num_nodes:
        return g
    return induced_subgraph(g, np.flatnonzero(comp == best))


def max_feature_budget(g: Graph) -> int:
    """Largest number of active features on any node (the L0 budget)."""
    counts = np.diff(g.feat_indptr)
    return int(counts.max()) if counts.size else 0


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True, eq=False)
class SplitSpec:
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray
    target_ids: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        for name in ("train_ids", "val_ids", "test_ids", "target_ids"):
            object.__setattr__(self, name, _readonly(np.sort(getattr(self, name))))

    def validate(self, num_nodes: int) -> None:
        allids = np.concatenate([self.train_ids, self.val_ids, self.test_ids])
        if not np.array_equal(np.sort(allids), np.arange(num_nodes)):
            raise ValidationError("train/val/test must partition the node set")
        if not np.isin(self.target_ids, self.test_ids).all():
            raise ValidationError("targets must come from the test set")


def make_splits(g: Graph, seed: int) -> SplitSpec:
    """10/10/80 random split plus up to 1000 targets drawn from the test part."""
    n = g.num_nodes
    if n < 10:
        raise ValueError("need at least 10 nodes to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    k = n // 10
    test = perm[2 * k:]
    targets = rng.choice(test, size=min(MAX_TARGETS, test.shape[0]), replace=False)
    return SplitSpec(perm[:k], perm[k:2 * k], test, targets, seed)


# --------------------------------------------------------------------------
# TSV I/O


def _read_int_rows(path, width):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} tab-separated fields, "
                                 f"got {len(parts)}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer field in {line!r}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, width)


def load_dataset(edge_path, feature_path, label_path, meta_path=None) -> Graph:
    """Read a dataset from its TSV files.

    Without ``meta_path`` the sizes are inferred from the largest ids seen.
    """
    edges = _read_int_rows(edge_path, 2)
    feats = _read_int_rows(feature_path, 2)
    labs = _read_int_rows(label_path, 2)
    if meta_path is not None and Path(meta_path).exists():
        meta = _read_int_rows(meta_path, 3)
        if meta.shape[0] != 1:
            raise ParseError(f"{meta_path}: expected a single line")
        n, f, y = (int(v) for v in meta[0])
    else:
        n = int(labs[:, 0].max()) + 1 if labs.size else 0
        f = int(feats[:, 1].max()) + 1 if feats.size else 0
        y = int(labs[:, 1].max()) + 1 if labs.size else 0
    if labs.size and (labs[:, 0].min() < 0 or labs[:, 0].max() >= n):
        raise ValidationError(f"{label_path}: node id outside [0, {n})")
    labels = np.full(n, -1, dtype=np.int64)
    labels[labs[:, 0]] = labs[:, 1]
    if np.any(labels < 0):
        raise ValidationError(f"{label_path}: {int((labels < 0).sum())} node(s) without a label")
    return Graph.from_edges(n, edges, feats, labels, f, y)


def load_dataset_dir(directory) -> Graph:
    d = Path(directory)
    return load_dataset(d / "edges.tsv", d / "features.tsv", d / "labels.tsv", d / "meta.tsv")


def write_dataset(g: Graph, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.tsv").write_text(f"{g.num_nodes}\t{g.num_features}\t{g.num_labels}\n")
    _write_pairs(d / "edges.tsv", g.edge_list())
    rows = np.repeat(np.arange(g.num_nodes), np.diff(g.feat_indptr))
    _write_pairs(d / "features.tsv", np.stack([rows, g.feat_indices], axis=1))
    _write_pairs(d / "labels.tsv", np.stack([np.arange(g.num_nodes), g.labels], axis=1))


def _write_pairs(path, pairs):
    with open(path, "w") as fh:
        fh.writelines(f"{a}\t{b}\n" for a, b in pairs.tolist())


def write_splits(split: SplitSpec, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    roles = [(int(u), r) for r, ids in (("train", split.train_ids), ("val", split.val_ids),
                                        ("test", split.test_ids)) for u in ids]
    roles.sort()
    with open(d / "splits.tsv", "w") as fh:
        fh.writelines(f"{u}\t{r}\n" for u, r in roles)
    with open(d / "targets.tsv", "w") as fh:
        fh.writelines(f"{int(u)}\n" for u in split.target_ids)


def read_splits(directory) -> SplitSpec:
    d = Path(directory)
    by_role = {"train": [], "val": [], "test": []}
    with open(d / "splits.tsv") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in by_role:
                raise ParseError(f"{d / 'splits.tsv'}:{lineno}: bad line {line!r}")
            by_role[parts[1]].append(int(parts[0]))
    targets = []
    with open(d / "targets.tsv") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                try:
                    targets.append(int(line))
                except ValueError:
                    raise ParseError(f"{d / 'targets.tsv'}:{lineno}: bad id {line!r}") from None
    return SplitSpec(np.array(by_role["train"]), np.array(by_role["val"]),
                     np.array(by_role["test"]), np.array(targets))
