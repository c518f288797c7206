"""Converters from public citation-network dumps to :class:`~snia.graph.Graph`.

Two raw layouts are understood:

* ``cora``: ``cora.content`` (paper id, 0/1 word columns, class name) and
  ``cora.cites`` (cited, citing).  Labels are numbered by sorted class name.
* ``planetoid``: the pickled ``ind.<name>.{x,tx,allx,y,ty,ally,graph}`` files
  plus ``ind.<name>.test.index``.  Nodes with an all-zero label row (15 of
  them in Citeseer) are dropped before anything else.
"""
import logging
import pickle
import warnings
from pathlib import Path

import numpy as np

from .graph import Graph, induced_subgraph, largest_connected_component

log = logging.getLogger(__name__)


def read_cora(raw_dir) -> Graph:
    raw_dir = Path(raw_dir)
    ids, labels, feat_rows, feat_cols = [], [], [], []
    with open(raw_dir / "cora.content") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise ValueError(f"cora.content:{lineno}: too few columns")
            row = len(ids)
            ids.append(parts[0])
            labels.append(parts[-1])
            bits = np.array(parts[1:-1], dtype=np.int64)
            on = np.flatnonzero(bits)
            feat_rows.extend([row] * on.shape[0])
            feat_cols.extend(on.tolist())
            num_features = bits.shape[0]
    index = {k: i for i, k in enumerate(ids)}
    classes = sorted(set(labels))
    y = np.array([classes.index(c) for c in labels])

    edges, skipped = [], 0
    with open(raw_dir / "cora.cites") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a in index and b in index:
                edges.append((index[a], index[b]))
            else:
                skipped += 1
    if skipped:
        log.info("skipped %d citation(s) to unknown papers", skipped)
    return Graph.from_edges(len(ids), edges, np.stack([feat_rows, feat_cols], axis=1),
                            y, num_features, len(classes))


def _load_pickle(path):
    with open(path, "rb") as fh, warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        return pickle.load(fh, encoding="latin1")


def read_planetoid(raw_dir, name: str, label_order=None) -> Graph:
    """Planetoid pickles -> Graph.

    ``label_order`` optionally renumbers classes: new label ``k`` is the
    class at one-hot column ``label_order[k]``.
    """
    raw_dir = Path(raw_dir)
    get = {k: _load_pickle(raw_dir / f"ind.{name}.{k}")
           for k in ("tx", "ty", "allx", "ally", "graph")}
    test_idx = [int(l) for l in (raw_dir / f"ind.{name}.test.index").read_text().split()]
    graph = get["graph"]
    n = len(graph)
    allx, ally = get["allx"], np.asarray(get["ally"])
    tx, ty = get["tx"], np.asarray(get["ty"])
    num_features = allx.shape[1]

    X = np.zeros((n, num_features), dtype=bool)
    Y = np.zeros((n, ally.shape[1]))
    X[:allx.shape[0]] = _todense(allx) > 0
    Y[:ally.shape[0]] = ally
    X[test_idx] = _todense(tx) > 0
    Y[test_idx] = ty
    labelled = Y.sum(axis=1) > 0
    labels = np.where(labelled, Y.argmax(axis=1), 0)
    if label_order is not None:
        inverse = np.empty(len(label_order), dtype=np.int64)
        inverse[np.asarray(label_order)] = np.arange(len(label_order))
        labels = inverse[labels]

    edges = [(u, v) for u, vs in graph.items() for v in vs]
    rows, cols = np.nonzero(X)
    g = Graph.from_edges(n, edges, np.stack([rows, cols], axis=1), labels,
                         num_features, Y.shape[1])
    if not labelled.all():
        log.info("dropping %d unlabelled node(s)", int((~labelled).sum()))
        g = induced_subgraph(g, np.flatnonzero(labelled))
    return g


def _todense(m):
    return m.toarray() if hasattr(m, "toarray") else np.asarray(m)


def prepare(g: Graph) -> Graph:
    """Restrict to the largest connected component."""
    return largest_connected_component(g)
