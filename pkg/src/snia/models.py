"""Victim classifiers: GCN, SGC, the linearized surrogate, TAGCN and GCNII.

All models map a graph to row-stochastic class probabilities.  Training and
gradient queries run through :mod:`snia.autodiff`; the per-target queries made
during an attack use a cached two-hop evaluator for the three two-layer
models (GCN, SGC with K=2, surrogate) and a full forward otherwise.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from . import autodiff as ad
from .checkpoint import load_tensors, save_tensors
from .graph import CSRMatrix, Graph, InjectedGraph, SplitSpec, normalized_adjacency

log = logging.getLogger(__name__)

KINDS = ("gcn", "sgc", "surrogate", "tagcn", "gcnii")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GnnArchitecture:
    kind: str
    layers: int = 2
    hidden_dim: int = 64
    activation: str = "relu"
    extra: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}; choose from {KINDS}")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be >= 1")

    @classmethod
    def default(cls, kind: str) -> GnnArchitecture:
        kind = kind.lower()
        if kind == "gcn":
            return cls("gcn")
        if kind == "sgc":
            return cls("sgc", layers=1, hidden_dim=1, activation="none", extra={"K": 2})
        if kind == "surrogate":
            return cls("surrogate", activation="none")
        if kind == "tagcn":
            return cls("tagcn", extra={"hops": 3})
        if kind == "gcnii":
            return cls("gcnii", layers=8, extra={"alpha": 0.1, "lambda": 0.5})
        raise ValueError(f"unknown architecture {kind!r}; choose from {KINDS}")


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(arch: GnnArchitecture, num_features: int, num_labels: int, rng) -> dict:
    F, Y, h = num_features, num_labels, arch.hidden_dim
    if arch.kind in ("gcn", "surrogate"):
        return {"W1": _glorot(rng, F, h), "W2": _glorot(rng, h, Y)}
    if arch.kind == "sgc":
        return {"W": _glorot(rng, F, Y)}
    if arch.kind == "tagcn":
        hops = arch.extra.get("hops", 3)
        dims = [F] + [h] * (arch.layers - 1) + [Y]
        return {f"W{l + 1}_{k}": _glorot(rng, dims[l], dims[l + 1])
                for l in range(arch.layers) for k in range(hops + 1)}
    if arch.kind == "gcnii":
        p = {"W_in": _glorot(rng, F, h), "W_out": _glorot(rng, h, Y)}
        for l in range(1, arch.layers + 1):
            p[f"W{l}"] = _glorot(rng, h, h)
        return p
    raise AssertionError(arch.kind)


def forward_logits(arch: GnnArchitecture, P: dict, adj: CSRMatrix, X: CSRMatrix,
                   x_inj=None) -> ad.Tensor:
    """Logits for every node of the graph described by ``adj``.

    ``X`` holds the original nodes' features.  When ``x_inj`` (a 1xF tensor)
    is given it is appended as the last node, and ``adj`` must already
    include that node.
    """

    def first(W):
        out = ad.spmm(X, W)
        if x_inj is not None:
            out = ad.stack_rows(out, ad.matmul(x_inj, W))
        return out

    kind = arch.kind
    if kind == "gcn":
        h = ad.relu(ad.spmm(adj, first(P["W1"])))
        return ad.spmm(adj, ad.matmul(h, P["W2"]))
    if kind == "sgc":
        h = first(P["W"])
        for _ in range(arch.extra.get("K", 2)):
            h = ad.spmm(adj, h)
        return h
    if kind == "surrogate":
        h = ad.matmul(first(P["W1"]), P["W2"])
        return ad.spmm(adj, ad.spmm(adj, h))
    if kind == "tagcn":
        hops = arch.extra.get("hops", 3)
        h = None
        for l in range(arch.layers):
            if l == 0:
                # A^k X W_k is computed as A^k (X W_k) to stay narrow
                out = first(P["W1_0"])
                for k in range(1, hops + 1):
                    z = first(P[f"W1_{k}"])
                    for _ in range(k):
                        z = ad.spmm(adj, z)
                    out = ad.add(out, z)
            else:
                out = ad.matmul(h, P[f"W{l + 1}_0"])
                hk = h
                for k in range(1, hops + 1):
                    hk = ad.spmm(adj, hk)
                    out = ad.add(out, ad.matmul(hk, P[f"W{l + 1}_{k}"]))
            h = ad.relu(out) if l < arch.layers - 1 else out
        return h
    if kind == "gcnii":
        alpha = arch.extra.get("alpha", 0.1)
        lam = arch.extra.get("lambda", 0.5)
        h0 = ad.relu(first(P["W_in"]))
        h = h0
        for l in range(1, arch.layers + 1):
            beta = float(np.log(lam / l + 1.0))
            s = ad.add(ad.scale(ad.spmm(adj, h), 1.0 - alpha), ad.scale(h0, alpha))
            h = ad.relu(ad.add(ad.scale(s, 1.0 - beta), ad.scale(ad.matmul(s, P[f"W{l}"]), beta)))
        return ad.matmul(h, P["W_out"])
    raise AssertionError(kind)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(eq=False)
class VictimModel:
    """Frozen classifier parameters bound to the graph they were trained on."""

    arch: GnnArchitecture
    params: dict
    graph: Graph
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        for a in self.params.values():
            a.setflags(write=False)

    def tensors(self, requires_grad=False) -> dict:
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    # -- clean graph ---------------------------------------------------------
    @cached_property
    def clean_logits(self) -> np.ndarray:
        g = self.graph
        out = forward_logits(self.arch, self.tensors(), g.norm_adj, g.feature_matrix).data
        out.setflags(write=False)
        return out

    def predict_proba(self) -> np.ndarray:
        return _softmax(self.clean_logits)

    def predict(self) -> np.ndarray:
        return self.clean_logits.argmax(axis=1)

    def accuracy(self, ids) -> float:
        ids = np.asarray(ids)
        return float((self.predict()[ids] == self.graph.labels[ids]).mean())

    # -- injected graph ------------------------------------------------------
    def injected_logits(self, ig: InjectedGraph) -> np.ndarray:
        """Full forward over the explicit (N+1)-node graph."""
        indptr, indices, _ = ig.materialize()
        adj = normalized_adjacency(indptr, indices)
        x = ad.Tensor(ig.feature_vector())
        return forward_logits(self.arch, self.tensors(), adj, self.graph.feature_matrix, x).data

    @property
    def has_local_path(self) -> bool:
        k = self.arch.kind
        return k in ("gcn", "surrogate") or (k == "sgc" and self.arch.extra.get("K", 2) == 2)

    @cached_property
    def _local(self):
        g = self.graph
        p = self.params
        if self.arch.kind == "gcn":
            first, second, relu = p["W1"], p["W2"], True
        elif self.arch.kind == "sgc":
            first, second, relu = p["W"], None, False
        elif self.arch.kind == "surrogate":
            first, second, relu = p["W1"] @ p["W2"], None, False
        else:
            raise AssertionError("no local path for " + self.arch.kind)
        xw = g.feature_matrix @ first
        axw = g.norm_adj @ xw
        dtilde = g.degrees + 1.0
        for a in (xw, axw, dtilde):
            a.setflags(write=False)
        return first, second, relu, xw, axw, dtilde

    def _target_logits_local(self, target, feats, has_inj):
        first, second, relu, xw, axw, dtilde = self._local
        g = self.graph
        inj_xw = first[feats].sum(axis=0) if feats.size else np.zeros(first.shape[1])
        agg = _kernels.target_aggregate(g.indptr, g.indices, dtilde, xw, axw, int(target),
                                        inj_xw, bool(has_inj), relu)
        return agg @ second if second is not None else agg

    def target_logits(self, ig: InjectedGraph) -> np.ndarray:
        if self.has_local_path:
            return self._target_logits_local(ig.target, ig.feature_indices(), True)
        return self.injected_logits(ig)[ig.target]

    def target_proba(self, ig: InjectedGraph) -> np.ndarray:
        return _softmax(self.target_logits(ig))

    def target_log_proba(self, ig: InjectedGraph) -> np.ndarray:
        return _log_softmax(self.target_logits(ig))

    # -- gradients -------------------------------------------------------------
    def target_prob_gradient(self, ig: InjectedGraph, label: int) -> np.ndarray:
        """d P(label | target) / d x_inj, treating the feature row as continuous."""
        x = ad.Tensor(ig.feature_vector(), requires_grad=True)
        if self.has_local_path:
            logits = self._local_tensor(ig.target, x)
        else:
            indptr, indices, _ = ig.materialize()
            adj = normalized_adjacency(indptr, indices)
            all_logits = forward_logits(self.arch, self.tensors(), adj,
                                        self.graph.feature_matrix, x)
            logits = ad.take_rows(all_logits, [ig.target])
        prob = ad.pick(ad.softmax_row(logits), [label])
        prob.backward()
        return x.grad[0].copy()

    def _local_tensor(self, t, x):
        first, second, relu, xw, axw, dtilde = self._local
        g = self.graph
        nbrs = g.neighbors(t)
        dt0 = dtilde[t]
        dt = dt0 + 1.0
        inv_u = 1.0 / np.sqrt(dtilde[nbrs])
        c_t = xw[t] / dt + (inv_u[:, None] * xw[nbrs]).sum(axis=0) / np.sqrt(dt)
        p_nb = axw[nbrs] + ((1.0 / np.sqrt(dt) - 1.0 / np.sqrt(dt0)) * inv_u)[:, None] * xw[t]
        if relu:
            p_nb = np.maximum(p_nb, 0.0)
        nb_const = (p_nb * (inv_u / np.sqrt(dt))[:, None]).sum(axis=0)
        c_inj = xw[t] / np.sqrt(2.0 * dt)

        act = ad.relu if relu else (lambda z: z)
        inj = ad.matmul(x, first)
        p_t = ad.add(ad.scale(inj, 1.0 / np.sqrt(2.0 * dt)), c_t[None, :])
        p_i = ad.add(ad.scale(inj, 0.5), c_inj[None, :])
        agg = ad.add(ad.add(ad.scale(act(p_t), 1.0 / dt),
                            ad.scale(act(p_i), 1.0 / np.sqrt(2.0 * dt))), nb_const[None, :])
        return ad.matmul(agg, second) if second is not None else agg

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        meta = {"arch": asdict(self.arch), "num_nodes": self.graph.num_nodes,
                "num_features": self.graph.num_features, "num_labels": self.graph.num_labels}
        save_tensors(path, self.params, meta)

    @classmethod
    def load(cls, path, graph: Graph) -> VictimModel:
        params, meta = load_tensors(path)
        if (meta["num_features"], meta["num_labels"]) != (graph.num_features, graph.num_labels):
            raise ValueError(f"{path}: checkpoint dims F={meta['num_features']} "
                             f"Y={meta['num_labels']} do not match the graph")
        arch = GnnArchitecture(**meta["arch"])
        return cls(arch, params, graph)


def query_target_prob(model: VictimModel, ig: InjectedGraph, label: int) -> float:
    return float(model.target_proba(ig)[label])


class BlackBoxVictim:
    """Query-only handle on a victim: probabilities go out, parameters never do."""

    def __init__(self, model: VictimModel):
        self._model = model
        self._lock = threading.Lock()
        self.queries = 0

    @property
    def graph(self) -> Graph:
        return self._model.graph

    @property
    def num_labels(self) -> int:
        return self._model.graph.num_labels

    def _count(self, n=1):
        with self._lock:
            self.queries += n

    def target_proba(self, ig: InjectedGraph) -> np.ndarray:
        self._count()
        return self._model.target_proba(ig)

    def target_log_proba(self, ig: InjectedGraph) -> np.ndarray:
        self._count()
        return self._model.target_log_proba(ig)

    def target_prob(self, ig: InjectedGraph, label: int) -> float:
        return float(self.target_proba(ig)[label])

    def clean_proba(self) -> np.ndarray:
        self._count()
        return self._model.predict_proba()

    def clean_predictions(self) -> np.ndarray:
        return self.clean_proba().argmax(axis=1)


# Per-architecture training protocol.  A tuple of weight decays means "pick the
# one with the best validation accuracy".
TRAIN_DEFAULTS = {
    "gcn": {"epochs": 300, "lr": 0.01, "weight_decay": 5e-4},
    "surrogate": {"epochs": 300, "lr": 0.01, "weight_decay": 5e-4},
    "sgc": {"epochs": 100, "lr": 0.2,
            "weight_decay": (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2)},
    "tagcn": {"epochs": 300, "lr": 0.01, "weight_decay": 5e-4},
    "gcnii": {"epochs": 300, "lr": 0.01, "weight_decay": 5e-4},
}


def train_victim(g: Graph, split: SplitSpec, arch: GnnArchitecture, seed: int,
                 epochs=None, lr=None, weight_decay=None) -> VictimModel:
    """Minimize training cross-entropy; return the best-validation checkpoint.

    Unset hyper-parameters come from ``TRAIN_DEFAULTS``.  When
    ``weight_decay`` is a sequence, one run per value is made (same seed) and
    the run with the highest validation accuracy wins, earliest on ties.
    """
    d = TRAIN_DEFAULTS[arch.kind]
    epochs = d["epochs"] if epochs is None else epochs
    lr = d["lr"] if lr is None else lr
    weight_decay = d["weight_decay"] if weight_decay is None else weight_decay
    if np.ndim(weight_decay) == 0:
        return _train_once(g, split, arch, seed, epochs, lr, float(weight_decay))
    best = None
    for wd in weight_decay:
        m = _train_once(g, split, arch, seed, epochs, lr, float(wd))
        score = max(h["val_acc"] for h in m.history)
        log.info("%s wd=%g: val acc %.4f", arch.kind, wd, score)
        if best is None or score > best[0]:
            best = (score, m)
    return best[1]


def _train_once(g, split, arch, seed, epochs, lr, weight_decay):
    rng = np.random.default_rng(seed)
    P = {k: ad.Tensor(v, requires_grad=True, name=k)
         for k, v in init_params(arch, g.num_features, g.num_labels, rng).items()}
    params = list(P.values())
    state = ad.AdamState(lr=lr, weight_decay=weight_decay)
    adj, X = g.norm_adj, g.feature_matrix
    train, val = split.train_ids, split.val_ids
    y_train = g.labels[train]

    best = (-1.0, None, -1)
    history = []
    for epoch in range(epochs):
        logits = forward_logits(arch, P, adj, X)
        val_acc = float((logits.data[val].argmax(axis=1) == g.labels[val]).mean())
        if val_acc > best[0]:
            best = (val_acc, {k: t.data.copy() for k, t in P.items()}, epoch)
        logp = ad.log_softmax_row(ad.take_rows(logits, train))
        loss = ad.scale(ad.mean(ad.pick(logp, y_train)), -1.0)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        ad.zero_grad(params)
        loss.backward()
        ad.adam_step(params, state)
        history.append({"epoch": epoch, "loss": loss.item(), "val_acc": val_acc,
                        "weight_decay": weight_decay})

    logits = forward_logits(arch, P, adj, X)
    val_acc = float((logits.data[val].argmax(axis=1) == g.labels[val]).mean())
    if val_acc > best[0]:
        best = (val_acc, {k: t.data.copy() for k, t in P.items()}, epochs)
    log.info("%s: best val acc %.4f at epoch %d", arch.kind, best[0], best[2])
    return VictimModel(arch, best[1], g, history)
