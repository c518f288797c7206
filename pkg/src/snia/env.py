"""Single-node injection as a sequential decision problem.

Each episode fixes a goal (target node, label to force) and adds one feature
to the pendant node per step.  The reward is the change in the victim's
log-probability of the forced label at the target, so an episode's rewards
sum to the total log-probability gain over the featureless pendant graph.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .graph import Graph, InjectedGraph


class MaskedActionError(ValueError):
    """The chosen feature is already on the injected node."""


class EpisodeFinishedError(RuntimeError):
    pass


class NotTerminalError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackGoal:
    target: int
    label: int


@dataclass(frozen=True, eq=False)
class EpisodeState:
    goal: AttackGoal
    step: int
    injected: InjectedGraph
    mask: np.ndarray  # True = still selectable
    last_log_proba: np.ndarray  # victim log-probabilities at the target, all labels
    budget: int

    @property
    def last_log_prob(self) -> float:
        return float(self.last_log_proba[self.goal.label])

    @property
    def last_prob(self) -> float:
        return float(np.exp(self.last_log_prob))

    @property
    def done(self) -> bool:
        return self.step >= self.budget


@dataclass(frozen=True, eq=False)
class LabelBank:
    """One pooled representation per label, shape (Y, F)."""

    vectors: np.ndarray

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, y: int) -> np.ndarray:
        return self.vectors[y]


def node_representation(g: Graph) -> np.ndarray:
    """Dense H = Â X for the clean graph."""
    return g.norm_adj @ g.dense_features


def build_label_bank(g: Graph, victim) -> LabelBank:
    """Mean of H rows over each group of nodes the victim assigns to a label.

    ``victim`` needs only ``clean_predictions()``.  Labels nobody is assigned
    to get a zero vector.
    """
    pred = victim.clean_predictions() if hasattr(victim, "clean_predictions") else victim.predict()
    H = node_representation(g)
    counts = np.bincount(pred, minlength=g.num_labels).astype(np.float64)
    sums = np.zeros((g.num_labels, g.num_features))
    np.add.at(sums, pred, H)
    vec = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    vec.setflags(write=False)
    return LabelBank(vec)


class TargetEmbedder:
    """Caches the feature-independent part of each target's aggregated row.

    With the pendant node attached, the target's degree (self-loop included)
    is deg + 2 and the pendant's is 2, so its features enter with weight
    1 / sqrt(2 (deg + 2)).
    """

    def __init__(self, g: Graph):
        self.g = g
        self._base: dict[int, np.ndarray] = {}

    @cached_property
    def _dtilde(self):
        return self.g.degrees + 1.0

    def base(self, t: int) -> np.ndarray:
        b = self._base.get(t)
        if b is None:
            g = self.g
            dt = self._dtilde[t] + 1.0
            nbrs = g.neighbors(t)
            b = np.zeros(g.num_features)
            b[g.features_of(t)] += 1.0 / dt
            for u in nbrs:
                b[g.features_of(u)] += 1.0 / np.sqrt(dt * self._dtilde[u])
            b.setflags(write=False)
            self._base[t] = b
        return b

    def injected_weight(self, t: int) -> float:
        return 1.0 / np.sqrt(2.0 * (self._dtilde[t] + 1.0))

    def target_row(self, t: int, feats) -> np.ndarray:
        row = self.base(t).copy()
        feats = np.asarray(feats, dtype=np.int64)
        row[feats] += self.injected_weight(t)
        return row


def embed_state(st: EpisodeState, bank: LabelBank, embedder: TargetEmbedder | None = None) -> np.ndarray:
    """Aggregated target row in the injected graph, concatenated with the label vector.

    Length 2F.  Only graph data and the label bank are read.
    """
    if embedder is None:
        embedder = TargetEmbedder(st.injected.base)
    n = embedder.target_row(st.goal.target, st.injected.feature_indices())
    return np.concatenate([n, bank[st.goal.label]])


class AttackEnv:
    """Reset/step interface over a query-only victim.

    ``victim`` must provide ``target_log_proba(InjectedGraph)``.
    """

    def __init__(self, graph: Graph, victim, bank: LabelBank, budget: int, targets=None):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        if budget > graph.num_features:
            raise ValueError(f"budget {budget} exceeds the feature count {graph.num_features}")
        self.graph = graph
        self.victim = victim
        self.bank = bank
        self.budget = int(budget)
        self.targets = None if targets is None else frozenset(int(t) for t in targets)
        self.embedder = TargetEmbedder(graph)

    def check_goal(self, goal: AttackGoal) -> None:
        if not 0 <= goal.label < self.graph.num_labels:
            raise ValueError(f"label {goal.label} outside [0, {self.graph.num_labels})")
        if self.targets is not None and goal.target not in self.targets:
            raise ValueError(f"node {goal.target} is not an attack target")
        if not 0 <= goal.target < self.graph.num_nodes:
            raise ValueError(f"target {goal.target} outside graph")

    def reset(self, goal: AttackGoal, budget: int | None = None) -> EpisodeState:
        self.check_goal(goal)
        budget = self.budget if budget is None else int(budget)
        ig = InjectedGraph(self.graph, goal.target, frozenset(), budget)
        mask = np.ones(self.graph.num_features, dtype=bool)
        return EpisodeState(goal, 0, ig, mask, self.victim.target_log_proba(ig), budget)

    def step(self, st: EpisodeState, a: int):
        """-> (next state, reward, done)."""
        if st.done:
            raise EpisodeFinishedError(f"episode already placed {st.budget} feature(s)")
        a = int(a)
        if not 0 <= a < st.mask.shape[0] or not st.mask[a]:
            raise MaskedActionError(f"feature {a} is not selectable")
        ig = st.injected.with_feature(a)
        mask = st.mask.copy()
        mask[a] = False
        logp = self.victim.target_log_proba(ig)
        nxt = replace(st, step=st.step + 1, injected=ig, mask=mask, last_log_proba=logp)
        reward = float(logp[st.goal.label] - st.last_log_proba[st.goal.label])
        return nxt, reward, nxt.done

    def embed(self, st: EpisodeState) -> np.ndarray:
        return embed_state(st, self.bank, self.embedder)

    @staticmethod
    def success(st: EpisodeState) -> bool:
        if not st.done:
            raise NotTerminalError("success() is only defined once the budget is spent")
        return int(np.argmax(st.last_log_proba)) == st.goal.label
