"""Reference attackers for the injected node's features.

``random`` and ``mostattr`` only need the victim's clean predictions.  The two
gradient attackers need a differentiable model, either the victim itself
(white-box) or an attacker-trained surrogate (black-box).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .env import AttackGoal
from .graph import Graph, InjectedGraph

log = logging.getLogger(__name__)

ATTACKERS = ("random", "mostattr", "oneshot", "greedy")
GRAD_SOURCES = ("victim", "surrogate", "none")


@dataclass(frozen=True)
class AttackerKind:
    kind: str
    gradient_source: str = "none"

    def __post_init__(self):
        if self.kind not in ATTACKERS:
            raise ValueError(f"unknown attacker {self.kind!r}")
        if self.gradient_source not in GRAD_SOURCES:
            raise ValueError(f"unknown gradient source {self.gradient_source!r}")
        needs_grad = self.kind in ("oneshot", "greedy")
        if needs_grad == (self.gradient_source == "none"):
            raise ValueError(f"{self.kind} cannot use gradient source {self.gradient_source!r}")


def _group(predictions, label):
    return np.flatnonzero(np.asarray(predictions) == label)


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores; equal scores favour the lower index."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return np.sort(order[:k])


def random_attack(g: Graph, predictions, goal: AttackGoal, budget: int, rng) -> InjectedGraph:
    """Copy the features of a random node the victim assigns to the goal label."""
    group = _group(predictions, goal.label)
    if group.size == 0:
        log.warning("no node predicted as label %d; injecting random features", goal.label)
        feats = rng.choice(g.num_features, size=budget, replace=False)
    else:
        feats = g.features_of(int(rng.choice(group)))[:budget]
    return InjectedGraph(g, goal.target, frozenset(int(f) for f in feats), budget)


def feature_counts(g: Graph, nodes) -> np.ndarray:
    counts = np.zeros(g.num_features, dtype=np.int64)
    for u in nodes:
        counts[g.features_of(int(u))] += 1
    return counts


def mostattr_attack(g: Graph, predictions, goal: AttackGoal, budget: int) -> InjectedGraph:
    """The features most often active among nodes predicted as the goal label."""
    counts = feature_counts(g, _group(predictions, goal.label))
    feats = top_k(counts, budget)
    return InjectedGraph(g, goal.target, frozenset(int(f) for f in feats), budget)


def feature_gradient(model, ig: InjectedGraph, goal: AttackGoal) -> np.ndarray:
    """Gradient of the goal-label probability at the target w.r.t. the injected row."""
    return model.target_prob_gradient(ig, goal.label)


def oneshot_grad_attack(g: Graph, model, goal: AttackGoal, budget: int) -> InjectedGraph:
    """One gradient at the empty row; switch on the ``budget`` largest entries."""
    ig = InjectedGraph(g, goal.target, frozenset(), budget)
    grad = feature_gradient(model, ig, goal)
    return ig.with_features(top_k(grad, budget))


def greedy_grad_attack(g: Graph, model, goal: AttackGoal, budget: int) -> InjectedGraph:
    """Add the unused feature with the largest gradient, one at a time."""
    ig = InjectedGraph(g, goal.target, frozenset(), budget)
    for _ in range(budget):
        grad = feature_gradient(model, ig, goal)
        grad[ig.feature_indices()] = -np.inf
        ig = ig.with_feature(int(np.argmax(grad)))
    return ig
