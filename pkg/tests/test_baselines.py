import numpy as np
import pytest

from conftest import random_graph
from oracles import central_difference, dense_adjacency, forward, injected_dense, softmax
from snia import baselines as B
from snia.env import AttackGoal
from snia.graph import Graph, InjectedGraph
from snia.models import BlackBoxVictim, GnnArchitecture, VictimModel, init_params


def random_model(kind, g, rng, scale=2.0):
    arch = GnnArchitecture.default(kind)
    p = init_params(arch, g.num_features, g.num_labels, rng)
    return VictimModel(arch, {k: v * scale for k, v in p.items()}, g)


@pytest.fixture
def counting_graph():
    # nodes 0-2 predicted label 1, node 3 predicted label 0
    feats = [(0, 0), (0, 2), (1, 2), (1, 3), (2, 2), (2, 0), (3, 1), (3, 3)]
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], feats, [1, 1, 1, 0], 4, 2)
    return g, np.array([1, 1, 1, 0])


def test_top_k_examples():
    assert set(B.top_k([3, 1, 2], 2)) == {0, 2}
    assert B.top_k([5, 5, 5, 1], 2).tolist() == [0, 1]
    assert B.top_k([0, 1, 1, 1], 2).tolist() == [1, 2]


def test_mostattr_examples(counting_graph):
    g, pred = counting_graph
    # counts in group 1: f0=2, f1=0, f2=3, f3=1
    ig = B.mostattr_attack(g, pred, AttackGoal(3, 1), 2)
    assert ig.feature_indices().tolist() == [0, 2]
    ig = B.mostattr_attack(g, pred, AttackGoal(0, 1), 1)
    assert ig.feature_indices().tolist() == [2]
    # group 0 is node 3 only: f1 and f3 tie at 1, then zeros favour f0
    ig = B.mostattr_attack(g, pred, AttackGoal(0, 0), 3)
    assert ig.feature_indices().tolist() == [0, 1, 3]


def test_mostattr_counting_oracle(rng):
    for _ in range(30):
        g = random_graph(rng, 15, 8, 3)
        pred = rng.integers(3, size=15)
        y = int(rng.integers(3))
        k = int(rng.integers(1, 9))
        X = g.dense_features
        counts = X[pred == y].sum(axis=0)
        # oracle: sort by (count desc, index asc)
        ranked = sorted(range(8), key=lambda f: (-counts[f], f))[:k]
        assert B.mostattr_attack(g, pred, AttackGoal(0, y), k).feature_indices().tolist() == sorted(ranked)


def test_random_copies_group_member(counting_graph):
    g, pred = counting_graph
    rng = np.random.default_rng(0)
    for _ in range(20):
        ig = B.random_attack(g, pred, AttackGoal(3, 1), 4, rng)
        rows = [set(g.features_of(u).tolist()) for u in (0, 1, 2)]
        assert set(ig.features) in rows


def test_random_truncates_to_budget(counting_graph):
    g, pred = counting_graph
    ig = B.random_attack(g, pred, AttackGoal(0, 0), 1, np.random.default_rng(0))
    assert ig.feature_indices().tolist() == [1]


def test_random_empty_group(counting_graph, caplog):
    g, _ = counting_graph
    pred = np.ones(4, dtype=int)
    ig = B.random_attack(g, pred, AttackGoal(0, 0), 2, np.random.default_rng(0))
    assert len(ig.features) == 2
    assert "no node predicted" in caplog.text


def test_random_deterministic(rng):
    g = random_graph(rng, 20, 10, 3)
    pred = rng.integers(3, size=20)
    a = [B.random_attack(g, pred, AttackGoal(1, y % 3), 3, np.random.default_rng(9)).features
         for y in range(6)]
    b = [B.random_attack(g, pred, AttackGoal(1, y % 3), 3, np.random.default_rng(9)).features
         for y in range(6)]
    assert a == b


def test_black_box_attackers_need_only_predictions(counting_graph):
    # random/mostattr run off a prediction vector, nothing else about the model
    g, pred = counting_graph
    B.mostattr_attack(g, list(pred), AttackGoal(1, 0), 2)
    B.random_attack(g, tuple(pred), AttackGoal(1, 0), 2, np.random.default_rng(0))


def test_gradient_matches_finite_difference(rng):
    for kind in ("gcn", "sgc", "surrogate"):
        g = random_graph(rng, 9, 6, 3)
        m = random_model(kind, g, rng)
        A = dense_adjacency(9, g.edge_list())
        t, y = 4, 2
        ig = InjectedGraph(g, t, frozenset({1}))

        def f(x):
            Bm, Xh = injected_dense(A, g.dense_features, t, [])
            Xh[-1] = x
            return softmax(forward(kind, m.params, Bm, Xh)[t])[y]

        np.testing.assert_allclose(B.feature_gradient(m, ig, AttackGoal(t, y)),
                                   central_difference(f, ig.feature_vector()),
                                   rtol=1e-6, atol=1e-9)


def _greedy_oracle(kind, params, A, X, t, y, budget):
    chosen = []
    for _ in range(budget):
        def f(x):
            Bm, Xh = injected_dense(A, X, t, [])
            Xh[-1] = x
            return softmax(forward(kind, params, Bm, Xh)[t])[y]
        x0 = np.zeros(X.shape[1])
        x0[chosen] = 1.0
        grad = central_difference(f, x0)
        grad[chosen] = -np.inf
        chosen.append(int(np.argmax(grad)))
    return sorted(chosen)


@pytest.mark.parametrize("kind", ["sgc", "surrogate"])
def test_greedy_matches_brute_force(kind, rng):
    for _ in range(10):
        g = random_graph(rng, 10, 7, 3)
        m = random_model(kind, g, rng)
        A = dense_adjacency(10, g.edge_list())
        t, y = int(rng.integers(10)), int(rng.integers(3))
        got = B.greedy_grad_attack(g, m, AttackGoal(t, y), 3).feature_indices().tolist()
        assert got == _greedy_oracle(kind, m.params, A, g.dense_features, t, y, 3)


def test_greedy_budget_one_equals_oneshot(rng):
    for kind in ("gcn", "sgc", "surrogate"):
        for _ in range(10):
            g = random_graph(rng, 10, 7, 3)
            m = random_model(kind, g, rng)
            goal = AttackGoal(int(rng.integers(10)), int(rng.integers(3)))
            assert (B.greedy_grad_attack(g, m, goal, 1).features
                    == B.oneshot_grad_attack(g, m, goal, 1).features)


def test_gradient_attacks_respect_budget(rng):
    g = random_graph(rng, 10, 7, 3)
    m = random_model("gcn", g, rng)
    for k in range(1, 8):
        assert len(B.greedy_grad_attack(g, m, AttackGoal(0, 1), k).features) == k
        assert len(B.oneshot_grad_attack(g, m, AttackGoal(0, 1), k).features) == k


def test_attacker_kind_validation():
    B.AttackerKind("greedy", "surrogate")
    B.AttackerKind("mostattr")
    with pytest.raises(ValueError):
        B.AttackerKind("greedy")
    with pytest.raises(ValueError):
        B.AttackerKind("random", "victim")
    with pytest.raises(ValueError):
        B.AttackerKind("pgd", "victim")


def test_oneshot_through_black_box_is_impossible(rng):
    g = random_graph(rng, 6, 4, 2)
    bb = BlackBoxVictim(random_model("sgc", g, rng))
    with pytest.raises(AttributeError):
        B.oneshot_grad_attack(g, bb, AttackGoal(0, 1), 2)
