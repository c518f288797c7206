import pickle
from collections import defaultdict

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import CITESEER, CORA
from snia.datasets import prepare, read_cora, read_planetoid
from snia.graph import load_dataset_dir, max_feature_budget


@pytest.fixture
def raw_cora(tmp_path):
    (tmp_path / "cora.content").write_text(
        "31 1 0 1 0 Theory\n"
        "7 0 1 0 0 Neural_Networks\n"
        "99 0 0 1 1 Theory\n"
        "5 1 1 1 0 Case_Based\n"
        "12 0 0 0 1 Neural_Networks\n")
    (tmp_path / "cora.cites").write_text("31 7\n7 99\n99 31\n5 12\n31 404\n7 7\n")
    return tmp_path


def test_read_cora(raw_cora):
    g = read_cora(raw_cora)
    assert (g.num_nodes, g.num_features, g.num_labels) == (5, 4, 3)
    # labels numbered by sorted class name
    assert g.labels.tolist() == [2, 1, 2, 0, 1]
    assert g.features_of(3).tolist() == [0, 1, 2]
    assert sorted(map(tuple, g.edge_list().tolist())) == [(0, 1), (0, 2), (1, 2), (3, 4)]


def test_prepare_keeps_largest_component(raw_cora):
    g = prepare(read_cora(raw_cora))
    assert g.num_nodes == 3 and g.num_edges == 3
    assert g.labels.tolist() == [2, 1, 2]


def test_read_cora_bad_row(tmp_path):
    (tmp_path / "cora.content").write_text("1 A\n")
    (tmp_path / "cora.cites").write_text("")
    with pytest.raises(ValueError):
        read_cora(tmp_path)


@pytest.fixture
def raw_planetoid(tmp_path):
    # 6 nodes: 0-2 in allx, 3-5 via test index [5, 3, 4]; node 4 unlabelled
    allx = sp.csr_matrix(np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float32))
    ally = np.array([[1, 0], [0, 1], [1, 0]])
    tx = sp.csr_matrix(np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1]], dtype=np.float32))
    ty = np.array([[0, 1], [1, 0], [0, 0]])
    graph = defaultdict(list, {0: [1], 1: [0, 2], 2: [1, 5], 3: [5], 4: [0], 5: [2, 3]})
    objs = {"allx": allx, "ally": ally, "tx": tx, "ty": ty, "graph": graph,
            "x": allx, "y": ally}
    for k, v in objs.items():
        with open(tmp_path / f"ind.toy.{k}", "wb") as fh:
            pickle.dump(v, fh)
    (tmp_path / "ind.toy.test.index").write_text("5\n3\n4\n")
    return tmp_path


def test_read_planetoid(raw_planetoid):
    g = read_planetoid(raw_planetoid, "toy")
    # node 4 (all-zero label) is dropped; 5 -> 4 after renumbering
    assert g.num_nodes == 5 and g.num_labels == 2
    assert g.labels.tolist() == [0, 1, 0, 0, 1]
    assert g.features_of(3).tolist() == [1, 2]   # old node 3 is test row 1
    assert g.features_of(4).tolist() == [0, 1]   # old node 5 is test row 0
    assert sorted(map(tuple, g.edge_list().tolist())) == [(0, 1), (1, 2), (2, 4), (3, 4)]


def test_read_planetoid_label_order(raw_planetoid):
    g = read_planetoid(raw_planetoid, "toy", label_order=[1, 0])
    assert g.labels.tolist() == [1, 0, 1, 1, 0]


@pytest.mark.parametrize("path,stats", [
    (CORA, (2485, 5069, 1433, 7)),
    (CITESEER, (2110, 3668, 3703, 6)),
])
def test_shipped_datasets(path, stats):
    g = load_dataset_dir(path)
    assert (g.num_nodes, g.num_edges, g.num_features, g.num_labels) == stats
    g.validate()
    assert max_feature_budget(g) > 0
