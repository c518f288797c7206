"""Small planted-partition graphs with label-correlated binary features."""
import numpy as np

from .graph import Graph, largest_connected_component


def planted_partition(num_nodes: int, num_labels: int, num_features: int, seed: int,
                      p_in: float = 0.3, p_out: float = 0.02, active: int = 3,
                      signal: float = 0.8, connected: bool = True) -> Graph:
    """Nodes get labels round-robin; edges appear with p_in inside a class and
    p_out across.  Each node switches on ``active`` features, each drawn from
    its class's block of feature ids with probability ``signal`` and uniformly
    otherwise.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes) % num_labels
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((num_nodes, num_nodes)) < prob, k=1)
    edges = np.argwhere(upper)
    block = np.array_split(np.arange(num_features), num_labels)
    pairs = []
    for v in range(num_nodes):
        chosen = set()
        while len(chosen) < min(active, num_features):
            if rng.random() < signal:
                chosen.add(int(rng.choice(block[labels[v]])))
            else:
                chosen.add(int(rng.integers(num_features)))
        pairs.extend((v, f) for f in sorted(chosen))
    g = Graph.from_edges(num_nodes, edges, np.array(pairs), labels, num_features, num_labels)
    return largest_connected_component(g) if connected else g
