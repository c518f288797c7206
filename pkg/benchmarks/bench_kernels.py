"""Time the numba kernels against their numpy fallbacks on Cora-sized inputs.

    python3 benchmarks/bench_kernels.py [--dataset-dir data/cora] [--repeat 5]

Both flavours are imported side by side, so ``SNIA_DISABLE_NUMBA`` has no
effect here.  Outputs are checked for agreement before anything is timed.
"""
import argparse
import timeit
from pathlib import Path

import numpy as np

from snia import _kernels as K
from snia.graph import load_dataset_dir


def cases(g, rng):
    A = g.norm_adj
    X = g.feature_matrix
    dense = rng.standard_normal((g.num_features, 64))
    xw = X @ dense
    axw = A @ xw
    dtilde = g.degrees.astype(np.float64) + 1.0
    inj = rng.standard_normal(64)
    targets = rng.choice(g.num_nodes, size=200, replace=False)
    rew, val = rng.standard_normal((128, 32)), rng.standard_normal((128, 32))
    done = (rng.random((128, 32)) < 0.04).astype(np.float64)
    last = rng.standard_normal(32)

    def agg(fn):
        return lambda: [fn(g.indptr, g.indices, dtilde, xw, axw, int(t), inj, True, True)
                        for t in targets]

    return {
        "csr_matmul (N x 64)": (lambda fn: lambda: fn(A.indptr, A.indices, A.data, xw),
                                K.csr_matmul_np, K.csr_matmul_nb),
        "component_labels": (lambda fn: lambda: fn(g.indptr, g.indices),
                             K.component_labels_np, K.component_labels_nb),
        "target_aggregate x200": (agg, K.target_aggregate_np, K.target_aggregate_nb),
        "gae (128 x 32)": (lambda fn: lambda: fn(rew, val, done, last, 0.99, 0.95),
                           K.gae_np, K.gae_nb),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset-dir", default=str(Path(__file__).resolve().parents[1] / "data" / "cora"))
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    g = load_dataset_dir(a.dataset_dir)
    print(f"graph: N={g.num_nodes} E={g.num_edges} F={g.num_features}")
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (wrap, f_np, f_nb) in cases(g, np.random.default_rng(0)).items():
        run_np, run_nb = wrap(f_np), wrap(f_nb)
        np.testing.assert_allclose(np.asarray(run_np(), dtype=float),
                                   np.asarray(run_nb(), dtype=float), rtol=1e-10, atol=1e-12)
        t_np = min(timeit.repeat(run_np, number=1, repeat=a.repeat)) * 1e3
        t_nb = min(timeit.repeat(run_nb, number=1, repeat=a.repeat)) * 1e3
        print(f"{name:<24}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
