"""Hot inner loops, each in a numba and a pure-numpy flavour.

The numba versions are used when numba imports cleanly and the environment
variable ``SNIA_DISABLE_NUMBA`` is not set to a truthy value.  Both flavours
share signatures and are exported as ``<name>_nb`` / ``<name>_np`` so the
benchmark and the tests can call either one directly.
"""
import os

import numpy as np

_FLAG = os.environ.get("SNIA_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the dev image
    numba = None

NUMBA_AVAILABLE = numba is not None
NUMBA_ENABLED = NUMBA_AVAILABLE and _FLAG not in {"1", "true", "yes", "on"}


def _njit(fn):
    if not NUMBA_AVAILABLE:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# CSR x dense


def csr_matmul_np(indptr, indices, data, dense):
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, dense.shape[1]))
    if indices.shape[0] == 0:
        return out
    nonempty = np.flatnonzero(np.diff(indptr))
    # chunk the gather so nnz x cols never materializes for wide operands
    step = max(1, 4_000_000 // max(dense.shape[1], 1))
    for lo in range(0, nonempty.shape[0], step):
        rows = nonempty[lo:lo + step]
        start, stop = indptr[rows[0]], indptr[rows[-1] + 1]
        contrib = dense[indices[start:stop]] * data[start:stop, None]
        out[rows] = np.add.reduceat(contrib, indptr[rows] - start, axis=0)
    return out


@_njit
def csr_matmul_nb(indptr, indices, data, dense):
    n_rows = indptr.shape[0] - 1
    k = dense.shape[1]
    out = np.zeros((n_rows, k))
    for i in range(n_rows):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            v = data[p]
            for c in range(k):
                out[i, c] += v * dense[j, c]
    return out


# --------------------------------------------------------------------------
# connected components; every node is labelled with the smallest node id of
# its component


def component_labels_np(indptr, indices):
    n = indptr.shape[0] - 1
    labels = np.arange(n)
    if indices.shape[0] == 0:
        return labels
    nonempty = np.flatnonzero(np.diff(indptr))
    while True:
        nbr_min = np.minimum.reduceat(labels[indices], indptr[nonempty])
        new = labels.copy()
        new[nonempty] = np.minimum(labels[nonempty], nbr_min)
        # pointer jumping keeps the iteration count near log(diameter)
        new = new[new]
        if np.array_equal(new, labels):
            return labels
        labels = new


@_njit
def component_labels_nb(indptr, indices):
    n = indptr.shape[0] - 1
    labels = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        labels[seed] = seed
        head = 0
        tail = 1
        queue[0] = seed
        while head < tail:
            u = queue[head]
            head += 1
            for p in range(indptr[u], indptr[u + 1]):
                v = indices[p]
                if labels[v] < 0:
                    labels[v] = seed
                    queue[tail] = v
                    tail += 1
    return labels


# --------------------------------------------------------------------------
# two-layer propagation evaluated at a single target, with an optional pendant
# node attached to it.
#
#   xw      first-layer transform of every original node (N x h)
#   axw     clean propagation A_norm @ xw on the uninjected graph
#   dtilde  clean degrees including the self loop
#   inj_xw  first-layer transform of the pendant's feature row
#
# Returns sum_u A_norm[t, u] * act(P_u) over the target's closed neighbourhood
# in the injected graph, where P = A_norm @ xw there.  Only the target's degree
# changes under injection, so neighbour rows are patched from ``axw``.


def target_aggregate_np(indptr, indices, dtilde, xw, axw, t, inj_xw, has_inj, relu):
    nbrs = indices[indptr[t]:indptr[t + 1]]
    dt0 = dtilde[t]
    dt = dt0 + 1.0 if has_inj else dt0
    inv_u = 1.0 / np.sqrt(dtilde[nbrs])
    sdt = np.sqrt(dt)

    p_t = xw[t] / dt + (inv_u[:, None] * xw[nbrs]).sum(axis=0) / sdt
    if has_inj:
        p_t = p_t + inj_xw / np.sqrt(2.0 * dt)
    shift = (1.0 / sdt - 1.0 / np.sqrt(dt0)) * inv_u
    p_nb = axw[nbrs] + shift[:, None] * xw[t]
    if relu:
        p_t = np.maximum(p_t, 0.0)
        p_nb = np.maximum(p_nb, 0.0)
    out = p_t / dt + (p_nb * (inv_u / sdt)[:, None]).sum(axis=0)
    if has_inj:
        p_inj = 0.5 * inj_xw + xw[t] / np.sqrt(2.0 * dt)
        if relu:
            p_inj = np.maximum(p_inj, 0.0)
        out = out + p_inj / np.sqrt(2.0 * dt)
    return out


@_njit
def target_aggregate_nb(indptr, indices, dtilde, xw, axw, t, inj_xw, has_inj, relu):
    h = xw.shape[1]
    dt0 = dtilde[t]
    dt = dt0 + 1.0 if has_inj else dt0
    sdt = np.sqrt(dt)
    s2dt = np.sqrt(2.0 * dt)
    out = np.zeros(h)
    p = np.empty(h)

    for c in range(h):
        p[c] = xw[t, c] / dt
    for q in range(indptr[t], indptr[t + 1]):
        u = indices[q]
        w = 1.0 / (sdt * np.sqrt(dtilde[u]))
        for c in range(h):
            p[c] += w * xw[u, c]
    if has_inj:
        for c in range(h):
            p[c] += inj_xw[c] / s2dt
    for c in range(h):
        v = p[c]
        if relu and v < 0.0:
            v = 0.0
        out[c] += v / dt

    shift0 = 1.0 / sdt - 1.0 / np.sqrt(dt0)
    for q in range(indptr[t], indptr[t + 1]):
        u = indices[q]
        inv_u = 1.0 / np.sqrt(dtilde[u])
        shift = shift0 * inv_u
        w = inv_u / sdt
        for c in range(h):
            v = axw[u, c] + shift * xw[t, c]
            if relu and v < 0.0:
                v = 0.0
            out[c] += w * v

    if has_inj:
        for c in range(h):
            v = 0.5 * inj_xw[c] + xw[t, c] / s2dt
            if relu and v < 0.0:
                v = 0.0
            out[c] += v / s2dt
    return out


# --------------------------------------------------------------------------
# GAE backward recursion over a (T, E) block of transitions.  ``dones[t]``
# marks that the transition at t ended its episode; ``last_values`` bootstraps
# the step after the block.


def gae_np(rewards, values, dones, last_values, gamma, lam):
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(last_values)
    for t in range(T - 1, -1, -1):
        next_v = last_values if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv


@_njit
def gae_nb(rewards, values, dones, last_values, gamma, lam):
    T, E = rewards.shape
    adv = np.zeros((T, E))
    for e in range(E):
        running = 0.0
        for t in range(T - 1, -1, -1):
            next_v = last_values[e] if t == T - 1 else values[t + 1, e]
            live = 1.0 - dones[t, e]
            delta = rewards[t, e] + gamma * next_v * live - values[t, e]
            running = delta + gamma * lam * live * running
            adv[t, e] = running
    return adv


if NUMBA_ENABLED:
    csr_matmul = csr_matmul_nb
    component_labels = component_labels_nb
    target_aggregate = target_aggregate_nb
    gae = gae_nb
else:
    csr_matmul = csr_matmul_np
    component_labels = component_labels_np
    target_aggregate = target_aggregate_np
    gae = gae_np
