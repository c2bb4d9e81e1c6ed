"""Compiled per-row passes over a circuit stored in CSR form.

Node kinds: 0 leaf, 1 product, 2 sum. ``ptr``/``idx`` hold the children of
every node; for sums, edge ``e`` of node ``i`` uses weight slot
``slot0[i] + (e - ptr[i])``.
"""
import numpy as np
from numba import njit

LEAF, PRODUCT, SUM = 0, 1, 2


@njit(cache=True)
def log_softmax_sums(kind, ptr, slot0, logits):
    logw = np.empty_like(logits)
    for i in range(kind.shape[0]):
        if kind[i] != SUM:
            continue
        a = slot0[i]
        k = ptr[i + 1] - ptr[i]
        mx = -np.inf
        for j in range(a, a + k):
            if logits[j] > mx:
                mx = logits[j]
        tot = 0.0
        for j in range(a, a + k):
            tot += np.exp(logits[j] - mx)
        lz = mx + np.log(tot)
        for j in range(a, a + k):
            logw[j] = logits[j] - lz
    return logw


@njit(cache=True)
def upward(leaf_vals, leaf_pos, kind, ptr, idx, slot0, logw):
    """Log value of every node for every row. ``leaf_pos[i]`` is the column of
    node ``i`` in ``leaf_vals`` (unused for internal nodes)."""
    B = leaf_vals.shape[0]
    n = kind.shape[0]
    V = np.empty((B, n))
    for b in range(B):
        for i in range(n):
            t = kind[i]
            if t == LEAF:
                V[b, i] = leaf_vals[b, leaf_pos[i]]
            elif t == PRODUCT:
                acc = 0.0
                for e in range(ptr[i], ptr[i + 1]):
                    acc += V[b, idx[e]]
                V[b, i] = acc
            else:
                a = slot0[i] - ptr[i]
                mx = -np.inf
                for e in range(ptr[i], ptr[i + 1]):
                    v = V[b, idx[e]] + logw[a + e]
                    if v > mx:
                        mx = v
                if mx == -np.inf:
                    V[b, i] = -np.inf
                    continue
                tot = 0.0
                for e in range(ptr[i], ptr[i + 1]):
                    tot += np.exp(V[b, idx[e]] + logw[a + e] - mx)
                V[b, i] = mx + np.log(tot)
    return V


@njit(cache=True)
def downward(V, row_w, root, leaf_pos, n_leaves, kind, ptr, idx, slot0, logw):
    """Reverse pass for ``sum_b row_w[b] * V[b, root]``.

    Returns the adjoint of every leaf value per row and the gradient with
    respect to the sum logits (through the per-node softmax)."""
    B, n = V.shape
    g_leaf = np.zeros((B, n_leaves))
    d_logits = np.zeros(logw.shape[0])
    G = np.empty(n)
    for b in range(B):
        for i in range(n):
            G[i] = 0.0
        G[root] = row_w[b]
        for i in range(n - 1, -1, -1):
            g = G[i]
            if g == 0.0:
                continue
            t = kind[i]
            if t == LEAF:
                g_leaf[b, leaf_pos[i]] += g
            elif t == PRODUCT:
                for e in range(ptr[i], ptr[i + 1]):
                    G[idx[e]] += g
            else:
                vi = V[b, i]
                if vi == -np.inf:
                    continue
                a = slot0[i] - ptr[i]
                for e in range(ptr[i], ptr[i + 1]):
                    lw = logw[a + e]
                    r = np.exp(V[b, idx[e]] + lw - vi)
                    G[idx[e]] += g * r
                    d_logits[a + e] += g * (r - np.exp(lw))
    return g_leaf, d_logits
