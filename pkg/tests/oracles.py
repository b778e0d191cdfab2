"""Independent reference computations used as test oracles.

These deliberately avoid the library's own code paths: finite differences
for gradients, leaf-stripped spanning-tree enumeration for transport, and
straight-line re-evaluation for MLP forwards.
"""

from itertools import combinations

import numpy as np


def finite_difference_grads(f, arrays, h=1e-5):
    """Central finite differences of scalar f() w.r.t. a list of arrays (in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor=1e-10):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def mlp_forward_reference(weights, biases, x, slope=0.01, sigmoid_out=False):
    """Hand-rolled matrix-multiply re-evaluation of an MLP forward pass."""
    h = np.asarray(x, dtype=float)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w.T + b
        if i < len(weights) - 1:
            h = np.where(h > 0, h, slope * h)
    if sigmoid_out:
        h = 1.0 / (1.0 + np.exp(-h))
    return h


def adam_reference(theta0, grad_fn, alpha, beta1, beta2, eps, n_steps):
    """Scalar Adam recurrence executed step by step."""
    theta = float(theta0)
    m = v = 0.0
    for t in range(1, n_steps + 1):
        g = grad_fn(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta -= alpha * m_hat / (np.sqrt(v_hat) + eps)
    return theta


def _tree_flow(edges, supply, demand):
    """Solve the unique flow of a spanning-edge set by leaf stripping.

    Nodes 0..m-1 are sources, m..m+n-1 sinks. Returns the flow per edge or
    None if the edge set is not a tree basis or leaves residual imbalance.
    """
    m, n = len(supply), len(demand)
    balance = np.concatenate([supply, -np.asarray(demand)]).astype(float)
    incident = {v: [] for v in range(m + n)}
    for k, (i, j) in enumerate(edges):
        incident[i].append(k)
        incident[m + j].append(k)
    flows = np.zeros(len(edges))
    done = np.zeros(len(edges), dtype=bool)
    active = dict(incident)
    for _ in range(len(edges)):
        leaf = None
        for v, ks in active.items():
            live = [k for k in ks if not done[k]]
            active[v] = live
            if len(live) == 1:
                leaf = v
                break
        if leaf is None:
            return None  # contains a cycle or is disconnected
        k = active[leaf][0]
        i, j = edges[k]
        # flow leaves source i toward sink j; sign from which side the leaf is
        amount = balance[leaf] if leaf < m else -balance[leaf]
        flows[k] = amount
        done[k] = True
        balance[leaf] = 0.0
        other = m + j if leaf < m else i
        balance[other] -= amount if other < m else -amount
    if np.max(np.abs(balance)) > 1e-9:
        return None
    return flows


def brute_force_emd(p_mass, q_mass, centers):
    """Exact transport cost by enumerating vertices of the transport polytope.

    Every vertex is a basic solution supported on a spanning tree of the
    bipartite source/sink graph; enumerate all edge subsets of that size,
    keep the feasible ones, and take the cheapest. Exponential, so only for
    tiny histograms.
    """
    supply = np.asarray(p_mass, dtype=float).ravel()
    demand = np.asarray(q_mass, dtype=float).ravel()
    keep_s = supply > 0
    keep_d = demand > 0
    supply = supply[keep_s]
    demand = demand[keep_d]
    xs = np.asarray(centers).reshape(-1, 2)[keep_s]
    xd = np.asarray(centers).reshape(-1, 2)[keep_d]
    m, n = len(supply), len(demand)
    if m == 0 or n == 0:
        return 0.0
    cost = np.linalg.norm(xs[:, None, :] - xd[None, :, :], axis=-1)
    all_edges = [(i, j) for i in range(m) for j in range(n)]
    best = np.inf
    for edges in combinations(all_edges, m + n - 1):
        flows = _tree_flow(list(edges), supply, demand)
        if flows is None or np.any(flows < -1e-12):
            continue
        value = sum(f * cost[i, j] for f, (i, j) in zip(flows, edges))
        best = min(best, value)
    return best
