"""Exhaustive vertex enumeration of the transportation polytope (independent EMD oracle)."""
import itertools

import numpy as np


def brute_force_transport(supply, demand, cost):
    """Minimum cost over every basic feasible solution.

    Each basis is a set of m + n - 1 cells; the cells whose equality system
    (one redundant row dropped) is non-singular give a unique plan, which is
    a vertex when it is non-negative.
    """
    m, n = cost.shape
    cells = list(itertools.product(range(m), range(n)))
    k = m + n - 1
    rhs = np.concatenate([supply, demand])[:-1]
    best = np.inf
    subsets = np.array(list(itertools.combinations(range(len(cells)), k)))
    mats = np.zeros((len(subsets), m + n, k))
    for col in range(k):
        idx = subsets[:, col]
        rows = np.array([cells[i][0] for i in idx])
        cols = np.array([cells[i][1] for i in idx])
        mats[np.arange(len(subsets)), rows, col] = 1.0
        mats[np.arange(len(subsets)), m + cols, col] = 1.0
    mats = mats[:, :-1, :]
    det = np.linalg.det(mats)
    ok = np.abs(det) > 0.5
    sol = np.linalg.solve(mats[ok], np.broadcast_to(rhs, (ok.sum(), k))[..., None])[..., 0]
    flat_cost = cost.reshape(-1)
    feasible = (sol >= -1e-12).all(axis=1)
    costs = (sol[feasible] * flat_cost[subsets[ok][feasible]]).sum(axis=1)
    if costs.size:
        best = float(costs.min())
    return best
