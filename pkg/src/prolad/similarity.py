"""Similarity machinery: adaptive distillation coefficients, exact EMD, batch-statistics profiles."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigurationError, ContractError, InputError


# -- adaptive coefficients --------------------------------------------------------------------
def _cosine_matrix(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = x / np.maximum(norms, 1e-12)
    return xn @ xn.T


def _upper_mean(m):
    iu = np.triu_indices(m.shape[0], k=1)
    return float(m[iu].mean()) if iu[0].size else 0.0, int(iu[0].size)


@dataclass(frozen=True)
class SimilarityStats:
    mean_feat_sim: float
    mean_intercls_sim: float
    n_feature_pairs: int
    n_class_pairs: int

    @property
    def abs_diff(self):
        return abs(self.mean_feat_sim - self.mean_intercls_sim)

    @classmethod
    def from_features(cls, features, labels):
        """Pairwise cosine statistics of support embeddings and their class prototypes.

        Only distinct unordered pairs count (strict upper triangle); an empty
        pair set contributes a mean of 0.
        """
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2 or len(features) != len(labels):
            raise InputError(f"features {features.shape} and labels {labels.shape} do not pair up")
        classes = np.unique(labels)
        protos = np.stack([features[labels == c].mean(axis=0) for c in classes])
        feat, ns = _upper_mean(_cosine_matrix(features))
        inter, nc = _upper_mean(_cosine_matrix(protos))
        return cls(feat, inter, ns, nc)


def _check_beta(beta):
    if not beta > 0:
        raise ConfigurationError(f"scaling factor beta must be positive, got {beta}")


def coeff_sim(stats, beta=1.5):
    """``exp(beta * (|feat_sim - intercls_sim| - 1))`` clamped to [0, 1]."""
    _check_beta(beta)
    diff = stats.abs_diff if isinstance(stats, SimilarityStats) else float(stats)
    return min(1.0, max(0.0, math.exp(beta * (diff - 1.0))))


def coeff_loss(loss_orig, acc, beta=1.5):
    """``exp(-beta * loss * (1 - acc))`` from the pretrained model's support loss and accuracy."""
    _check_beta(beta)
    if loss_orig < 0 or not math.isfinite(loss_orig):
        raise InputError(f"support loss must be finite and non-negative, got {loss_orig}")
    if not 0.0 <= acc <= 1.0:
        raise InputError(f"accuracy must lie in [0, 1], got {acc}")
    return math.exp(-beta * loss_orig * (1.0 - acc))


def prototype_loss_acc(features, labels, tau=10.0):
    """Cross-entropy and accuracy of a nearest-prototype cosine head on its own support set."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    protos = np.stack([features[labels == c].mean(axis=0) for c in range(k)])
    fn = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    pn = protos / np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), 1e-12)
    logits = tau * fn @ pn.T
    loss = nn.cross_entropy(T.Tensor(logits), labels).item()
    acc = float((logits.argmax(axis=1) == labels).mean())
    return loss, acc


# -- earth mover's distance -------------------------------------------------------------------
@dataclass
class TransportProblem:
    source: np.ndarray
    target: np.ndarray
    source_weights: np.ndarray = None
    target_weights: np.ndarray = None

    def __post_init__(self):
        self.source = np.atleast_2d(np.asarray(self.source, dtype=np.float64))
        self.target = np.atleast_2d(np.asarray(self.target, dtype=np.float64))
        if self.source.shape[0] == 0 or self.target.shape[0] == 0 or self.source.size == 0:
            raise InputError("EMD needs non-empty prototype sets on both sides")
        if self.source.shape[1] != self.target.shape[1]:
            raise InputError(f"prototype dimensions differ: {self.source.shape} vs {self.target.shape}")
        m, n = len(self.source), len(self.target)
        self.source_weights = (np.full(m, 1.0 / m) if self.source_weights is None
                               else np.asarray(self.source_weights, dtype=np.float64))
        self.target_weights = (np.full(n, 1.0 / n) if self.target_weights is None
                               else np.asarray(self.target_weights, dtype=np.float64))
        for w, side in ((self.source_weights, "source"), (self.target_weights, "target")):
            if (w < 0).any():
                raise InputError(f"{side} weights must be non-negative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise InputError(f"{side} weights sum to {w.sum()!r}, expected 1 (unbalanced problem)")

    @property
    def cost(self):
        diff = self.source[:, None, :] - self.target[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))


def transport_simplex(supply, demand, cost, tol=1e-12, max_iter=None):
    """Exact minimum-cost transportation plan via the u-v (MODI) simplex.

    Starts from the north-west corner basis (kept at exactly m + n - 1 cells,
    zero flows included, so the basis is always a spanning tree).
    """
    supply = np.asarray(supply, dtype=np.float64).copy()
    demand = np.asarray(demand, dtype=np.float64).copy()
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    flow = np.zeros((m, n))
    basis = set()
    i = j = 0
    a, b = supply.copy(), demand.copy()
    while True:
        x = min(a[i], b[j])
        flow[i, j] = x
        basis.add((i, j))
        a[i] -= x
        b[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if j == n - 1 or (i < m - 1 and a[i] <= b[j]):
            i += 1
        else:
            j += 1
    max_iter = max_iter or 50 * (m * n) ** 2 + 100
    for _ in range(max_iter):
        u, v = _potentials(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        for cell in basis:
            reduced[cell] = 0.0
        p, q = np.unravel_index(int(np.argmin(reduced)), reduced.shape)
        if reduced[p, q] >= -tol * max(1.0, float(np.abs(cost).max())):
            return flow
        path = _tree_path(basis, m, n, m + q, p)
        cells = []
        for k in range(len(path) - 1):
            r, c = (path[k], path[k + 1]) if path[k] < m else (path[k + 1], path[k])
            cells.append((r, c - m))
        minus = cells[0::2]
        plus = cells[1::2]
        leave = min(minus, key=lambda cell: (flow[cell], cell))
        theta = flow[leave]
        for cell in minus:
            flow[cell] -= theta
        for cell in plus:
            flow[cell] += theta
        flow[p, q] += theta
        flow[leave] = 0.0
        basis.remove(leave)
        basis.add((int(p), int(q)))
    raise ContractError("transportation simplex did not converge")


def _potentials(basis, cost, m, n):
    adj = [[] for _ in range(m + n)]
    for r, c in basis:
        adj[r].append(m + c)
        adj[m + c].append(r)
    pot = np.full(m + n, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if np.isnan(pot[nb]):
                r, c = (node, nb - m) if node < m else (nb, node - m)
                pot[nb] = cost[r, c] - pot[node]
                queue.append(nb)
    return pot[:m], pot[m:]


def _tree_path(basis, m, n, start, goal):
    adj = [[] for _ in range(m + n)]
    for r, c in basis:
        adj[r].append(m + c)
        adj[m + c].append(r)
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def solve_emd(problem):
    """Optimal flows and ``EMD = sum(f d) / sum(f)`` for a balanced transport problem."""
    cost = problem.cost
    flow = transport_simplex(problem.source_weights, problem.target_weights, cost)
    return flow, float((flow * cost).sum() / flow.sum())


def domain_similarity(emd_value, gamma=0.02):
    if emd_value < 0:
        raise InputError(f"EMD must be non-negative, got {emd_value}")
    return math.exp(-gamma * emd_value)


def class_prototypes(features, labels):
    labels = np.asarray(labels)
    return np.stack([features[labels == c].mean(axis=0) for c in np.unique(labels)])


# -- batch statistics profiling ---------------------------------------------------------------
@dataclass
class StatsProfile:
    rows: list          # (sample, layer, channel, mean, var)
    values: np.ndarray  # pooled statistic fed to the KDE
    grid: np.ndarray
    density: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    @property
    def mode(self):
        return float(self.grid[int(np.argmax(self.density))])

    def write_stats_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "layer", "channel", "mean", "var"])
            w.writerows(self.rows)

    def write_kde_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "density"])
            w.writerows(zip(self.grid.tolist(), self.density.tolist()))


def gaussian_kde_silverman(values, grid):
    from scipy.stats import gaussian_kde

    values = np.asarray(values, dtype=np.float64)
    if values.size < 2 or np.ptp(values) == 0:
        # point mass: a narrow spike at the single value
        dens = np.zeros_like(grid)
        dens[int(np.argmin(np.abs(grid - values.mean())))] = 1.0
        return dens
    return gaussian_kde(values, bw_method="silverman")(grid)


def profile_batch_stats(backbone, images, layer_tag="all", statistic="mean", samples=100,
                        batch_size=None, rng=None, bins=30, grid_points=200):
    """Per-channel batch statistics of the first batchnorm of each block.

    Each of ``samples`` draws forwards one batch through a copy of the
    backbone whose batchnorms run in training mode with momentum 1.0, then
    reads back the running statistics.  Pass ``samples=0`` to read the
    backbone's own stored statistics instead.  ``layer_tag`` is ``"all"`` or
    ``"block{i}"``.
    """
    bns = backbone.batchnorms()
    if not bns:
        raise ConfigurationError("model has no batchnorm layers to profile")
    if layer_tag == "all":
        layers = list(range(len(bns)))
    elif layer_tag.startswith("block") and layer_tag[5:].isdigit() and int(layer_tag[5:]) < len(bns):
        layers = [int(layer_tag[5:])]
    else:
        raise ConfigurationError(f"unknown layer tag {layer_tag!r}")
    if statistic not in ("mean", "var"):
        raise ConfigurationError(f"statistic must be 'mean' or 'var', got {statistic!r}")
    images = np.asarray(images, dtype=np.float64)
    if samples and len(images) == 0:
        raise InputError("cannot profile an empty dataset")
    rows = []
    if samples == 0:
        for li in layers:
            bn = bns[li]
            rows += [(0, f"block{li}", c, float(bn.running_mean[c]), float(bn.running_var[c]))
                     for c in range(bn.num_channels)]
    else:
        rng = rng or np.random.default_rng(0)
        probe = backbone.clone()
        for bn in probe.batchnorms():
            bn.momentum = 1.0
            bn.mode = nn.TRAINING
        bsz = batch_size or min(len(images), 25)
        bsz = max(2, min(bsz, len(images)))
        for s in range(samples):
            idx = rng.choice(len(images), size=bsz, replace=False)
            with T.no_grad():
                probe.forward(images[idx])
            for li in layers:
                bn = probe.batchnorms()[li]
                rows += [(s, f"block{li}", c, float(bn.running_mean[c]), float(bn.running_var[c]))
                         for c in range(bn.num_channels)]
    col = 3 if statistic == "mean" else 4
    values = np.array([r[col] for r in rows])
    counts, edges = np.histogram(values, bins=bins)
    span = max(np.ptp(values), 1e-6)
    grid = np.linspace(values.min() - 0.25 * span, values.max() + 0.25 * span, grid_points)
    return StatsProfile(rows, values, grid, gaussian_kde_silverman(values, grid), counts, edges)
