"""Adaptive client training: per-device partial-parameter freezing.

Devices are grouped by data volume with k-medoids; each group trains a share
of the parameters proportional to its mean volume. Which parameters stay
frozen is decided by a Fisher-weighted squared displacement between the
global model and the device's previous local model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .params import ParamVector


@dataclass
class Clustering:
    n_clusters: int
    assignment: np.ndarray  # device -> cluster id, clusters ordered by medoid volume
    medoids: np.ndarray  # medoid volume per cluster
    medoid_devices: np.ndarray
    psi: float

    def members(self, cluster):
        return np.flatnonzero(self.assignment == cluster)


def _assign(values, med_idx):
    dist = (values[:, None] - values[med_idx][None, :]) ** 2
    return dist.argmin(axis=1), float(dist.min(axis=1).sum())


def _swap_descent(values, medoids):
    medoids = list(medoids)
    _, cost = _assign(values, medoids)
    n = len(values)
    while True:
        best = (cost, None, None)
        for i in range(len(medoids)):
            for o in range(n):
                if o in medoids:
                    continue
                trial = medoids[:i] + [o] + medoids[i + 1:]
                _, c = _assign(values, trial)
                if c < best[0] - 1e-12 * max(1.0, abs(best[0])):
                    best = (c, i, o)
        if best[1] is None:
            return medoids, cost
        cost = best[0]
        medoids[best[1]] = best[2]


def _build_init(values, k):
    n = len(values)
    medoids = []
    for _ in range(k):
        best = None
        for o in range(n):
            if o in medoids:
                continue
            _, c = _assign(values, medoids + [o])
            if best is None or c < best[0]:
                best = (c, o)
        medoids.append(best[1])
    return medoids


def cluster_devices(volumes, n_clusters, seed=0, n_init=8):
    """PAM k-medoids on scalar data volumes with squared distances.

    One greedy BUILD start plus ``n_init`` seeded random starts, each run to
    a swap-local optimum; the cheapest result wins.
    """
    values = np.asarray(volumes, dtype=np.float64)
    n = values.size
    if n == 0:
        raise ContractError("need at least one device")
    if not 1 <= n_clusters <= n:
        raise ParameterError(f"cluster count must lie in [1, {n}], got {n_clusters}")
    rng = np.random.default_rng(seed)
    starts = [_build_init(values, n_clusters)]
    starts += [list(rng.choice(n, size=n_clusters, replace=False)) for _ in range(n_init)]
    best = None
    for start in starts:
        med, cost = _swap_descent(values, start)
        if best is None or cost < best[1] - 1e-12 * max(1.0, abs(best[1])):
            best = (med, cost)
    med = sorted(best[0], key=lambda i: (values[i], i))
    assignment, psi = _assign(values, med)
    # a medoid tied with another (equal volumes) still belongs to its own cluster
    assignment[med] = np.arange(n_clusters)
    return Clustering(n_clusters, assignment, values[med], np.asarray(med), psi)


def compute_proportion(cluster_volumes, d_max):
    """Share of parameters a device trains: cluster mean volume over the largest volume."""
    vols = np.asarray(cluster_volumes, dtype=np.float64)
    if vols.size == 0:
        raise ContractError("cluster is empty")
    if d_max <= 0:
        raise ContractError("largest data volume must be positive")
    return float(vols.mean() / d_max)


def device_proportions(volumes, clustering):
    vols = np.asarray(volumes, dtype=np.float64)
    d_max = vols.max()
    zeta = np.empty(vols.size)
    for c in range(clustering.n_clusters):
        idx = clustering.members(c)
        if idx.size:
            zeta[idx] = compute_proportion(vols[idx], d_max)
    return zeta


def fisher_from_grads(per_sample_grads):
    """Diagonal empirical Fisher: mean of squared per-sample gradients."""
    g = np.asarray(per_sample_grads, dtype=np.float64)
    return np.square(g).mean(axis=0)


def empirical_fisher(model, device, params, seed=0, max_samples=0, chunk=64):
    """Fisher diagonal of ``params`` on the device's data.

    ``max_samples`` > 0 restricts the estimate to a seeded subset.
    """
    n = len(device.y)
    if n == 0:
        raise ContractError("dataset is empty")
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    if 0 < max_samples < n:
        idx = np.sort(rng.choice(n, size=max_samples, replace=False))
    total = np.zeros(len(params))
    for lo in range(0, idx.size, chunk):
        sel = idx[lo:lo + chunk]
        total += model.squared_grad_sum(params, device.x[sel], device.y[sel], device.channel, rng)
    return total / idx.size


def _values(v):
    return v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)


def importance(w_global, w_local, fisher):
    """Elementwise ``(w_global - w_local)^2 * F``."""
    g, l, f = _values(w_global), _values(w_local), np.asarray(fisher, dtype=np.float64)
    if not g.shape == l.shape == f.shape:
        raise ContractError(f"length mismatch: {g.shape}, {l.shape}, {f.shape}")
    return np.square(g - l) * f


def frozen_count(n_params, zeta):
    """round-half-up of (1 - zeta) * P."""
    return int(math.floor((1.0 - zeta) * n_params + 0.5))


def select_and_freeze(scores, zeta, seed=None):
    """Freeze mask marking the (1 - zeta) share of entries with the smallest scores.

    Ties go to the lower index, or follow a seeded random order when ``seed`` is given.
    """
    if not 0.0 < zeta <= 1.0:
        raise ParameterError(f"trainable proportion must lie in (0, 1], got {zeta}")
    s = np.abs(np.asarray(scores, dtype=np.float64))
    k = frozen_count(s.size, zeta)
    mask = np.zeros(s.size, dtype=bool)
    if k:
        if seed is None:
            order = np.argsort(s, kind="stable")
        else:
            perm = np.random.default_rng(seed).permutation(s.size)
            order = perm[np.argsort(s[perm], kind="stable")]
        mask[order[:k]] = True
    return mask


def hessian_consistency_check(w_global, w_local, hessian_diag):
    """Importance total vs. exact loss change of a diagonal quadratic.

    Returns ``(sum(importance), 0.5 * d^T H d)`` with ``d = w_global - w_local``.
    """
    d = _values(w_global) - _values(w_local)
    h = np.asarray(hessian_diag, dtype=np.float64)
    lhs = float(importance(w_global, w_local, h).sum())
    rhs = float(0.5 * d @ (h * d))
    return lhs, rhs
