"""Hard-evidence front end for continuous observations.

Vectors are clustered with Lloyd's k-means, each cluster gets a number of
clones proportional to its share of the data, and every vector is replaced by
the label of its nearest centroid. From there the discrete learners apply
unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CloneStructure, ModelError, Trajectory


class QuantizerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Quantizer:
    centroids: np.ndarray   # (K, d)
    priors: np.ndarray      # (K,)
    sigma2: float

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float64)
        p = np.array(self.priors, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise QuantizerError("centroids must be a non-empty (K, d) array")
        if p.shape != (c.shape[0],) or abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
            raise QuantizerError("priors must be a probability vector with one entry per centroid")
        c.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "priors", p)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        return (isinstance(other, Quantizer) and np.array_equal(self.centroids, other.centroids)
                and np.array_equal(self.priors, other.priors) and self.sigma2 == other.sigma2)

    __hash__ = None


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def _assign(x, centroids):
    d = _sq_dists(x, centroids)
    labels = d.argmin(1)            # argmin returns the first minimum: ties go to the lowest index
    return labels, d[np.arange(len(x)), labels]


def _plus_plus_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a centre; take the first unused points
            idx = len(centers)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def fit_kmeans(data, k: int, seed: int = 0, max_iters: int = 100) -> Quantizer:
    """Lloyd's iterations from k-means++ seeding until the assignment stops changing.

    An emptied cluster is moved onto the point farthest from its current
    centroid (lowest index among equals), so the run is fully determined by
    ``seed``. Total distortion is checked to never increase.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise QuantizerError("data must be an (n, d) array")
    if k < 1 or len(x) < k:
        raise QuantizerError(f"need at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_seeds(x, k, rng)
    labels, dist = _assign(x, centroids)
    distortion = dist.sum()
    for _ in range(max_iters):
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(0)
            else:
                far = int(np.argmax(dist))
                centroids[c] = x[far]
                labels[far] = c
                dist[far] = 0.0
        new_labels, dist = _assign(x, centroids)
        new_distortion = dist.sum()
        if new_distortion > distortion * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means distortion increased: {distortion} -> {new_distortion}")
        distortion = new_distortion
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    counts = np.bincount(labels, minlength=k)
    return Quantizer(centroids, counts / counts.sum(), float(dist.mean() / x.shape[1]))


def allocate_clones(q: Quantizer, total_states: int) -> CloneStructure:
    """Clones per cluster proportional to its prior, at least one each, summing to ``total_states``."""
    k = q.n_clusters
    if total_states < k:
        raise QuantizerError(f"total_states={total_states} is smaller than K={k}")
    ideal = q.priors * total_states
    sizes = np.maximum(1, np.round(ideal).astype(np.int64))
    # largest-remainder correction; argmax picks the lowest index among ties
    while sizes.sum() < total_states:
        sizes[int(np.argmax(ideal - sizes))] += 1
    while sizes.sum() > total_states:
        sizes[int(np.argmax(np.where(sizes > 1, sizes - ideal, -np.inf)))] -= 1
    return CloneStructure.from_sizes(sizes)


def quantize(q: Quantizer, x) -> np.ndarray:
    """Nearest-centroid label for one vector (returns an int) or a batch (returns an array)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != q.dim:
        raise QuantizerError(f"vector dimension {arr.shape[1]} does not match quantizer dimension {q.dim}")
    labels, _ = _assign(arr, q.centroids)
    return int(labels[0]) if single else labels


def quantize_trajectory(q: Quantizer, traj: Trajectory) -> Trajectory:
    if traj.is_discrete:
        raise ModelError("trajectory is already discrete")
    return Trajectory(quantize(q, traj.observations), traj.actions)


def transfer_quantize(schema, traj: Trajectory, k: int, seed: int = 0, tie_clones: bool = False, **kw):
    """Re-cluster a new environment's vectors, quantize them, then bind ``schema`` by emission EM.

    Returns ``(binding, quantizer)``. ``k`` may differ from the number of
    clusters the schema was trained with but cannot exceed its state count.
    """
    from .learn_e import learn_emissions

    n_states = schema.T.shape[1]
    if k > n_states:
        raise QuantizerError(f"K={k} exceeds the schema's {n_states} states")
    q = fit_kmeans(traj.observations, k, seed=seed)
    discrete = quantize_trajectory(q, traj)
    binding = learn_emissions(schema, discrete, k, tie_clones=tie_clones, **kw)
    binding.model = binding.model.replace(quantizer=q)
    return binding, q
