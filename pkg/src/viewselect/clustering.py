"""
Standard clustering algorithms over feature-vector sets: seeded k-means with
restarts and agglomerative clustering with average, ward or complete linkage
"""

from dataclasses import dataclass, field, asdict, fields
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from utils.errors import DimensionMismatchError, ValidationError

ALGORITHMS = ("kmeans", "agglomerative")
LINKAGES = ("average", "ward", "complete")


@dataclass
class PipelineConfig:
    """
    Clustering stage of a pipeline. The feature-extractor half of a pipeline
    is externalized: ``feature_store`` optionally names a parallel feature
    store holding the same ViewIds under another extractor.
    """
    name: str = "XCE_AGG"
    algorithm: str = "agglomerative"
    linkage: str = "average"
    kmeans_restarts: int = 10
    kmeans_max_iters: int = 300
    seed: int = 0
    normalize: bool = False
    feature_store: Optional[str] = None

    def violations(self) -> List[str]:
        """List every violated constraint"""
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"pipeline.{self.name}.algorithm: must be one of {ALGORITHMS}, got '{self.algorithm}'")
        if self.linkage not in LINKAGES:
            problems.append(f"pipeline.{self.name}.linkage: must be one of {LINKAGES}, got '{self.linkage}'")
        if self.kmeans_restarts < 1:
            problems.append(f"pipeline.{self.name}.kmeans_restarts: must be >= 1")
        if self.kmeans_max_iters < 1:
            problems.append(f"pipeline.{self.name}.kmeans_max_iters: must be >= 1")
        return problems

    def validate(self) -> 'PipelineConfig':
        problems = self.violations()
        if problems:
            raise ValidationError("Invalid pipeline configuration", violations=problems)
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PipelineConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown pipeline configuration keys",
                violations=[f"pipeline.{key}: unknown key" for key in sorted(unknown)]
            )
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ClusterAssignment:
    """Cluster labels in [0, k), canonically numbered by first appearance"""
    labels: np.ndarray
    k: int
    inertia: Optional[float] = None

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class LloydResult:
    """Outcome of Lloyd iterations from one initialization"""
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int
    history: List[float] = field(default_factory=list)


def _check_points(points: np.ndarray, k: int) -> np.ndarray:
    """Validate a point matrix and cluster count; return float64 copy"""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("Points must be a nonempty n x d matrix", context={"shape": X.shape})
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValidationError("Cluster count must satisfy 1 <= k <= n", context={"k": k, "n": n})
    if not np.all(np.isfinite(X)):
        raise ValidationError("Points contain non-finite values", context={"n": n})
    return X


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0, 1, ... in order of first appearance"""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].astype(np.int64)


def l2_normalize(points: np.ndarray) -> np.ndarray:
    """Scale rows to unit norm, leaving zero rows untouched"""
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    return np.divide(points, norms, out=points.copy(), where=norms > 0)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """
    D^2-weighted seeding

    Args:
        points: n x d matrix with at least k distinct rows
        k: Number of centers
        rng: Random generator

    Returns:
        k x d matrix of initial centers
    """
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    dist_sq = cdist(points, centers[:1], "sqeuclidean")[:, 0]
    for i in range(1, k):
        total = dist_sq.sum()
        next_idx = rng.choice(n, p=dist_sq / total)
        centers[i] = points[next_idx]
        dist_sq = np.minimum(dist_sq, cdist(points, centers[i:i + 1], "sqeuclidean")[:, 0])
    return centers


def lloyd(points: np.ndarray, centers: np.ndarray, max_iters: int) -> LloydResult:
    """
    Lloyd iterations with empty-cluster repair.

    An empty cluster takes the point farthest from its current center among
    clusters holding more than one point. Inertia is recorded after every
    center update and never increases.

    Args:
        points: n x d float64 matrix
        centers: k x d initial centers
        max_iters: Iteration cap

    Returns:
        LloydResult
    """
    n = points.shape[0]
    k = centers.shape[0]
    centers = centers.copy()
    labels = np.full(n, -1, dtype=np.int64)
    history: List[float] = []
    inertia = np.inf
    iterations = 0

    for iterations in range(1, max_iters + 1):
        d2 = cdist(points, centers, "sqeuclidean")
        new_labels = np.argmin(d2, axis=1)

        counts = np.bincount(new_labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), new_labels]
            candidates = np.where(counts[new_labels] > 1, own, -np.inf)
            far = int(np.argmax(candidates))
            counts[new_labels[far]] -= 1
            new_labels[far] = empty
            counts[empty] = 1

        for j in range(k):
            centers[j] = points[new_labels == j].mean(axis=0)

        inertia = float(((points - centers[new_labels]) ** 2).sum())
        history.append(inertia)

        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    return LloydResult(labels=labels, centers=centers, inertia=inertia, iterations=iterations, history=history)


def kmeans(points: np.ndarray, k: int, cfg: PipelineConfig) -> ClusterAssignment:
    """
    k-means with k-means++ seeding and restarts

    Args:
        points: n x d matrix
        k: Requested cluster count
        cfg: Pipeline configuration (restarts, iteration cap, seed)

    Returns:
        Assignment with min(k, distinct points) clusters, lowest inertia over restarts

    Raises:
        ValidationError: If k > n or the input is non-finite
    """
    X = _check_points(points, k)
    if cfg.normalize:
        X = l2_normalize(X)
    k_eff = min(k, np.unique(X, axis=0).shape[0])

    rng = np.random.default_rng(cfg.seed)
    best: Optional[LloydResult] = None
    for _ in range(cfg.kmeans_restarts):
        result = lloyd(X, kmeans_plusplus(X, k_eff, rng), cfg.kmeans_max_iters)
        if best is None or result.inertia < best.inertia:
            best = result

    return ClusterAssignment(labels=canonical_labels(best.labels), k=k_eff, inertia=best.inertia)


def agglomerative(points: np.ndarray, k: int, cfg: PipelineConfig) -> ClusterAssignment:
    """
    Bottom-up merging on Euclidean distance until k clusters remain.

    Inter-cluster distances are maintained with the Lance-Williams update.
    Each cluster lives in the slot of its smallest member index; among
    equally close pairs the lexicographically smallest slot pair merges.

    Args:
        points: n x d matrix
        k: Number of clusters to keep
        cfg: Pipeline configuration (linkage)

    Returns:
        ClusterAssignment with exactly k clusters

    Raises:
        ValidationError: If k > n or the input is non-finite
    """
    X = _check_points(points, k)
    if cfg.normalize:
        X = l2_normalize(X)
    n = X.shape[0]

    slot = np.arange(n)
    if n > 1 and k < n:
        dist = squareform(pdist(X))
        np.fill_diagonal(dist, np.inf)
        upper = np.triu(np.ones((n, n), dtype=bool), 1)
        sizes = np.ones(n, dtype=np.float64)
        active = np.ones(n, dtype=bool)

        for _ in range(n - k):
            flat = int(np.argmin(np.where(upper, dist, np.inf)))
            i, j = divmod(flat, n)
            d_ij = dist[i, j]
            d_i, d_j = dist[i], dist[j]
            n_i, n_j = sizes[i], sizes[j]

            if cfg.linkage == "average":
                merged = (n_i * d_i + n_j * d_j) / (n_i + n_j)
            elif cfg.linkage == "complete":
                merged = np.maximum(d_i, d_j)
            else:
                with np.errstate(invalid="ignore"):
                    squared = ((n_i + sizes) * d_i ** 2 + (n_j + sizes) * d_j ** 2 - sizes * d_ij ** 2) / (n_i + n_j + sizes)
                merged = np.sqrt(np.clip(squared, 0.0, None))

            active[j] = False
            merged = np.where(active, merged, np.inf)
            merged[i] = np.inf
            dist[i, :] = merged
            dist[:, i] = merged
            dist[j, :] = np.inf
            dist[:, j] = np.inf
            sizes[i] = n_i + n_j
            slot[slot == j] = i

    return ClusterAssignment(labels=canonical_labels(slot), k=k)


def cluster_points(points: np.ndarray, k: int, cfg: PipelineConfig) -> ClusterAssignment:
    """Dispatch on the configured algorithm"""
    if cfg.algorithm == "kmeans":
        return kmeans(points, k, cfg)
    if cfg.algorithm == "agglomerative":
        return agglomerative(points, k, cfg)
    raise ValidationError("Unknown clustering algorithm", context={"algorithm": cfg.algorithm})


def cluster_views(views: Sequence, k: int, cfg: PipelineConfig) -> ClusterAssignment:
    """
    Cluster view records by their feature vectors

    Args:
        views: ViewRecords sharing one feature dimension
        k: Number of clusters
        cfg: Pipeline configuration

    Returns:
        ClusterAssignment aligned with views

    Raises:
        ValidationError: If views is empty
        DimensionMismatchError: If feature dimensions differ
    """
    if not views:
        raise ValidationError("cluster_views needs at least one view")
    dims = {np.asarray(v.features).shape for v in views}
    if len(dims) != 1:
        raise DimensionMismatchError("Views have mixed feature dimensions", context={"shapes": sorted(dims)})
    points = np.stack([np.asarray(v.features, dtype=np.float64) for v in views])
    return cluster_points(points, k, cfg)
