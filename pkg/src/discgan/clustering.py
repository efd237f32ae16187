"""Style features (RGB histogram + normalized mean depth) and K-means over them."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .formats import check_depth, check_rgb, write_csv
from .seeding import stream

logger = logging.getLogger(__name__)


@dataclass
class StyleFeature:
    histogram: np.ndarray  # (3, bins), each row sums to 1
    mean_depth: float  # in [0, 1]

    def vector(self, depth_weight: float = 1.0) -> np.ndarray:
        return np.concatenate([self.histogram.reshape(-1), [depth_weight * self.mean_depth]])


def extract_style_features(img: np.ndarray, depth: np.ndarray, bins: int = 16,
                           max_depth: float = 8.0) -> StyleFeature:
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if max_depth <= 0:
        raise ValueError("max_depth must be positive")
    img = check_rgb(img)
    depth = check_depth(depth, like=img)
    hist = np.empty((3, bins))
    for c in range(3):
        counts, _ = np.histogram(img[..., c], bins=bins, range=(0.0, 1.0))
        hist[c] = counts / counts.sum()
    mean_depth = float(np.clip(np.mean(depth, dtype=np.float64) / max_depth, 0.0, 1.0))
    return StyleFeature(hist, mean_depth)


def feature_matrix(features: Sequence[StyleFeature] | np.ndarray, depth_weight: float = 1.0) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = features.astype(np.float64)
        if X.ndim == 1:
            X = X[:, None]
        return X
    if len(features) == 0:
        raise ValueError("no features given")
    return np.stack([f.vector(depth_weight) for f in features])


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    trace: list[float]
    restart_traces: list[list[float]] = field(default_factory=list)

    def recompute_inertia(self, X: np.ndarray) -> float:
        return float(np.sum((X - self.centroids[self.labels]) ** 2))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "labels": self.labels.tolist(),
            "inertia": self.inertia,
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClusterModel:
        return cls(int(d["k"]), np.asarray(d["centroids"], dtype=np.float64),
                   np.asarray(d["labels"], dtype=np.int64), float(d["inertia"]),
                   [float(v) for v in d["trace"]])

    def save(self, path, **extra) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), **extra}, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> ClusterModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        j = int(rng.choice(n, p=d2 / total))
        idx.append(j)
        d2 = np.minimum(d2, _sq_dists(X, X[j:j + 1])[:, 0])
    return X[idx].copy()


def _repair_empty(labels: np.ndarray, X: np.ndarray, C: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return labels
        d2 = np.sum((X - C[labels]) ** 2, axis=1)
        d2[counts[labels] <= 1] = -1.0
        labels[int(np.argmax(d2))] = empty[0]


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
    k = len(C)
    labels = _repair_empty(np.argmin(_sq_dists(X, C), axis=1), X, C, k)
    trace: list[float] = []
    for _ in range(max_iter):
        C = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
        trace.append(float(np.sum((X - C[labels]) ** 2)))
        new = _repair_empty(np.argmin(_sq_dists(X, C), axis=1), X, C, k)
        if np.array_equal(new, labels):
            break
        labels = new
    return C, labels, trace


def kmeans_fit(features, k: int, seed: int = 0, max_iter: int = 100, restarts: int = 10,
               depth_weight: float = 1.0) -> ClusterModel:
    """Best-of-``restarts`` Lloyd K-means with k-means++ seeding.

    ``features`` is a list of :class:`StyleFeature` or an (n, d) array.
    """
    X = feature_matrix(features, depth_weight)
    n = len(X)
    if n == 0:
        raise ValueError("cannot cluster an empty feature set")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    distinct = len(np.unique(X, axis=0))
    if k > distinct:
        raise ValueError(f"k={k} exceeds the {distinct} distinct feature vectors (n={n})")
    rng = stream(seed, "clustering", k)
    best: ClusterModel | None = None
    traces = []
    for _ in range(max(restarts, 1)):
        C, labels, trace = _lloyd(X, _kmeans_pp(X, k, rng), max_iter)
        traces.append(trace)
        if best is None or trace[-1] < best.inertia:
            best = ClusterModel(k, C, labels, trace[-1], trace)
    best.restart_traces = traces
    return best


def assign_cluster(model: ClusterModel, f, depth_weight: float = 1.0) -> int:
    v = f.vector(depth_weight) if isinstance(f, StyleFeature) else np.asarray(f, dtype=np.float64)
    if v.shape != (model.centroids.shape[1],):
        raise ValueError(f"feature has shape {v.shape}, centroids expect ({model.centroids.shape[1]},)")
    return int(np.argmin(np.sum((model.centroids - v) ** 2, axis=1)))


def elbow_scan(features, k_range: Sequence[int], seed: int = 0, max_iter: int = 100,
               restarts: int = 10, depth_weight: float = 1.0) -> list[tuple[int, float]]:
    ks = list(k_range)
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("k_range must be strictly ascending")
    return [(k, kmeans_fit(features, k, seed, max_iter, restarts, depth_weight).inertia) for k in ks]


def suggest_k(curve: Sequence[tuple[int, float]], with_flag: bool = False):
    """k at the largest discrete second difference of the inertia curve.

    Only interior points qualify. Ties go to the smallest k. A curve whose
    second differences are all equal (e.g. flat) is degenerate; with
    ``with_flag`` the result is ``(k, degenerate)``.
    """
    if len(curve) < 3:
        raise ValueError("need at least 3 points for a second difference")
    ks = [k for k, _ in curve]
    y = np.array([v for _, v in curve], dtype=np.float64)
    d2 = y[:-2] - 2 * y[1:-1] + y[2:]
    i = int(np.argmax(d2))
    scale = max(float(np.max(np.abs(y))), 1e-300)
    degenerate = bool(np.all(np.abs(d2 - d2[0]) <= 1e-12 * scale))
    if degenerate:
        logger.warning("degenerate elbow curve; returning smallest interior k")
    k = ks[i + 1]
    return (k, degenerate) if with_flag else k


def write_features_csv(path, ids: Sequence[str], X: np.ndarray) -> None:
    header = ["id"] + [f"f{j}" for j in range(X.shape[1])]
    write_csv(path, header, ([i, *row] for i, row in zip(ids, X.tolist())))
