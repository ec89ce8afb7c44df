"""UMAP-style 2-D embeddings of image sets for inspecting device-induced
variance: exact k-NN graph, fuzzy union, force-directed layout, cluster metrics
and SVG/CSV export."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
import torch
import torch.nn.functional as F
from scipy import optimize, sparse
from scipy.spatial.distance import cdist
from sklearn.manifold import trustworthiness
from sklearn.metrics import silhouette_score

from .data import Sample

FEATURE_SHAPE = (40, 72)
SMOOTH_K_STEPS = 64
MIN_SIGMA_SCALE = 1e-3


@dataclass
class EmbeddingConfig:
    n_neighbors: int = 15
    min_dist: float = 0.1
    epochs: int = 200
    negative_sample_rate: int = 5
    seed: int = 0
    spread: float = 1.0

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be >= 2")
        if not 0.0 < self.min_dist < 1.0:
            raise ValueError("min_dist must be in (0, 1)")
        if self.epochs < 1 or self.negative_sample_rate < 0:
            raise ValueError("epochs must be >= 1 and negative_sample_rate >= 0")


@dataclass
class EmbeddingPoint:
    x: float
    y: float
    device: str
    plane: str
    sample_id: str


@dataclass
class KNNGraph:
    indices: np.ndarray  # (n, k) neighbor ids sorted by distance
    distances: np.ndarray  # (n, k)
    weights: np.ndarray  # (n, k) membership strengths
    rho: np.ndarray
    sigma: np.ndarray

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    def to_sparse(self) -> sparse.csr_matrix:
        n, k = self.indices.shape
        rows = np.repeat(np.arange(n), k)
        return sparse.csr_matrix((self.weights.ravel(), (rows, self.indices.ravel())), shape=(n, n))


def image_features(samples: Sequence[Sample]) -> np.ndarray:
    """Raw pixels downsampled to 40x72 and flattened."""
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
    small = F.interpolate(x, size=FEATURE_SHAPE, mode="bilinear", align_corners=False, antialias=True)
    return small.reshape(len(samples), -1).numpy().astype(np.float64)


def exact_neighbors(features: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    d = cdist(features, features)
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def smooth_knn(distances: np.ndarray, steps: int = SMOOTH_K_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-point rho (nearest distance) and sigma with
    sum_j exp(-(d_j - rho) / sigma) = log2(k), found by bisection."""
    n, k = distances.shape
    target = math.log2(k)
    rho = distances[:, 0].copy()
    sigma = np.empty(n)
    mean_all = distances.mean()
    for i in range(n):
        excess = np.maximum(distances[i] - rho[i], 0.0)
        lo, hi, mid = 0.0, np.inf, 1.0
        for _ in range(steps):
            total = np.exp(-excess / mid).sum()
            if total > target:
                hi = mid
                mid = (lo + hi) / 2
            else:
                lo = mid
                mid = mid * 2 if hi == np.inf else (lo + hi) / 2
        floor = MIN_SIGMA_SCALE * (distances[i].mean() if rho[i] > 0 else mean_all)
        sigma[i] = max(mid, floor, 1e-12)
    return rho, sigma


def knn_graph(features: np.ndarray, k: int) -> KNNGraph:
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if k >= n:
        raise ValueError(f"k={k} needs at least {k + 1} points, got {n}")
    idx, dist = exact_neighbors(features, k)
    rho, sigma = smooth_knn(dist)
    weights = np.exp(-np.maximum(dist - rho[:, None], 0.0) / sigma[:, None])
    return KNNGraph(idx, dist, weights, rho, sigma)


def fuzzy_union(graph: KNNGraph | sparse.spmatrix) -> sparse.csr_matrix:
    """Symmetrize with the probabilistic t-conorm w + w' - w * w'."""
    w = graph.to_sparse() if isinstance(graph, KNNGraph) else sparse.csr_matrix(graph)
    wt = w.T.tocsr()
    out = (w + wt - w.multiply(wt)).tocsr()
    out.eliminate_zeros()
    return out


def fit_ab(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """Least-squares fit of 1 / (1 + a d^(2b)) to the piecewise target curve."""
    x = np.linspace(0, spread * 3, 300)
    y = np.where(x < min_dist, 1.0, np.exp(-(x - min_dist) / spread))
    (a, b), _ = optimize.curve_fit(lambda d, a, b: 1.0 / (1.0 + a * d ** (2 * b)), x, y)
    return float(a), float(b)


def spectral_init(graph: sparse.csr_matrix, rng: np.random.Generator) -> np.ndarray:
    n = graph.shape[0]
    try:
        w = graph.toarray()
        deg = w.sum(axis=1)
        d = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
        lap = np.eye(n) - d[:, None] * w * d[None, :]
        _, vecs = np.linalg.eigh(lap)
        coords = vecs[:, 1:3]
        if not np.isfinite(coords).all():
            raise np.linalg.LinAlgError("non-finite eigenvectors")
        coords = coords * (10.0 / np.abs(coords).max())
        return coords + rng.normal(0, 1e-4, size=coords.shape)
    except np.linalg.LinAlgError:
        return rng.uniform(-10, 10, size=(n, 2))


@numba.njit(cache=True)
def _clip(v):
    return min(4.0, max(-4.0, v))


@numba.njit(cache=True)
def _optimize(emb, heads, tails, epochs_per_sample, a, b, n_epochs, neg_rate, seed):
    np.random.seed(seed)
    n = emb.shape[0]
    n_edges = heads.shape[0]
    eps_neg = epochs_per_sample / neg_rate
    next_sample = epochs_per_sample.copy()
    next_neg = eps_neg.copy()
    for epoch in range(n_epochs):
        alpha = 1.0 - epoch / n_epochs
        for e in range(n_edges):
            if next_sample[e] > epoch:
                continue
            i = heads[e]
            j = tails[e]
            dx = emb[i, 0] - emb[j, 0]
            dy = emb[i, 1] - emb[j, 1]
            d2 = dx * dx + dy * dy
            if d2 > 0.0:
                coef = -2.0 * a * b * d2 ** (b - 1.0) / (a * d2 ** b + 1.0)
            else:
                coef = 0.0
            gx = _clip(coef * dx) * alpha
            gy = _clip(coef * dy) * alpha
            emb[i, 0] += gx
            emb[i, 1] += gy
            emb[j, 0] -= gx
            emb[j, 1] -= gy
            next_sample[e] += epochs_per_sample[e]
            n_neg = int((epoch - next_neg[e]) / eps_neg[e]) if neg_rate > 0 else 0
            for _ in range(n_neg):
                k = np.random.randint(n)
                if k == i:
                    continue
                dx = emb[i, 0] - emb[k, 0]
                dy = emb[i, 1] - emb[k, 1]
                d2 = dx * dx + dy * dy
                if d2 > 0.0:
                    coef = 2.0 * b / ((0.001 + d2) * (a * d2 ** b + 1.0))
                    emb[i, 0] += _clip(coef * dx) * alpha
                    emb[i, 1] += _clip(coef * dy) * alpha
                else:
                    emb[i, 0] += 4.0 * alpha
                    emb[i, 1] += 4.0 * alpha
            if neg_rate > 0:
                next_neg[e] += n_neg * eps_neg[e]
    return emb


def layout_2d(graph: sparse.spmatrix, config: EmbeddingConfig) -> np.ndarray:
    """Force-directed layout of a symmetric fuzzy graph; returns (n, 2) coords."""
    graph = sparse.csr_matrix(graph)
    n = graph.shape[0]
    if n == 0:
        return np.zeros((0, 2))
    if n == 1:
        return np.zeros((1, 2))
    rng = np.random.default_rng(config.seed)
    a, b = fit_ab(config.min_dist, config.spread)
    emb = spectral_init(graph, rng)
    coo = graph.tocoo()
    keep = coo.data >= coo.data.max() / config.epochs
    heads, tails, w = coo.row[keep], coo.col[keep], coo.data[keep]
    order = np.lexsort((tails, heads))
    heads, tails, w = heads[order], tails[order], w[order]
    epochs_per_sample = w.max() / w
    emb = _optimize(
        emb.astype(np.float64), heads.astype(np.int64), tails.astype(np.int64),
        epochs_per_sample.astype(np.float64), a, b, config.epochs,
        float(config.negative_sample_rate), config.seed % (2**32),
    )
    if not np.isfinite(emb).all():
        raise FloatingPointError("layout produced non-finite coordinates")
    return emb


def embed_features(features: np.ndarray, config: EmbeddingConfig) -> np.ndarray:
    n = len(features)
    if n <= 1:
        return np.zeros((n, 2))
    k = min(config.n_neighbors, n - 1)
    return layout_2d(fuzzy_union(knn_graph(features, k)), config)


def embed_samples(samples: Sequence[Sample], config: EmbeddingConfig) -> list[EmbeddingPoint]:
    """Embed each plane separately so planes do not form their own clusters."""
    points = []
    for plane in sorted({s.plane for s in samples}):
        group = [s for s in samples if s.plane == plane]
        coords = embed_features(image_features(group), config)
        points.extend(
            EmbeddingPoint(float(x), float(y), s.device, s.plane, s.sample_id)
            for (x, y), s in zip(coords, group)
        )
    return points


# -- metrics

def label_purity(coords: np.ndarray, labels: Sequence[str], k: int = 10) -> float:
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        return 1.0
    idx, _ = exact_neighbors(coords, min(k, n - 1))
    return float((labels[idx] == labels[:, None]).mean())


def cluster_metrics(points: Sequence[EmbeddingPoint] | np.ndarray, labels: Sequence[str] | None = None,
                    label_key: str = "device", k: int = 10) -> dict:
    """Silhouette of the labels on the 2-D coordinates and k-NN label purity.
    Singleton labels are left out of the silhouette and listed in the report."""
    if labels is None:
        coords = np.array([[p.x, p.y] for p in points], dtype=np.float64)
        labels = [getattr(p, label_key) for p in points]
    else:
        coords = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    singletons = uniq[counts == 1].tolist()
    keep = ~np.isin(labels, singletons)
    report = {"n_points": int(len(labels)), "n_labels": int(len(uniq)), "excluded_singletons": singletons,
              "purity": label_purity(coords, labels, k)}
    if len(np.unique(labels[keep])) >= 2:
        report["silhouette"] = float(silhouette_score(coords[keep], labels[keep]))
    else:
        report["silhouette"] = None
    return report


def embedding_trustworthiness(features: np.ndarray, coords: np.ndarray, k: int = 10) -> float:
    return float(trustworthiness(features, coords, n_neighbors=k))


# -- export

def write_points_csv(points: Sequence[EmbeddingPoint], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "plane", "device", "x", "y"])
        for p in points:
            w.writerow([p.sample_id, p.plane, p.device, repr(p.x), repr(p.y)])


def read_points_csv(path) -> list[EmbeddingPoint]:
    with open(path, newline="") as fh:
        return [
            EmbeddingPoint(float(r["x"]), float(r["y"]), r["device"], r["plane"], r["sample_id"])
            for r in csv.DictReader(fh)
        ]


def export_plot(points: Sequence[EmbeddingPoint], path, csv_path=None) -> None:
    """SVG scatter with one panel per plane (TC left, TV right) and one color
    per device; also writes the points as CSV."""
    from .plots import scatter_panels

    path = Path(path)
    scatter_panels(points, path)
    write_points_csv(points, csv_path if csv_path is not None else path.with_suffix(".csv"))
