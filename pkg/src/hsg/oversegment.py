"""Base pixel grouping: spherical k-means, gradient-watershed regions, refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure, segmentation


class TooFewPoints(ValueError):
    pass


class GridTooFine(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class ClusterSet:
    centroids: np.ndarray
    member_counts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.centroids)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    clusters: ClusterSet
    objective: float
    history: list


def relabel(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Map labels onto 0..n-1 in order of first appearance."""
    flat = np.asarray(labels).ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].reshape(np.shape(labels)).astype(np.int64), len(first)


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _kmeans_once(points, centroids, iters):
    k = len(centroids)
    history = []
    for _ in range(iters):
        sims = points @ centroids.T
        assign = sims.argmax(axis=1)
        own = sims[np.arange(len(points)), assign]
        history.append(float(own.mean()))
        onehot = np.zeros((len(points), k))
        onehot[np.arange(len(points)), assign] = 1.0
        sums = onehot.T @ points
        counts = np.bincount(assign, minlength=k)
        new = centroids.copy()
        live = counts > 0
        new[live] = _normalize(sums[live])
        # empty clusters take the worst-fit points, one each
        worst = np.argsort(own, kind="stable")
        for j, p in zip(np.flatnonzero(~live), worst):
            new[j] = points[p]
        centroids = new
    sims = points @ centroids.T
    assign = sims.argmax(axis=1)
    objective = float(sims[np.arange(len(points)), assign].mean())
    history.append(objective)
    counts = np.bincount(assign, minlength=k)
    return assign, ClusterSet(centroids, counts), objective, history


def spherical_kmeans(points, k: int, iters: int = 15, seed: int = 0, restarts: int = 1,
                     init: np.ndarray | None = None) -> KMeansResult:
    """Cosine k-means on unit vectors.

    ``history`` holds the mean cosine to the assigned centroid after every
    assignment step; it never decreases.  With ``init`` the given centroids
    seed a single run, otherwise each restart seeds from ``k`` distinct random
    points and the best objective wins.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or n < k:
        raise TooFewPoints(f"need N >= k >= 1, got N={n}, k={k}")
    if init is not None:
        runs = [_normalize(np.asarray(init, dtype=np.float64))]
    else:
        runs = []
        for r in range(restarts):
            rng = np.random.default_rng([seed, r])
            runs.append(points[rng.choice(n, size=k, replace=False)].copy())
    best = None
    for start in runs:
        result = KMeansResult(*_kmeans_once(points, start, iters))
        if best is None or result.objective > best.objective:
            best = result
    return best


def grid_partition(height: int, width: int, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1 or rows > height or cols > width:
        raise GridTooFine(f"{rows}x{cols} grid on {height}x{width}")
    r = np.arange(height) * rows // height
    c = np.arange(width) * cols // width
    return r[:, None] * cols + c[None, :]


def init_grid_centroids(features, rows: int = 4, cols: int = 4) -> ClusterSet:
    """Normalized mean feature of each tile of a rows x cols spatial grid."""
    features = np.asarray(features)
    h, w, m = features.shape
    if rows * cols > h * w:
        raise GridTooFine(f"{rows}x{cols} tiles exceed {h}x{w} pixels")
    tiles = grid_partition(h, w, rows, cols).ravel()
    sums = np.zeros((rows * cols, m))
    np.add.at(sums, tiles, features.reshape(-1, m))
    counts = np.bincount(tiles, minlength=rows * cols)
    return ClusterSet(_normalize(sums), counts)


def base_grouping(features, rows: int = 4, cols: int = 4, iters: int = 15) -> np.ndarray:
    """G0: grid-seeded spherical k-means labels over a feature map, contiguous."""
    features = np.asarray(features)
    h, w, m = features.shape
    init = init_grid_centroids(features, rows, cols)
    result = spherical_kmeans(features.reshape(-1, m), rows * cols, iters, init=init.centroids)
    labels, _ = relabel(result.assignments.reshape(h, w))
    return labels


# ---------------------------------------------------------------------------
# coherent regions


def _sobel_magnitude(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    mag = np.zeros(image.shape[:2])
    for ch in range(image.shape[2]):
        gy = ndimage.sobel(image[..., ch], axis=0, mode="reflect")
        gx = ndimage.sobel(image[..., ch], axis=1, mode="reflect")
        mag += gx * gx + gy * gy
    return np.sqrt(mag)


def _grid_tiles(height: int, width: int, n: int) -> np.ndarray:
    rows = max(r for r in range(1, int(np.sqrt(n)) + 1) if n % r == 0)
    return grid_partition(height, width, rows, n // rows)


def _select_seeds(grad: np.ndarray, count: int, spacing: int) -> list:
    minima = grad <= ndimage.minimum_filter(grad, size=3, mode="nearest")
    cand = np.flatnonzero(minima.ravel())
    order = cand[np.lexsort((cand, grad.ravel()[cand]))]
    w = grad.shape[1]
    chosen = []
    for idx in order:
        r, c = divmod(int(idx), w)
        if all(max(abs(r - r2), abs(c - c2)) >= spacing for r2, c2 in chosen):
            chosen.append((r, c))
            if len(chosen) == count:
                break
    return chosen


def _merge_regions(labels: np.ndarray, image: np.ndarray, grad: np.ndarray,
                   target_n: int) -> np.ndarray:
    """Greedy merging of adjacent regions, weakest contrast first.

    Contrast of a pair = distance between region mean colours plus the mean
    gradient along their shared boundary.
    """
    n = int(labels.max()) + 1
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n).astype(np.float64)
    sums = np.stack([np.bincount(flat, weights=image[..., ch].ravel(), minlength=n)
                     for ch in range(image.shape[2])], axis=1)
    edges: dict = {}
    for a, b, ga, gb in ((labels[:, :-1], labels[:, 1:], grad[:, :-1], grad[:, 1:]),
                         (labels[:-1, :], labels[1:, :], grad[:-1, :], grad[1:, :])):
        diff = a != b
        lo, hi = np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])
        for x, y, v in zip(lo.tolist(), hi.tolist(), np.maximum(ga[diff], gb[diff]).tolist()):
            s0, c0 = edges.get((x, y), (0.0, 0))
            edges[(x, y)] = (s0 + v, c0 + 1)
    parent = list(range(n))
    live = n

    def contrast(key):
        x, y = key
        s0, c0 = edges[key]
        return float(np.linalg.norm(sums[x] / counts[x] - sums[y] / counts[y])) + s0 / c0

    while live > target_n and edges:
        a, b = min(edges, key=lambda key: (contrast(key), key))
        parent[b] = a
        sums[a] += sums[b]
        counts[a] += counts[b]
        live -= 1
        merged: dict = {}
        for (x, y), (s0, c0) in edges.items():
            x2, y2 = (a if x == b else x), (a if y == b else y)
            if x2 == y2:
                continue
            key = (min(x2, y2), max(x2, y2))
            s1, c1 = merged.get(key, (0.0, 0))
            merged[key] = (s1 + s0, c1 + c0)
        edges = merged

    def root(i):
        while parent[i] != i:
            i = parent[i]
        return i

    lut = np.array([root(i) for i in range(n)])
    return relabel(lut[labels])[0]


def coherent_regions(image, target_n: int = 12, seeds_per_region: int = 4,
                     smooth: float = 1.0) -> np.ndarray:
    """Edge-respecting regions standing in for an OWT-UCM segmentation.

    Sobel gradient magnitude of the lightly smoothed image, a seeded
    watershed from well-spaced low-gradient minima, then greedy merging of
    the lowest-contrast adjacent pair until at most ``target_n`` regions
    remain.
    Constant images fall back to a grid of ``target_n`` tiles.
    """
    if target_n < 1:
        raise ValueError("target_n must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w = image.shape[:2]
    if smooth > 0:
        image = ndimage.gaussian_filter(image, sigma=(smooth, smooth, 0), mode="reflect")
    grad = _sobel_magnitude(image)
    if np.ptp(grad) < 1e-12:
        return relabel(_grid_tiles(h, w, target_n))[0]
    spacing = max(2, int(np.sqrt(h * w / (seeds_per_region * target_n)) / 2))
    seeds = _select_seeds(grad, seeds_per_region * target_n, spacing)
    markers = np.zeros((h, w), dtype=np.int64)
    for i, (r, c) in enumerate(seeds, start=1):
        markers[r, c] = i
    labels = segmentation.watershed(grad, markers, connectivity=1) - 1
    labels = relabel(labels)[0]
    return _merge_regions(labels, image, grad, target_n)


def refine_segments(g0: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """4-connected components of the overlay of two label maps."""
    g0, regions = np.asarray(g0), np.asarray(regions)
    if g0.shape != regions.shape:
        raise DimensionMismatch(f"{g0.shape} vs {regions.shape}")
    key = g0.astype(np.int64) * (int(regions.max()) + 1) + regions
    comps = measure.label(key, background=-1, connectivity=1)
    return relabel(comps)[0]


def is_refinement(fine: np.ndarray, coarse: np.ndarray) -> bool:
    """True when every label of ``fine`` sits inside a single label of ``coarse``."""
    fine, coarse = np.asarray(fine).ravel(), np.asarray(coarse).ravel()
    pairs = np.unique(np.stack([fine, coarse]), axis=1)
    return len(np.unique(pairs[0])) == pairs.shape[1]
