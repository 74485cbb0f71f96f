"""Per-pixel augmented features (color, position, normal) and their quantization
into weighted point clouds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from otappear.image_io import GeometryMaps, ImageBuffer, ImageFormatError, decode_normals

KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6


@dataclass(frozen=True)
class PixelFeatures:
    """One augmented feature row per pixel, in row-major pixel order.

    Columns are laid out as ``color | position | normal``; ``color_dims`` is
    always 3, the other two blocks may be absent (width 0).
    """

    vectors: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    position_dims: int
    normal_dims: int
    image_shape: tuple[int, int]

    color_dims: int = 3

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def colors(self) -> np.ndarray:
        return self.vectors[:, :3]


@dataclass(frozen=True)
class WeightedPointCloud:
    """Discrete histogram: N points in R^d with nonnegative weights summing to 1.

    ``labels`` maps each input feature row to its cloud point when the cloud
    was built from pixel features (None otherwise).
    """

    points: np.ndarray
    weights: np.ndarray
    labels: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if pts.shape[0] < 1:
            raise ValueError("point cloud needs at least one point")
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise ValueError("point cloud contains NaN or inf")
        if w.min() < 0:
            raise ValueError("negative weight")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def uniform(cls, points) -> "WeightedPointCloud":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))


def synthetic_positions(height: int, width: int) -> np.ndarray:
    """Normalized (col / (W - 1), row / (H - 1)) grid; a unit-length axis maps to 0."""
    xs = np.arange(width) / (width - 1) if width > 1 else np.zeros(width)
    ys = np.arange(height) / (height - 1) if height > 1 else np.zeros(height)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=2)


def build_augmented_features(
    image: ImageBuffer,
    geometry: Optional[GeometryMaps] = None,
    position_weight: float = 1.0,
    normal_weight: float = 1.0,
) -> PixelFeatures:
    if position_weight < 0 or normal_weight < 0:
        raise ValueError("feature weights must be nonnegative")
    geometry = geometry or GeometryMaps()
    h, w = image.shape
    try:
        geometry.check_shape((h, w))
    except ImageFormatError as exc:
        raise ValueError(str(exc)) from exc

    blocks = [image.data.reshape(-1, 3)]
    if geometry.position_map is not None:
        pos = geometry.position_map.data
    else:
        pos = synthetic_positions(h, w)
    blocks.append(pos.reshape(h * w, -1) * position_weight)
    normal_dims = 0
    if geometry.normal_map is not None:
        blocks.append(decode_normals(geometry.normal_map).reshape(-1, 3) * normal_weight)
        normal_dims = 3

    rows, cols = np.divmod(np.arange(h * w), w)
    return PixelFeatures(
        vectors=np.hstack(blocks),
        rows=rows,
        cols=cols,
        position_dims=pos.shape[2],
        normal_dims=normal_dims,
        image_shape=(h, w),
    )


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i : i + 1])[:, 0])
    return centers


def lloyd(
    x: np.ndarray,
    centers: np.ndarray,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations; empty clusters keep their previous centroid."""
    centers = centers.copy()
    k = centers.shape[0]
    for _ in range(max_iter):
        labels = np.argmin(_sq_dists(x, centers), axis=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    return centers, labels


def quantize_to_cloud(features, max_points: int, seed: int = 0) -> WeightedPointCloud:
    """Discretize features into at most ``max_points`` weighted points.

    When the number of distinct feature vectors fits, the result is the exact
    empirical distribution with duplicates merged; otherwise k-means++ seeded
    Lloyd clustering, weights being cluster mass fractions.
    """
    x = features.vectors if isinstance(features, PixelFeatures) else np.asarray(features, float)
    x = np.atleast_2d(x)
    n = x.shape[0]
    if n < 1:
        raise ValueError("no features to quantize")
    if max_points < 1:
        raise ValueError("max_points must be >= 1")

    uniq, inverse, counts = np.unique(x, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if uniq.shape[0] <= max_points:
        return WeightedPointCloud(uniq, counts / n, labels=inverse)

    rng = np.random.default_rng(seed)
    centers, labels = lloyd(x, kmeans_plus_plus(x, max_points, rng))
    counts = np.bincount(labels, minlength=max_points)
    keep = np.flatnonzero(counts)
    remap = np.full(max_points, -1)
    remap[keep] = np.arange(keep.size)
    return WeightedPointCloud(centers[keep], counts[keep] / n, labels=remap[labels])
