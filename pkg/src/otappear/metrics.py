"""Image comparison metrics: SSIM on images and on Sobel edge maps, Gram and
content losses over a fixed random filter bank, and a color-histogram
Wasserstein distance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from otappear.features import quantize_to_cloud
from otappear.image_io import ImageBuffer
from otappear.solvers import cost_matrix, exact_ot_small, plan_cost

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def luma(image) -> np.ndarray:
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        return data
    return data @ LUMA


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[:2]} vs {b.shape[:2]}")


def ssim(a, b, window: int = 8, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean SSIM over all stride-1 uniform windows of the BT.601 luma channel.

    Accepts ImageBuffers or 2-D single-channel arrays.
    """
    ya, yb = luma(a), luma(b)
    _check_same_shape(ya, yb)
    if min(ya.shape) < window:
        raise ValueError(f"image {ya.shape} is smaller than the {window}x{window} window")
    wa = sliding_window_view(ya, (window, window))
    wb = sliding_window_view(yb, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _correlate3(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 correlation with edge replication."""
    p = np.pad(y, 1, mode="edge")
    h, w = y.shape
    out = np.zeros_like(y)
    for dr in range(3):
        for dc in range(3):
            out += kernel[dr, dc] * p[dr : dr + h, dc : dc + w]
    return out


def _sobel(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Separable Sobel responses (x, y) with edge replication.

    Differences are taken first so flat regions give exactly zero.
    """
    p = np.pad(y, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def edge_map(image) -> np.ndarray:
    """Sobel gradient magnitude of luma, scaled so the maximum is 1."""
    mag = np.hypot(*_sobel(luma(image)))
    peak = mag.max()
    return mag / peak if peak > 0 else np.zeros_like(mag)


def ssim_edge(a, b, window: int = 8) -> float:
    return ssim(edge_map(a), edge_map(b), window=window)


@dataclass(frozen=True)
class FeatureBank:
    """K fixed random unit-norm 3x3 filters applied to luma at full and half scale."""

    n_kernels: int = 16
    seed: int = 0
    kernels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        k = rng.standard_normal((self.n_kernels, 3, 3))
        k /= np.sqrt((k * k).sum(axis=(1, 2)))[:, None, None]
        k.setflags(write=False)
        object.__setattr__(self, "kernels", k)

    def responses(self, image) -> list[np.ndarray]:
        """One (pixels x K) response matrix per scale."""
        y = luma(image)
        scales = [y]
        h, w = (y.shape[0] // 2) * 2, (y.shape[1] // 2) * 2
        if h and w:
            half = y[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            scales.append(half)
        return [np.stack([_correlate3(s, k).ravel() for k in self.kernels], axis=1) for s in scales]


def gram_matrices(image, bank: FeatureBank) -> list[np.ndarray]:
    return [r.T @ r / r.shape[0] for r in bank.responses(image)]


def gram_loss(a, b, bank: FeatureBank | None = None) -> float:
    """Mean over scales of the squared Frobenius distance between Gram matrices."""
    bank = bank or FeatureBank()
    _check_same_shape(luma(a), luma(b))
    ga, gb = gram_matrices(a, bank), gram_matrices(b, bank)
    return float(np.mean([((x - y) ** 2).sum() for x, y in zip(ga, gb)]))


def content_loss(a, b, bank: FeatureBank | None = None) -> float:
    """Mean absolute difference of filter-bank responses, averaged over scales."""
    bank = bank or FeatureBank()
    _check_same_shape(luma(a), luma(b))
    ra, rb = bank.responses(a), bank.responses(b)
    return float(np.mean([np.abs(x - y).mean() for x, y in zip(ra, rb)]))


def histogram_w_distance(a: ImageBuffer, b: ImageBuffer, max_points: int = 64, seed: int = 0) -> float:
    """Exact squared-Euclidean OT cost between quantized color histograms."""
    if max_points > 64:
        raise ValueError("histogram distance uses the exact solver: max_points <= 64")
    ca = quantize_to_cloud(a.data.reshape(-1, 3), max_points, seed)
    cb = quantize_to_cloud(b.data.reshape(-1, 3), max_points, seed)
    C = cost_matrix(ca, cb)
    return plan_cost(exact_ot_small(C, ca.weights, cb.weights), C)


def metric_report(result: ImageBuffer, reference: ImageBuffer, edge_reference: ImageBuffer | None = None,
                  bank: FeatureBank | None = None) -> dict:
    """SSIM-whole, Gram and content losses against ``reference``; SSIM-edge
    against ``edge_reference`` (defaults to ``reference``)."""
    bank = bank or FeatureBank()
    edge_reference = reference if edge_reference is None else edge_reference
    return {
        "ssim_whole": ssim(result, reference),
        "ssim_edge": ssim_edge(result, edge_reference),
        "gram_loss": gram_loss(result, reference, bank),
        "content_loss": content_loss(result, reference, bank),
        "histogram_w": histogram_w_distance(result, reference),
    }
