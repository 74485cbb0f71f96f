"""End-to-end appearance transfer between two images."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from otappear.features import WeightedPointCloud, build_augmented_features, quantize_to_cloud
from otappear.image_io import GeometryMaps, ImageBuffer
from otappear.metrics import histogram_w_distance
from otappear.neural import TrainConfig, condition_vector, train_notpe
from otappear.solvers import (
    COST_KINDS,
    TransportPlan,
    cost_matrix,
    exact_ot_small,
    plan_cost,
    sinkhorn,
)

METHODS = ("sinkhorn", "exact", "neural")
DEFAULT_MAX_POINTS = {"sinkhorn": 256, "exact": 64, "neural": 256}


@dataclass(frozen=True)
class TransferOptions:
    method: str = "sinkhorn"
    max_points: Optional[int] = None  # None: 64 for exact, 256 otherwise
    epsilon: float = 0.01
    position_weight: float = 0.5
    normal_weight: float = 1.0
    seed: int = 0
    smoothing_radius: int = 2
    cost_kind: str = "sqeuclidean"
    sinkhorn_max_iter: int = 5000
    sinkhorn_tol: float = 1e-6
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.cost_kind not in COST_KINDS:
            raise ValueError(f"cost_kind must be one of {COST_KINDS}")
        if self.max_points is not None and self.max_points < 1:
            raise ValueError("max_points must be >= 1")
        if self.method == "exact" and self.resolved_max_points > 64:
            raise ValueError("exact method supports at most 64 points")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.position_weight < 0 or self.normal_weight < 0:
            raise ValueError("feature weights must be nonnegative")
        if self.smoothing_radius < 0:
            raise ValueError("smoothing_radius must be >= 0")

    @property
    def resolved_max_points(self) -> int:
        return self.max_points if self.max_points is not None else DEFAULT_MAX_POINTS[self.method]


@dataclass
class TransferReport:
    method: str
    cost: float
    marginal_error: Optional[float]
    seconds: float
    histogram_distance_before: float
    histogram_distance_after: float
    n_source_points: int = 0
    n_target_points: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def barycentric_map(plan, target_cloud, source_points=None) -> np.ndarray:
    """Conditional mean of the target points under each row of the coupling.

    Rows carrying no mass map to their own source point, so ``source_points``
    is required whenever such a row exists.
    """
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    pts = target_cloud.points if isinstance(target_cloud, WeightedPointCloud) else np.asarray(target_cloud, float)
    if P.shape[1] != pts.shape[0]:
        raise ValueError(f"plan has {P.shape[1]} columns, target cloud has {pts.shape[0]} points")
    mass = P.sum(axis=1)
    nz = mass > 0
    out = np.empty((P.shape[0], pts.shape[1]))
    out[nz] = (P[nz] @ pts) / mass[nz, None]
    if not nz.all():
        if source_points is None:
            raise ValueError("plan has empty rows; pass source_points to map them to themselves")
        src = source_points.points if isinstance(source_points, WeightedPointCloud) else np.asarray(source_points)
        out[~nz] = src[~nz]
    return out


def apply_mapping(
    image: ImageBuffer,
    source_cloud: WeightedPointCloud,
    mapped_points: np.ndarray,
    assignment: np.ndarray,
    smoothing_radius: int = 0,
) -> ImageBuffer:
    """Shift every pixel by its cloud point's color displacement.

    The pixel keeps its residual against the cloud point, so the new color
    is mapped_color + (pixel - cloud_color). The per-pixel displacement
    field is box-blurred with the given radius before being added.
    """
    h, w = image.shape
    assignment = np.asarray(assignment).ravel()
    if assignment.size != h * w:
        raise ValueError(f"assignment covers {assignment.size} pixels, image has {h * w}")
    delta = np.asarray(mapped_points)[:, :3] - source_cloud.points[:, :3]
    field_ = delta[assignment].reshape(h, w, 3)
    if smoothing_radius > 0:
        size = 2 * smoothing_radius + 1
        field_ = uniform_filter(field_, size=(size, size, 1), mode="nearest")
    return ImageBuffer.clamped(image.data + field_)


def _solve_discrete(cs, ct, options):
    C = cost_matrix(cs, ct, options.cost_kind)
    if options.method == "exact":
        plan = exact_ot_small(C, cs.weights, ct.weights)
    else:
        plan = sinkhorn(
            C,
            cs.weights,
            ct.weights,
            epsilon=options.epsilon,
            max_iter=options.sinkhorn_max_iter,
            tol=options.sinkhorn_tol,
        )
    mapped = barycentric_map(plan, ct, cs.points)
    return mapped, plan_cost(plan, C), plan.marginal_error


def _solve_neural(cs, ct, options):
    cond = condition_vector(cs.points, ct.points)
    omega = train_notpe(
        cs.points,
        ct.points,
        cond,
        options.train,
        source_weights=cs.weights,
        target_weights=ct.weights,
    )
    mapped = omega(cs.points)
    diff = mapped - cs.points
    sq = (diff * diff).sum(axis=1)
    per_point = sq if options.cost_kind == "sqeuclidean" else np.sqrt(sq)
    return mapped, float(cs.weights @ per_point), None


def transfer_appearance(
    source: ImageBuffer,
    target: ImageBuffer,
    source_geom: Optional[GeometryMaps] = None,
    target_geom: Optional[GeometryMaps] = None,
    options: TransferOptions = TransferOptions(),
) -> tuple[ImageBuffer, TransferReport]:
    """Move the color distribution of ``target`` onto ``source``.

    features -> quantized clouds -> OT solve -> per-point displacement ->
    residual-preserving application to every source pixel.
    """
    start = time.perf_counter()
    fs = build_augmented_features(source, source_geom, options.position_weight, options.normal_weight)
    ft = build_augmented_features(target, target_geom, options.position_weight, options.normal_weight)
    if fs.dim != ft.dim:
        raise ValueError(
            f"source features have {fs.dim} dims, target {ft.dim}; supply the same geometry maps for both"
        )
    k = options.resolved_max_points
    cs = quantize_to_cloud(fs, k, options.seed)
    ct = quantize_to_cloud(ft, k, options.seed)

    if options.method == "neural":
        mapped, cost, marginal = _solve_neural(cs, ct, options)
    else:
        mapped, cost, marginal = _solve_discrete(cs, ct, options)

    out = apply_mapping(source, cs, mapped, cs.labels, options.smoothing_radius)
    seconds = time.perf_counter() - start
    report = TransferReport(
        method=options.method,
        cost=cost,
        marginal_error=marginal,
        seconds=seconds,
        histogram_distance_before=histogram_w_distance(source, target, seed=options.seed),
        histogram_distance_after=histogram_w_distance(out, target, seed=options.seed),
        n_source_points=len(cs),
        n_target_points=len(ct),
    )
    return out, report
