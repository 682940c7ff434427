"""Point annotations, neighbor search, and per-point Gaussian sigma estimators.

Every supervision signal downstream starts from a :class:`PointSet`.  The two
estimators implemented here are the geometry-adaptive kernel (sigma from the
mean k-NN distance of each point over the whole image) and its non-uniform
variant (sigma averaged over all annotations inside a local region centered at
the point), plus the box-derived reference used when boxes are available.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import MissingBoxes, NoNeighbors, ShapeMismatch

# Sigma assigned when an image has a single point and no pairwise distance
# exists anywhere; keeps the pipeline total.
FALLBACK_SIGMA = 15.0

DEFAULT_K = 5
DEFAULT_BETA = 0.3
DEFAULT_REGION_FRACTION = 1.0 / 8.0


@dataclass(frozen=True)
class PointSet:
    """Per-image point annotations with optional parallel boxes.

    Points are (x, y) in pixels with 0 <= x < width, 0 <= y < height.
    Boxes, when present, are (x, y, w, h) with w > 0 and h > 0.
    """

    image_width: int
    image_height: int
    points: tuple[tuple[float, float], ...] = ()
    boxes: tuple[tuple[float, float, float, float], ...] | None = None

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")
        object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))
        for x, y in self.points:
            if not (0 <= x < self.image_width and 0 <= y < self.image_height):
                raise ValueError(f"point ({x}, {y}) outside image bounds")
        if self.boxes is not None:
            boxes = tuple(tuple(float(v) for v in b) for b in self.boxes)
            object.__setattr__(self, "boxes", boxes)
            if len(boxes) != len(self.points):
                raise ValueError("boxes must be parallel to points")
            for _, _, w, h in boxes:
                if w <= 0 or h <= 0:
                    raise ValueError("box sides must be positive")

    def __len__(self):
        return len(self.points)

    def points_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).reshape(len(self.points), 2)


@dataclass(frozen=True)
class SigmaAssignment:
    """Per-point Gaussian standard deviations, parallel to a PointSet."""

    sigmas: tuple[float, ...]
    estimator_tag: str = field(default="fixed")

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sigmas)
        for s in sigmas:
            if not (s > 0 and np.isfinite(s)):
                raise ValueError(f"sigma must be positive and finite, got {s}")

    def __len__(self):
        return len(self.sigmas)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=np.float64)


def fixed_sigma(ps: PointSet, sigma: float) -> SigmaAssignment:
    """Assign the same sigma to every point."""
    return SigmaAssignment(sigmas=(float(sigma),) * len(ps), estimator_tag="fixed")


def knn_distances(points, query_index: int, k: int) -> list[float]:
    """The k smallest Euclidean distances from one point to the others, ascending.

    The query point is excluded from its own neighbor set.  If fewer than k
    other points exist, all available distances are returned.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise NoNeighbors(f"need at least 2 points, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = np.linalg.norm(pts - pts[query_index], axis=1)
    d = np.delete(d, query_index)
    d.sort()
    return d[: min(k, n - 1)].tolist()


def _mean_knn_distances(pts: np.ndarray, k: int) -> np.ndarray:
    """Mean distance from every point to its k nearest neighbors (global pool)."""
    n = len(pts)
    kk = min(k, n - 1)
    tree = cKDTree(pts)
    # first column is the zero self-distance
    dists, _ = tree.query(pts, k=kk + 1)
    dists = np.atleast_2d(dists)
    return dists[:, 1:].mean(axis=1)


def estimate_sigma_gak(ps: PointSet, k: int = DEFAULT_K, beta: float = DEFAULT_BETA) -> SigmaAssignment:
    """Geometry-adaptive kernel: sigma_P = beta * mean k-NN distance of P."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = len(ps)
    if n == 0:
        return SigmaAssignment(sigmas=(), estimator_tag="gak")
    if n == 1:
        return SigmaAssignment(sigmas=(FALLBACK_SIGMA,), estimator_tag="gak")
    dbar = _mean_knn_distances(ps.points_array(), k)
    return SigmaAssignment(sigmas=tuple(beta * dbar), estimator_tag="gak")


def estimate_sigma_nonuniform(
    ps: PointSet,
    k: int = DEFAULT_K,
    beta: float = DEFAULT_BETA,
    region_fraction: float = DEFAULT_REGION_FRACTION,
) -> SigmaAssignment:
    """Local-region kernel estimator.

    For each point P, sigma_P is the mean of beta * dbar_a over every
    annotation a inside the axis-aligned region of size
    (region_fraction * image size) centered at P and clipped to image bounds.
    dbar_a is a's mean distance to its k nearest neighbors over the whole
    image, identical to the per-point quantity used by the GAK.
    """
    if not (0 < region_fraction <= 1):
        raise ValueError("region_fraction must be in (0, 1]")
    if k < 1:
        raise ValueError("k must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = len(ps)
    if n == 0:
        return SigmaAssignment(sigmas=(), estimator_tag="nonuniform")
    if n == 1:
        return SigmaAssignment(sigmas=(FALLBACK_SIGMA,), estimator_tag="nonuniform")

    pts = ps.points_array()
    dbar = _mean_knn_distances(pts, k)
    half_w = region_fraction * ps.image_width / 2.0
    half_h = region_fraction * ps.image_height / 2.0
    sigmas = np.empty(n)
    for i in range(n):
        # region clipped at image borders without re-centering
        x0 = max(pts[i, 0] - half_w, 0.0)
        x1 = min(pts[i, 0] + half_w, float(ps.image_width))
        y0 = max(pts[i, 1] - half_h, 0.0)
        y1 = min(pts[i, 1] + half_h, float(ps.image_height))
        inside = (
            (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        )
        sigmas[i] = beta * dbar[inside].mean()
    return SigmaAssignment(sigmas=tuple(sigmas), estimator_tag="nonuniform")


def sigma_from_boxes(ps: PointSet) -> SigmaAssignment:
    """Reference sigma from box annotations: half the shorter box side."""
    if ps.boxes is None:
        raise MissingBoxes("point set carries no box annotations")
    sigmas = tuple(min(w, h) / 2.0 for _, _, w, h in ps.boxes)
    return SigmaAssignment(sigmas=sigmas, estimator_tag="from_boxes")


def sigma_error(estimated: SigmaAssignment, reference: SigmaAssignment) -> float:
    """Mean absolute difference between two parallel sigma assignments."""
    if len(estimated) != len(reference):
        raise ShapeMismatch(
            f"sigma assignments differ in length: {len(estimated)} vs {len(reference)}"
        )
    return float(np.abs(estimated.as_array() - reference.as_array()).mean())


# --- annotation file format -------------------------------------------------
#
# One image: {"image": "<id>", "width": W, "height": H,
#             "points": [[x, y], ...], "boxes": [[x, y, w, h], ...]}
# A dataset file is a JSON array of such objects.


def pointset_to_dict(image_id: str, ps: PointSet) -> dict:
    d = {
        "image": image_id,
        "width": ps.image_width,
        "height": ps.image_height,
        "points": [[x, y] for x, y in ps.points],
    }
    if ps.boxes is not None:
        d["boxes"] = [list(b) for b in ps.boxes]
    return d


def pointset_from_dict(d: dict) -> tuple[str, PointSet]:
    ps = PointSet(
        image_width=int(d["width"]),
        image_height=int(d["height"]),
        points=tuple((p[0], p[1]) for p in d["points"]),
        boxes=tuple(tuple(b) for b in d["boxes"]) if "boxes" in d else None,
    )
    return str(d["image"]), ps


def load_annotations(path) -> list[tuple[str, PointSet]]:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    return [pointset_from_dict(d) for d in data]


def save_annotations(path, items) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([pointset_to_dict(i, ps) for i, ps in items], f)
