"""Shared box / rectangle / Gaussian primitives used by the trackers and metrics.

Everything works in raw image pixels: boxes are axis-aligned and stored as
(center, size), object states are 6-vectors (cx, cy, w, h, vx, vy).
All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

STATE_DIM = 6

# Covariance floor added when fitting / inverting Gaussians (px^2).
COV_EPSILON = 1e-6


class DegenerateWeightsError(ValueError):
    """All weights are zero (or negative) where a positive mass was required."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in the image plane, stored as center plus size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive size, got w={self.w} h={self.h}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    def to_rect(self) -> "Rect":
        return Rect(self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class Rect:
    """Corner-form rectangle (x0, y0) .. (x1, y1), non-degenerate."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate rect {(self.x0, self.y0, self.x1, self.y1)}")


@dataclass(frozen=True)
class GaussianState:
    """Gaussian over a 6D object state (cx, cy, w, h, vx, vy)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (STATE_DIM,):
            raise ValueError(f"mean must be a {STATE_DIM}-vector, got {mean.shape}")
        if cov.shape != (STATE_DIM, STATE_DIM):
            raise ValueError(f"cov must be {STATE_DIM}x{STATE_DIM}, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-9):
            raise ValueError("covariance is not symmetric")
        eigvals = np.linalg.eigvalsh((cov + cov.T) / 2)
        if eigvals.min() < -1e-9:
            raise ValueError(f"covariance has negative eigenvalue {eigvals.min()}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2)

    def box(self) -> BBox:
        cx, cy, w, h = self.mean[:4]
        return BBox(cx, cy, max(w, 1e-6), max(h, 1e-6))


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def set_distance(box: Rect, cell: Rect) -> float:
    """Minimum Euclidean distance between two rectangles as point sets.

    Zero whenever the rectangles intersect or touch.
    """
    dx = max(0.0, box.x0 - cell.x1, cell.x0 - box.x1)
    dy = max(0.0, box.y0 - cell.y1, cell.y0 - box.y1)
    return float(np.hypot(dx, dy))


def rect_distances(boxes: np.ndarray, rects: np.ndarray) -> np.ndarray:
    """Pairwise set distances between N boxes and M rectangles.

    ``boxes`` is (N, 4) in (cx, cy, w, h) form, ``rects`` is (M, 4) in
    corner form; returns an (N, M) matrix. Vectorized twin of
    :func:`set_distance` for the per-cell likelihood loops.
    """
    boxes = np.asarray(boxes, dtype=float)
    rects = np.asarray(rects, dtype=float)
    bx0 = (boxes[:, 0] - boxes[:, 2] / 2)[:, None]
    bx1 = (boxes[:, 0] + boxes[:, 2] / 2)[:, None]
    by0 = (boxes[:, 1] - boxes[:, 3] / 2)[:, None]
    by1 = (boxes[:, 1] + boxes[:, 3] / 2)[:, None]
    dx = np.maximum(0.0, np.maximum(bx0 - rects[None, :, 2], rects[None, :, 0] - bx1))
    dy = np.maximum(0.0, np.maximum(by0 - rects[None, :, 3], rects[None, :, 1] - by1))
    return np.hypot(dx, dy)


def fit_gaussian(points: Sequence[np.ndarray] | np.ndarray,
                 weights: Sequence[float] | np.ndarray) -> GaussianState:
    """Weighted Gaussian fit of 6D points.

    Returns the weighted mean and weighted (population) covariance with a
    COV_EPSILON * I floor so downstream inverses stay well posed. Weight
    scale is irrelevant; all-zero weights raise DegenerateWeightsError.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    if pts.shape[0] != w.shape[0]:
        raise ValueError("points and weights length mismatch")
    if pts.shape[0] == 0:
        raise ValueError("need at least one point")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError("weights sum to zero")
    w = w / total
    mean = w @ pts
    centered = pts - mean
    cov = (centered * w[:, None]).T @ centered
    cov = (cov + cov.T) / 2 + COV_EPSILON * np.eye(pts.shape[1])
    return GaussianState(mean=mean, cov=cov)


def mahalanobis(x: np.ndarray, g: GaussianState) -> float:
    """Mahalanobis distance of ``x`` from the Gaussian ``g``.

    The covariance gets the COV_EPSILON floor before inversion; a matrix
    still singular after that raises numpy's LinAlgError.
    """
    x = np.asarray(x, dtype=float)
    diff = x - g.mean
    cov = g.cov + COV_EPSILON * np.eye(g.cov.shape[0])
    sol = np.linalg.solve(cov, diff)
    return float(np.sqrt(max(diff @ sol, 0.0)))
