"""RBF kernel, its gradient, the pluggable distance hook, and the median
bandwidth policy.

Distance callables return the *squared* dissimilarity that sits inside the
RBF exponent; the bandwidth heuristic takes the square root before the
median, so h = med^2 / log(B) is computed from plain (non-squared) distances.

Gradient slot convention: ``rbf_grad_first(x, x2, h)`` differentiates the
kernel with respect to ``x``, its first argument. The particle-mixing update
sums gradients taken with respect to the *other* particle's position, i.e.
grad_{x_j} k(x_j, x_i), which is ``rbf_grad_first(x_j, x_i, h)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

MEDIAN = "median-heuristic"
SQUARED_EUCLIDEAN = "squared-euclidean"


def _sq_euclidean(x: np.ndarray, x2: np.ndarray) -> float:
    d = x - x2
    return float(np.dot(d, d))


def _sq_euclidean_grad(x: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return 2.0 * (x - x2)


# name -> (squared distance, gradient of squared distance wrt first argument)
_DISTANCES: dict[str, tuple[Callable, Callable | None]] = {
    SQUARED_EUCLIDEAN: (_sq_euclidean, _sq_euclidean_grad),
}


def register_distance(name: str, sqdist: Callable, grad: Callable | None = None) -> None:
    """Register a pluggable squared-dissimilarity, optionally with its gradient.

    Without a gradient the distance can back kernel values and bandwidths but
    not the repulsion term of particle mixing.
    """
    _DISTANCES[name] = (sqdist, grad)


def distance_ids() -> tuple[str, ...]:
    return tuple(_DISTANCES)


def get_distance(name: str) -> tuple[Callable, Callable | None]:
    try:
        return _DISTANCES[name]
    except KeyError:
        raise KeyError(f"unknown distance id {name!r}; registered: {sorted(_DISTANCES)}") from None


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel configuration: distance hook plus bandwidth policy.

    ``bandwidth`` is either the string "median-heuristic" or a fixed h > 0.
    """

    distance: str = SQUARED_EUCLIDEAN
    bandwidth: float | str = MEDIAN

    def __post_init__(self):
        if self.distance not in _DISTANCES:
            raise ValueError(f"unknown distance id {self.distance!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN:
                raise ValueError(f"bandwidth must be {MEDIAN!r} or a positive number")
        elif not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError(f"fixed bandwidth must be > 0, got {self.bandwidth}")


def rbf(x: np.ndarray, x2: np.ndarray, h: float, distance: str = SQUARED_EUCLIDEAN) -> float:
    """k(x, x2) = exp(-sqdist(x, x2) / h), in (0, 1]."""
    if h <= 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x2.shape}")
    sqdist, _ = get_distance(distance)
    return math.exp(-sqdist(x, x2) / h)


def rbf_grad_first(
    x: np.ndarray, x2: np.ndarray, h: float, distance: str = SQUARED_EUCLIDEAN
) -> np.ndarray:
    """grad_x k(x, x2): for squared euclidean this is -(2/h) (x - x2) k(x, x2)."""
    if h <= 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x2.shape}")
    sqdist, grad = get_distance(distance)
    if grad is None:
        raise ValueError(f"distance {distance!r} has no registered gradient")
    k = math.exp(-sqdist(x, x2) / h)
    return (-k / h) * grad(x, x2)


def pairwise_distances(points: np.ndarray, distance: str = SQUARED_EUCLIDEAN) -> np.ndarray:
    """The B(B-1)/2 plain (non-squared) pairwise distances."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if distance == SQUARED_EUCLIDEAN:
        diff = points[:, None, :] - points[None, :, :]
        sq = np.einsum("ijd,ijd->ij", diff, diff)
        iu = np.triu_indices(n, k=1)
        return np.sqrt(np.maximum(sq[iu], 0.0))
    sqdist, _ = get_distance(distance)
    out = [sqdist(points[i], points[j]) for i in range(n) for j in range(i + 1, n)]
    return np.sqrt(np.maximum(np.asarray(out, dtype=float), 0.0))


def median_bandwidth(points: np.ndarray, distance: str = SQUARED_EUCLIDEAN) -> float:
    """h = med^2 / log(B) with med the median pairwise distance.

    Falls back to h = 1 (with a warning) when the points coincide.
    """
    points = np.asarray(points, dtype=float)
    b = len(points)
    if b < 2:
        raise ValueError(f"median bandwidth needs at least 2 points, got {b}")
    med = float(np.median(pairwise_distances(points, distance)))
    h = med * med / math.log(b)
    if h <= 0.0:
        logger.warning("degenerate median bandwidth (med=%g, B=%d); falling back to h=1", med, b)
        return 1.0
    return h


def resolve_bandwidth(spec: KernelSpec, points: np.ndarray) -> float:
    """Bandwidth for one update step: fixed h, or the median heuristic.

    A single point cannot support the heuristic; the kernel value at zero
    distance is 1 for any h, so fall back to h = 1 with a warning.
    """
    if not isinstance(spec.bandwidth, str):
        return float(spec.bandwidth)
    if len(points) < 2:
        logger.warning("median bandwidth undefined for %d point(s); falling back to h=1", len(points))
        return 1.0
    return median_bandwidth(points, spec.distance)


def kernel_matrices(points: np.ndarray, spec: KernelSpec, h: float | None = None):
    """Pairwise kernel values and source-slot gradients for one particle set.

    Returns (K, gradK, h) where K[j, i] = k(x_j, x_i) and
    gradK[j, i] = grad_{x_j} k(x_j, x_i), shape (n, n, d). The bandwidth is
    resolved once per call unless supplied.
    """
    points = np.asarray(points, dtype=float)
    if h is None:
        h = resolve_bandwidth(spec, points)
    n = len(points)
    if spec.distance == SQUARED_EUCLIDEAN:
        diff = points[:, None, :] - points[None, :, :]  # diff[j, i] = x_j - x_i
        sq = np.einsum("jid,jid->ji", diff, diff)
        K = np.exp(-sq / h)
        gradK = (-2.0 / h) * diff * K[:, :, None]
        return K, gradK, h
    sqdist, grad = get_distance(spec.distance)
    if grad is None:
        raise ValueError(f"distance {spec.distance!r} has no registered gradient")
    K = np.empty((n, n))
    gradK = np.empty((n, n, points.shape[1]))
    for j in range(n):
        for i in range(n):
            k = math.exp(-sqdist(points[j], points[i]) / h)
            K[j, i] = k
            gradK[j, i] = (-k / h) * grad(points[j], points[i])
    return K, gradK, h
