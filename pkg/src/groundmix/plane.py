"""Least-squares ground plane from object bottom centers."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometry, TooFewPoints
from .geometry import Box3D, GroundPlane, Vec3

DEGENERACY_TOL = 1e-9


def bottom_center(b: Box3D) -> Vec3:
    """Center of the box's bottom face, ``center + R @ (0, h/2, 0)``.

    "Bottom" is the face at local ``+y`` (y points down in the box frame, as in
    the camera frame), whatever the box's orientation in the camera frame.
    """
    p = b.c + b.R @ np.array([0.0, b.dims[1] / 2.0, 0.0])
    return (float(p[0]), float(p[1]), float(p[2]))


def _canonical_sign(n: np.ndarray) -> np.ndarray:
    # n_y >= 0, ties broken by n_z then n_x
    for axis in (1, 2, 0):
        if abs(n[axis]) > 1e-12:
            return n if n[axis] > 0 else -n
    return n


def fit_ground_plane(points: Sequence[Sequence[float]]) -> GroundPlane:
    """Fit ``n . p = d`` to ``points`` in the least-squares sense.

    The normal is the left-singular vector of the centered ``3 x N`` point
    matrix belonging to its smallest singular value; the plane passes through
    the centroid.

    Raises:
        TooFewPoints: fewer than 3 points.
        DegenerateGeometry: points (nearly) collinear, i.e. the second
            singular value is below ``1e-9``.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise TooFewPoints(f"need at least 3 points, got {len(P)}")
    centroid = P.mean(axis=0)
    X = (P - centroid).T
    U, S, _ = np.linalg.svd(X, full_matrices=True)
    if S[1] <= DEGENERACY_TOL:
        raise DegenerateGeometry(f"points are collinear (sigma_2={S[1]:.3g})")
    n = _canonical_sign(U[:, 2])
    n = n / np.linalg.norm(n)
    return GroundPlane(n, float(n @ centroid))


def fit_plane_to_boxes(boxes: Iterable[Box3D]) -> GroundPlane:
    return fit_ground_plane([bottom_center(b) for b in boxes])


def should_apply_groundmix(sample) -> bool:
    """True iff the sample has at least 3 boxes and a plane can be fitted."""
    boxes = sample.boxes
    if len(boxes) < 3:
        return False
    try:
        fit_plane_to_boxes(boxes)
    except (TooFewPoints, DegenerateGeometry):
        return False
    return True


def plane_residuals(plane: GroundPlane, points) -> np.ndarray:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    return P @ plane.n - plane.offset
