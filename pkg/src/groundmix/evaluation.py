"""Detection metrics for full-SO(3) 3D boxes.

All AP values use 40-point interpolation: precision is interpolated as the
running maximum from the right and sampled at recall ``k/40`` for
``k = 1..40``. Matching is greedy in descending score; equal scores keep input
order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import Box2D, Box3D, CameraIntrinsics, box_corners, is_rotation, project_box_to_2d

RECALL_POINTS = 40
AP2D_THRESHOLDS = tuple(k / 20 for k in range(1, 20))
DEPTH_THRESHOLDS = tuple(float(x) for x in range(1, 21))
MATCH_2D_THRESHOLD = 0.7


@dataclass(frozen=True)
class Detection:
    """A 3D box attached to an image; ground truth uses the same type."""

    image_id: str
    box: Box3D

    @property
    def score(self) -> float:
        return 1.0 if self.box.score is None else self.box.score

    @property
    def category(self) -> int:
        return self.box.category


@dataclass(frozen=True)
class MatchResult:
    det_index: int
    tp: bool
    gt_index: Optional[int]
    iou: float


@dataclass
class PRCurve:
    precision: np.ndarray
    recall_levels: np.ndarray
    ap: float
    raw_precision: np.ndarray = field(default_factory=lambda: np.zeros(0))
    raw_recall: np.ndarray = field(default_factory=lambda: np.zeros(0))
    matches: List[MatchResult] = field(default_factory=list)
    n_gt: int = 0


# ---------------------------------------------------------------------------
# IoU

# corner indices of each cuboid face, in cyclic order
_FACES = ((0, 1, 3, 2), (4, 5, 7, 6), (0, 1, 5, 4), (2, 3, 7, 6), (0, 2, 6, 4), (1, 3, 7, 5))
_EPS = 1e-12


def iou2d(a: Optional[Box2D], b: Optional[Box2D]) -> float:
    if a is None or b is None:
        return 0.0
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return inter.area / union if union > 0 else 0.0


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _halfspaces(b: Box3D):
    """The 6 face half-spaces ``a . p <= off`` of a box."""
    R = b.R
    c = b.center
    out = []
    for k in range(3):
        axis = (float(R[0, k]), float(R[1, k]), float(R[2, k]))
        h = b.dims[k] / 2.0
        m = _dot(axis, c)
        out.append((axis, m + h))
        out.append(((-axis[0], -axis[1], -axis[2]), -m + h))
    return out


def _order_on_plane(points, normal):
    if len(points) < 3:
        return points
    m = tuple(sum(p[i] for p in points) / len(points) for i in range(3))
    ref = (1.0, 0.0, 0.0) if abs(normal[0]) < 0.9 else (0.0, 1.0, 0.0)
    u = _cross(normal, ref)
    w = _cross(normal, u)
    return sorted(points, key=lambda p: math.atan2(_dot(_sub(p, m), w), _dot(_sub(p, m), u)))


def _dedupe(points, tol):
    out = []
    for p in points:
        if all(abs(p[0] - q[0]) > tol or abs(p[1] - q[1]) > tol or abs(p[2] - q[2]) > tol for q in out):
            out.append(p)
    return out


def clip_polytope(faces, normal, offset, scale=1.0):
    """Clip a convex polytope (list of ordered face polygons) by ``normal . p <= offset``."""
    eps = _EPS * scale
    if all(_dot(normal, p) - offset <= eps for f in faces for p in f):
        return faces
    new_faces = []
    cap = []
    for face in faces:
        n = len(face)
        dists = [_dot(normal, p) - offset for p in face]
        out = []
        for i in range(n):
            p, dp = face[i], dists[i]
            q, dq = face[(i + 1) % n], dists[(i + 1) % n]
            p_in, q_in = dp <= eps, dq <= eps
            if p_in:
                out.append(p)
                if dp >= -eps:
                    cap.append(p)
            if p_in != q_in and abs(dp - dq) > 0:
                t = dp / (dp - dq)
                x = (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), p[2] + t * (q[2] - p[2]))
                out.append(x)
                cap.append(x)
        out = _dedupe(out, eps)
        if len(out) >= 3:
            new_faces.append(out)
    cap = _dedupe(cap, eps)
    if len(cap) >= 3 and new_faces:
        new_faces.append(_order_on_plane(cap, normal))
    return new_faces


def polytope_volume(faces) -> float:
    """Volume of a convex polytope from its face polygons (tetrahedra fan from the vertex mean)."""
    pts = [p for f in faces for p in f]
    if len(pts) < 4:
        return 0.0
    c = tuple(sum(p[i] for p in pts) / len(pts) for i in range(3))
    vol = 0.0
    for f in faces:
        a = _sub(f[0], c)
        for i in range(1, len(f) - 1):
            vol += abs(_dot(a, _cross(_sub(f[i], c), _sub(f[i + 1], c))))
    return vol / 6.0


def box_faces(b: Box3D):
    corners = [tuple(float(x) for x in row) for row in box_corners(b)]
    return [[corners[i] for i in face] for face in _FACES]


def intersection_volume(a: Box3D, b: Box3D) -> float:
    """Exact volume of ``a`` clipped by the 6 face half-spaces of ``b``."""
    scale = max(max(a.dims), max(b.dims), max(abs(x) for x in a.center + b.center), 1.0)
    faces = box_faces(a)
    for normal, offset in _halfspaces(b):
        faces = clip_polytope(faces, normal, offset, scale)
        if not faces:
            return 0.0
    return polytope_volume(faces)


def iou3d(a: Box3D, b: Box3D) -> float:
    """IoU of two arbitrarily oriented cuboids."""
    va = a.dims[0] * a.dims[1] * a.dims[2]
    vb = b.dims[0] * b.dims[1] * b.dims[2]
    if va <= 0 or vb <= 0:
        return 0.0
    # cheap rejection by bounding spheres
    ra = 0.5 * math.sqrt(sum(d * d for d in a.dims))
    rb = 0.5 * math.sqrt(sum(d * d for d in b.dims))
    d = _sub(a.center, b.center)
    if _dot(d, d) > (ra + rb) ** 2:
        return 0.0
    inter = intersection_volume(a, b)
    inter = min(inter, va, vb)
    union = va + vb - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# matching and curves


def rank_detections(dets: Sequence[Detection]) -> List[int]:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def greedy_match(
    dets: Sequence[Detection],
    gts: Sequence[Detection],
    sim_fn: Callable[[Detection, Detection], float],
    threshold: float,
    strict: bool = False,
) -> List[MatchResult]:
    """Greedy one-to-one matching in score order.

    A detection takes the unmatched ground truth (same image) with the highest
    similarity; it is a true positive when that similarity reaches
    ``threshold`` (exceeds it when ``strict``).
    """
    by_image: Dict[str, List[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    taken = set()
    results = []
    for i in rank_detections(dets):
        d = dets[i]
        best, best_j = -math.inf, None
        for j in by_image.get(d.image_id, ()):
            if j in taken:
                continue
            s = sim_fn(d, gts[j])
            if s > best:
                best, best_j = s, j
        ok = best_j is not None and (best > threshold if strict else best >= threshold)
        if ok:
            taken.add(best_j)
        results.append(MatchResult(i, bool(ok), best_j if ok else None, max(best, 0.0) if best_j is not None else 0.0))
    return results


def curve_from_matches(matches: Sequence[MatchResult], n_gt: int) -> PRCurve:
    levels = np.arange(1, RECALL_POINTS + 1) / RECALL_POINTS
    if n_gt == 0 or not matches:
        return PRCurve(np.zeros(RECALL_POINTS), levels, 0.0, matches=list(matches), n_gt=n_gt)
    tp = np.cumsum([m.tp for m in matches]).astype(float)
    ranks = np.arange(1, len(matches) + 1, dtype=float)
    precision = tp / ranks
    recall = tp / n_gt
    # running max from the right
    interp_src = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros(RECALL_POINTS)
    for k, r in enumerate(levels):
        idx = np.searchsorted(recall, r, side="left")
        if idx < len(recall):
            interp[k] = interp_src[idx]
    return PRCurve(
        precision=interp,
        recall_levels=levels,
        ap=float(interp.sum() / RECALL_POINTS),
        raw_precision=precision,
        raw_recall=recall,
        matches=list(matches),
        n_gt=n_gt,
    )


def _by_category(items: Iterable[Detection], category: Optional[int]) -> List[Detection]:
    return [x for x in items if category is None or x.category == category]


def match_and_curve(dets, gts, category, iou_fn, threshold, strict=False) -> PRCurve:
    dets = _by_category(dets, category)
    gts = _by_category(gts, category)
    matches = greedy_match(dets, gts, lambda d, g: iou_fn(d.box, g.box), threshold, strict)
    return curve_from_matches(matches, len(gts))


def ap3d(dets, gts, category=None, threshold: float = 0.5) -> float:
    return match_and_curve(dets, gts, category, iou3d, threshold).ap


def _box2d_iou(a: Box3D, b: Box3D) -> float:
    return iou2d(a.box2d, b.box2d)


def ap2d(dets, gts, category=None) -> float:
    """Mean AP over 2D IoU thresholds 0.05, 0.10, ..., 0.95."""
    aps = [match_and_curve(dets, gts, category, _box2d_iou, t).ap for t in AP2D_THRESHOLDS]
    return sum(aps) / len(aps)


def ap_depth_curves(dets, gts, category=None) -> List[PRCurve]:
    dets = _by_category(dets, category)
    gts = _by_category(gts, category)
    curves = []
    for x in DEPTH_THRESHOLDS:
        def sim(d, g, x=x):
            if abs(d.box.center[2] - g.box.center[2]) > x:
                return -math.inf
            return iou2d(d.box.box2d, g.box.box2d)

        matches = greedy_match(dets, gts, sim, MATCH_2D_THRESHOLD, strict=True)
        curves.append(curve_from_matches(matches, len(gts)))
    return curves


def ap_depth(dets, gts, category=None) -> float:
    """Mean over x = 1..20 m of AP where a hit needs 2D IoU > 0.7 and |dz| <= x."""
    curves = ap_depth_curves(dets, gts, category)
    return sum(c.ap for c in curves) / len(curves)


def substitute_depth(box: Box3D, z: float) -> Box3D:
    """Slide ``box`` along its viewing ray until its center depth is ``z``."""
    x, y, z0 = box.center
    k = z / z0
    return box.replace(center=(x * k, y * k, z))


def depth_substituted(dets, gts, category=None) -> List[Detection]:
    """Detections whose 2D match (IoU > 0.7) takes the ground-truth depth."""
    dets = _by_category(dets, category)
    gts = _by_category(gts, category)
    matches = greedy_match(dets, gts, lambda d, g: iou2d(d.box.box2d, g.box.box2d), MATCH_2D_THRESHOLD, strict=True)
    out = list(dets)
    for m in matches:
        if m.tp:
            d = dets[m.det_index]
            out[m.det_index] = Detection(d.image_id, substitute_depth(d.box, gts[m.gt_index].box.center[2]))
    return out


def ap_3dp(dets, gts, category=None) -> float:
    """AP3D at IoU 0.5 after giving 2D-matched detections the ground-truth depth."""
    return ap3d(depth_substituted(dets, gts, category), _by_category(gts, category), category, 0.5)


@dataclass
class ClassMetrics:
    category: int
    name: str
    n_gt: int
    n_det: int
    ap3d: float
    ap2d: float
    ap_depth: float
    ap_3dp: float
    curve: PRCurve


def evaluate(dets, gts, categories: Dict[int, str], threshold: float = 0.5) -> List[ClassMetrics]:
    out = []
    for cat, name in sorted(categories.items()):
        d = _by_category(dets, cat)
        g = _by_category(gts, cat)
        curve = match_and_curve(d, g, None, iou3d, threshold)
        out.append(
            ClassMetrics(
                category=cat,
                name=name,
                n_gt=len(g),
                n_det=len(d),
                ap3d=curve.ap,
                ap2d=ap2d(d, g),
                ap_depth=ap_depth(d, g),
                ap_3dp=ap_3dp(d, g),
                curve=curve,
            )
        )
    return out


def write_metrics_csv(rows: Sequence[ClassMetrics], path, threshold: float = 0.5) -> None:
    with open(path, "w") as fh:
        fh.write(f"category,name,n_gt,n_det,ap3d@{threshold:g},ap2d,ap_depth,ap_3dp\n")
        for r in rows:
            fh.write(
                f"{r.category},{r.name},{r.n_gt},{r.n_det},"
                f"{r.ap3d:.6f},{r.ap2d:.6f},{r.ap_depth:.6f},{r.ap_3dp:.6f}\n"
            )


# ---------------------------------------------------------------------------
# detection files


def ground_truth_from_manifest(manifest) -> List[Detection]:
    return [Detection(r.image_id, b) for r in manifest.records for b in r.boxes]


def load_detections(path, manifest) -> List[Detection]:
    """Read detections as JSON lines.

    Each line holds ``image_id``, ``category`` (id or name), ``score``,
    ``center``, ``dims``, ``rotation`` (9 numbers, row-major, or 3x3) and
    optionally ``bbox2d``; missing 2D boxes are projected with the image's
    intrinsics.
    """
    records = manifest.by_id()
    names = {v: k for k, v in manifest.categories.items()}
    out = []
    problems = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, where) from exc
            try:
                image_id = str(obj["image_id"])
                cat = obj["category"]
                score = float(obj["score"])
                center = [float(v) for v in obj["center"]]
                dims = [float(v) for v in obj["dims"]]
                rot = np.asarray(obj["rotation"], dtype=float).reshape(9)
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad detection record ({exc})", where) from exc
            if isinstance(cat, str):
                if cat not in names:
                    problems.append(f"{where}: unknown category {cat!r}")
                    continue
                cat = names[cat]
            if image_id not in records:
                problems.append(f"{where}: unknown image {image_id}")
                continue
            if not 0.0 <= score <= 1.0:
                problems.append(f"{where}: score {score} outside [0, 1]")
            if not all(d > 0 for d in dims):
                problems.append(f"{where}: non-positive dimensions")
                continue
            if not is_rotation(rot.reshape(3, 3), 1e-6):
                problems.append(f"{where}: rotation is not orthonormal")
            rec = records[image_id]
            bbox = obj.get("bbox2d")
            box = Box3D(center, dims, rot, int(cat), score=score,
                        box2d=Box2D(*map(float, bbox)) if bbox is not None else None)
            if box.box2d is None and center[2] > 0:
                box = box.replace(box2d=project_box_to_2d(box, rec.intrinsics, (rec.width, rec.height)))
            out.append(Detection(image_id, box))
    if problems:
        raise ValidationError(problems)
    return out


def detection_to_json(d: Detection) -> dict:
    b = d.box
    obj = {
        "image_id": d.image_id,
        "category": b.category,
        "score": d.score,
        "center": list(b.center),
        "dims": list(b.dims),
        "rotation": list(b.rotation),
    }
    if b.box2d is not None:
        obj["bbox2d"] = list(b.box2d.as_tuple())
    return obj


def write_detections(dets: Iterable[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(detection_to_json(d)) + "\n")
