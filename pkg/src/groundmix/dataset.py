"""OMNI3D-style annotation files, image I/O and dataset statistics.

Annotation schema (``schema_version: 1``), one JSON file per split::

    {
      "schema_version": 1,
      "split": "train",
      "categories": [{"id": 0, "name": "car"}, ...],
      "images": [
        {"id": "000001", "file_path": "images/000001.png",
         "width": 640, "height": 480, "frame_index": 0,
         "K": [[fx, 0, cx], [0, fy, cy], [0, 0, 1]],
         "ground_plane": {"normal": [nx, ny, nz], "d": d}      # optional
        }, ...],
      "annotations": [
        {"id": 0, "image_id": "000001", "category_id": 0,
         "center_cam": [x, y, z], "dimensions": [w, h, l],
         "R_cam": [r00, r01, r02, r10, ..., r22],               # row-major
         "track_id": 7,                                        # optional
         "score": 0.9,                                         # optional
         "bbox2D_trunc": [x1, y1, x2, y2]                      # optional
        }, ...]
    }

``file_path`` is relative to the manifest's directory. Missing ``bbox2D_trunc``
entries are recomputed from the projected 3D corners, truncated at the image
border. Annotation order within an image is preserved.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import MissingPlane, ParseError, ValidationError
from .geometry import (
    BOX_EDGES,
    Box2D,
    Box3D,
    CameraIntrinsics,
    GroundPlane,
    box_corners,
    is_rotation,
    project_box_to_2d,
    project_points,
)

SCHEMA_VERSION = 1

DEPTH_BIN_WIDTH = 5.0
DEPTH_RANGE = (0.0, 200.0)
ROTATION_BINS = 36
DIM_BIN_WIDTH = 0.5
DIM_RANGE = (0.0, 20.0)


@dataclass
class Sample:
    """An image with its intrinsics and 3D labels."""

    image: np.ndarray
    intrinsics: CameraIntrinsics
    boxes: List[Box3D]
    image_id: str = ""
    frame_index: int = 0
    ground_plane: Optional[GroundPlane] = None
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def size(self):
        return (self.width, self.height)

    def replace(self, **changes) -> "Sample":
        return replace(self, **changes)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    file_path: str
    width: int
    height: int
    intrinsics: CameraIntrinsics
    boxes: tuple
    frame_index: int = 0
    ground_plane: Optional[GroundPlane] = None


@dataclass
class DatasetManifest:
    split: str
    records: List[ImageRecord]
    categories: Dict[int, str]
    root: Path = field(default_factory=Path, compare=False)

    def __len__(self):
        return len(self.records)

    def by_id(self) -> Dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}

    def image_path(self, record: ImageRecord) -> Path:
        return self.root / record.file_path

    def load_sample(self, record: ImageRecord) -> Sample:
        image = read_image(self.image_path(record))
        if image.shape[:2] != (record.height, record.width):
            raise ValidationError(
                [f"image {record.image_id}: file is {image.shape[1]}x{image.shape[0]}, "
                 f"manifest says {record.width}x{record.height}"]
            )
        return Sample(
            image=image,
            intrinsics=record.intrinsics,
            boxes=list(record.boxes),
            image_id=record.image_id,
            frame_index=record.frame_index,
            ground_plane=record.ground_plane,
        )

    def iter_samples(self):
        for record in self.records:
            yield self.load_sample(record)


# ---------------------------------------------------------------------------
# image I/O


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray) -> None:
    """Write an RGB buffer as PNG with fixed encoder settings (reproducible bytes)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), "RGB").save(
        path, format="PNG", compress_level=6, optimize=False
    )


# ---------------------------------------------------------------------------
# parsing


def _get(obj, key, where, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing field '{key}'", where)
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise ParseError(f"field '{key}' has wrong type {type(value).__name__}", where)
    return value


def _floats(value, n, where, key) -> List[float]:
    flat = np.asarray(value, dtype=object).reshape(-1).tolist() if isinstance(value, list) else None
    if flat is None or len(flat) != n:
        raise ParseError(f"field '{key}' must hold {n} numbers", where)
    out = []
    for x in flat:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ParseError(f"field '{key}' must hold {n} numbers", where)
        out.append(float(x))
    return out


def box_from_json(ann: dict, where: str) -> Box3D:
    center = _floats(_get(ann, "center_cam", where), 3, where, "center_cam")
    dims = _floats(_get(ann, "dimensions", where), 3, where, "dimensions")
    rot = _floats(_get(ann, "R_cam", where), 9, where, "R_cam")
    bbox = ann.get("bbox2D_trunc")
    box2d = Box2D(*_floats(bbox, 4, where, "bbox2D_trunc")) if bbox is not None else None
    track = ann.get("track_id")
    score = ann.get("score")
    return Box3D(
        center=center,
        dims=dims,
        rotation=rot,
        category=int(_get(ann, "category_id", where)),
        track_id=None if track is None else int(track),
        score=None if score is None else float(score),
        box2d=box2d,
    )


def box_to_json(b: Box3D) -> dict:
    out = {
        "category_id": b.category,
        "center_cam": list(b.center),
        "dimensions": list(b.dims),
        "R_cam": list(b.rotation),
    }
    if b.track_id is not None:
        out["track_id"] = b.track_id
    if b.score is not None:
        out["score"] = b.score
    if b.box2d is not None:
        out["bbox2D_trunc"] = list(b.box2d.as_tuple())
    return out


def _validate(records: Sequence[ImageRecord], categories: Dict[int, str]) -> List[str]:
    problems = []
    for r in records:
        if r.width <= 0 or r.height <= 0:
            problems.append(f"image {r.image_id}: non-positive size {r.width}x{r.height}")
        seen_tracks = set()
        for k, b in enumerate(r.boxes):
            tag = f"image {r.image_id} box {k}"
            if not all(d > 0 and math.isfinite(d) for d in b.dims):
                problems.append(f"{tag}: dimensions must be positive, got {b.dims}")
            if not b.center[2] > 0:
                problems.append(f"{tag}: center depth must be positive, got z={b.center[2]}")
            if not is_rotation(b.R, 1e-6):
                problems.append(f"{tag}: R_cam is not a rotation matrix")
            if b.category not in categories:
                problems.append(f"{tag}: unknown category {b.category}")
            if b.score is not None and not 0.0 <= b.score <= 1.0:
                problems.append(f"{tag}: score {b.score} outside [0, 1]")
            if b.track_id is not None:
                if b.track_id in seen_tracks:
                    problems.append(f"{tag}: duplicate track_id {b.track_id}")
                seen_tracks.add(b.track_id)
    return problems


def manifest_from_json(doc: dict, root=Path(".")) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version}", "schema_version")
    split = str(doc.get("split", ""))
    categories = {}
    for i, c in enumerate(_get(doc, "categories", None, list)):
        where = f"categories[{i}]"
        categories[int(_get(c, "id", where))] = str(_get(c, "name", where))

    anns_by_image: Dict[str, list] = {}
    for i, ann in enumerate(_get(doc, "annotations", None, list)):
        where = f"annotations[{i}]"
        image_id = str(_get(ann, "image_id", where))
        anns_by_image.setdefault(image_id, []).append((i, ann))

    records = []
    seen_ids = set()
    problems = []
    for i, img in enumerate(_get(doc, "images", None, list)):
        where = f"images[{i}]"
        image_id = str(_get(img, "id", where))
        if image_id in seen_ids:
            problems.append(f"duplicate image id {image_id}")
        seen_ids.add(image_id)
        width = int(_get(img, "width", where))
        height = int(_get(img, "height", where))
        K = _floats(_get(img, "K", where), 9, where, "K")
        try:
            intrinsics = CameraIntrinsics.from_matrix(K)
        except ValueError as exc:
            problems.append(f"image {image_id}: {exc}")
            continue
        plane = None
        if img.get("ground_plane") is not None:
            gp = img["ground_plane"]
            normal = _floats(_get(gp, "normal", where + ".ground_plane"), 3, where, "normal")
            try:
                plane = GroundPlane(normal, float(_get(gp, "d", where + ".ground_plane")))
            except ValueError as exc:
                problems.append(f"image {image_id}: {exc}")
        boxes = []
        for j, ann in anns_by_image.pop(image_id, []):
            b = box_from_json(ann, f"annotations[{j}]")
            if b.box2d is None and all(d > 0 for d in b.dims):
                b = b.replace(box2d=project_box_to_2d(b, intrinsics, (width, height)))
            boxes.append(b)
        records.append(
            ImageRecord(
                image_id=image_id,
                file_path=str(_get(img, "file_path", where)),
                width=width,
                height=height,
                intrinsics=intrinsics,
                boxes=tuple(boxes),
                frame_index=int(img.get("frame_index", 0)),
                ground_plane=plane,
            )
        )
    for image_id in anns_by_image:
        problems.append(f"annotations reference unknown image {image_id}")
    problems.extend(_validate(records, categories))
    if problems:
        raise ValidationError(problems)
    return DatasetManifest(split=split, records=records, categories=categories, root=Path(root))


def manifest_to_json(m: DatasetManifest) -> dict:
    images, annotations = [], []
    for r in m.records:
        img = {
            "id": r.image_id,
            "file_path": r.file_path,
            "width": r.width,
            "height": r.height,
            "frame_index": r.frame_index,
            "K": r.intrinsics.K.tolist(),
        }
        if r.ground_plane is not None:
            img["ground_plane"] = {"normal": list(r.ground_plane.normal), "d": r.ground_plane.offset}
        images.append(img)
        for b in r.boxes:
            ann = {"id": len(annotations), "image_id": r.image_id}
            ann.update(box_to_json(b))
            annotations.append(ann)
    return {
        "schema_version": SCHEMA_VERSION,
        "split": m.split,
        "categories": [{"id": k, "name": v} for k, v in sorted(m.categories.items())],
        "images": images,
        "annotations": annotations,
    }


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc
    return manifest_from_json(doc, root=path.parent)


def save_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest_to_json(m), fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def record_from_sample(s: Sample, file_path: str) -> ImageRecord:
    return ImageRecord(
        image_id=s.image_id,
        file_path=file_path,
        width=s.width,
        height=s.height,
        intrinsics=s.intrinsics,
        boxes=tuple(s.boxes),
        frame_index=s.frame_index,
        ground_plane=s.ground_plane,
    )


# ---------------------------------------------------------------------------
# statistics


@dataclass
class Histogram:
    lower_edges: np.ndarray
    counts: np.ndarray
    bin_width: float
    overflow: bool = False

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rows(self):
        return [(float(e), int(c)) for e, c in zip(self.lower_edges, self.counts)]


def histogram(values, lo: float, hi: float, width: float, overflow: bool) -> Histogram:
    """Fixed-width histogram; values on an edge go to the upper bin.

    With ``overflow`` an extra bin at ``hi`` collects values ``>= hi``;
    without it the top edge is closed so ``hi`` lands in the last bin.
    Values below ``lo`` are clamped into the first bin.
    """
    n = int(round((hi - lo) / width))
    edges = lo + width * np.arange(n + (1 if overflow else 0))
    counts = np.zeros(len(edges), dtype=np.int64)
    for v in values:
        k = int(math.floor((v - lo) / width))
        k = max(k, 0)
        if k >= n:
            k = n if overflow else n - 1
        counts[k] += 1
    return Histogram(edges, counts, width, overflow)


@dataclass
class DatasetStats:
    depth: Histogram
    width: Histogram
    height: Histogram
    length: Histogram
    rotation: Optional[Histogram]
    category_counts: Dict[str, int]
    box_count: int


def tangent_basis(n) -> np.ndarray:
    """Two orthonormal in-plane directions ``(t1, t2)`` for plane normal ``n``.

    ``t1`` is the camera's forward axis projected onto the plane (``e_x`` when
    the plane faces the camera head-on); ``t2 = n x t1``.
    """
    n = np.asarray(n, dtype=float)
    for ref in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        t1 = ref - (ref @ n) * n
        norm = np.linalg.norm(t1)
        if norm > 1e-6:
            t1 = t1 / norm
            return np.stack([t1, np.cross(n, t1)])
    raise AssertionError("unreachable for a unit normal")


def heading_angle(b: Box3D, plane: GroundPlane) -> float:
    """Angle in ``[-pi, pi]`` of the box heading (local z) within the ground plane."""
    heading = b.R[:, 2]
    t1, t2 = tangent_basis(plane.n)
    return math.atan2(float(heading @ t2), float(heading @ t1))


def compute_stats(m: DatasetManifest, plane_source: Optional[str] = "auto") -> DatasetStats:
    """Histogram depth, dimensions, categories and in-plane heading.

    ``plane_source`` selects the per-image plane for the heading statistic:
    ``"stored"`` uses the manifest's plane, ``"fit"`` fits one from the boxes,
    ``"auto"`` prefers the stored one and otherwise fits, ``None`` skips it.

    Raises:
        MissingPlane: an image with boxes has no plane under ``plane_source``.
    """
    from .plane import fit_plane_to_boxes
    from .errors import GeometryError

    if plane_source not in (None, "auto", "stored", "fit"):
        raise ValueError(f"unknown plane source {plane_source!r}")
    boxes = [b for r in m.records for b in r.boxes]
    angles = []
    if plane_source is not None:
        for r in m.records:
            if not r.boxes:
                continue
            plane = r.ground_plane if plane_source in ("stored", "auto") else None
            if plane is None and plane_source != "stored":
                try:
                    plane = fit_plane_to_boxes(r.boxes)
                except GeometryError as exc:
                    raise MissingPlane(f"image {r.image_id}: cannot fit ground plane ({exc})") from exc
            if plane is None:
                raise MissingPlane(f"image {r.image_id} has no stored ground plane")
            angles.extend(heading_angle(b, plane) for b in r.boxes)
    cats = Counter(m.categories.get(b.category, str(b.category)) for b in boxes)
    return DatasetStats(
        depth=histogram([b.center[2] for b in boxes], *DEPTH_RANGE, DEPTH_BIN_WIDTH, overflow=True),
        width=histogram([b.dims[0] for b in boxes], *DIM_RANGE, DIM_BIN_WIDTH, overflow=True),
        height=histogram([b.dims[1] for b in boxes], *DIM_RANGE, DIM_BIN_WIDTH, overflow=True),
        length=histogram([b.dims[2] for b in boxes], *DIM_RANGE, DIM_BIN_WIDTH, overflow=True),
        rotation=(
            histogram(angles, -math.pi, math.pi, 2 * math.pi / ROTATION_BINS, overflow=False)
            if plane_source is not None
            else None
        ),
        category_counts=dict(sorted(cats.items())),
        box_count=len(boxes),
    )


def write_stats_csv(stats: DatasetStats, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    hists = {"depth": stats.depth, "width": stats.width, "height": stats.height, "length": stats.length}
    if stats.rotation is not None:
        hists["rotation"] = stats.rotation
    for name, h in hists.items():
        path = out_dir / f"{name}.csv"
        with open(path, "w") as fh:
            fh.write("lower_edge,count\n")
            for edge, count in h.rows():
                fh.write(f"{edge:.6f},{count}\n")
        written.append(path)
    path = out_dir / "categories.csv"
    with open(path, "w") as fh:
        fh.write("category,count\n")
        for name, count in stats.category_counts.items():
            fh.write(f"{name},{count}\n")
    written.append(path)
    return written


# ---------------------------------------------------------------------------
# overlays

_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190),
]


def _clip_segment(p, q, lo, hi):
    """Liang-Barsky clip of segment ``p -> q`` to the rectangle ``[lo, hi]``."""
    t0, t1 = 0.0, 1.0
    d = (q[0] - p[0], q[1] - p[1])
    for axis in range(2):
        for sign, bound in ((-1.0, lo[axis]), (1.0, hi[axis])):
            num = sign * (bound - p[axis])
            den = sign * d[axis]
            if den == 0:
                if num < 0:
                    return None
                continue
            t = num / den
            if den < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
    if t0 > t1:
        return None
    return ((p[0] + t0 * d[0], p[1] + t0 * d[1]), (p[0] + t1 * d[0], p[1] + t1 * d[1]))


def wireframe_segments(b: Box3D, K: CameraIntrinsics, near: float = 1e-3):
    """Projected box edges as pixel segments; edges are cut at ``z = near``."""
    corners = box_corners(b)
    segs = []
    for i, j in BOX_EDGES:
        a, c = corners[i], corners[j]
        if a[2] < near and c[2] < near:
            continue
        if a[2] < near or c[2] < near:
            t = (near - a[2]) / (c[2] - a[2])
            cut = a + t * (c - a)
            a, c = (cut, c) if a[2] < near else (a, cut)
        uv = project_points(K, np.stack([a, c]))
        segs.append(((float(uv[0, 0]), float(uv[0, 1])), (float(uv[1, 0]), float(uv[1, 1]))))
    return segs


def render_overlay_image(s: Sample) -> np.ndarray:
    im = Image.fromarray(np.ascontiguousarray(s.image, dtype=np.uint8), "RGB")
    draw = ImageDraw.Draw(im)
    lo, hi = (-1.0, -1.0), (s.width + 1.0, s.height + 1.0)
    for k, b in enumerate(s.boxes):
        color = _PALETTE[b.category % len(_PALETTE)]
        for p, q in wireframe_segments(b, s.intrinsics):
            seg = _clip_segment(p, q, lo, hi)
            if seg is not None:
                draw.line([seg[0], seg[1]], fill=color, width=1)
        if b.box2d is not None:
            x1, y1, x2, y2 = b.box2d.as_tuple()
            draw.rectangle([x1, y1, max(x1, x2 - 1), max(y1, y2 - 1)], outline=(255, 255, 255), width=1)
    return np.asarray(im, dtype=np.uint8).copy()


def render_overlay(s: Sample, out_path) -> Path:
    """Draw projected wireframes and 2D boxes over the image and write a PNG."""
    out_path = Path(out_path)
    write_image(out_path, render_overlay_image(s))
    return out_path
