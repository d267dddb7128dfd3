"""Synthetic ground-plane scenes for fixtures and demos.

Objects are cuboids resting on a flat ground seen by a camera pitched
downwards. Images are flat-shaded renders, which is enough to exercise the
full pipeline with exact labels.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw

from .dataset import DatasetManifest, ImageRecord, Sample, save_manifest, write_image
from .geometry import (
    Box3D,
    CameraIntrinsics,
    GroundPlane,
    box_corners,
    box_from_bottom_center,
    project_box_to_2d,
    project_points,
    unproject_to_plane,
)
from .errors import GeometryError
from .patchbank import covered_fraction

CATEGORIES = {0: "car", 1: "truck", 2: "pedestrian"}
_DIMS = {0: (1.8, 1.5, 4.2), 1: (2.5, 3.2, 8.0), 2: (0.6, 1.7, 0.6)}
_COLORS = {0: (200, 40, 40), 1: (40, 90, 200), 2: (240, 200, 40)}

# (face corner indices, shade) in box_corners order
_SHADED_FACES = (
    ((0, 1, 3, 2), 0.7), ((4, 5, 7, 6), 0.7), ((0, 1, 5, 4), 1.0),
    ((2, 3, 7, 6), 0.5), ((0, 2, 6, 4), 0.85), ((1, 3, 7, 5), 0.85),
)


def pitched_ground(pitch: float, camera_height: float) -> GroundPlane:
    """Ground plane for a camera ``camera_height`` above ground, pitched down by ``pitch``."""
    return GroundPlane((0.0, math.cos(pitch), math.sin(pitch)), camera_height)


def grounded_rotation(normal, yaw: float) -> np.ndarray:
    """Rotation with local y along ``normal`` (down) and heading ``yaw`` within the plane."""
    n = np.asarray(normal, dtype=float)
    fwd = np.array([0.0, 0.0, 1.0]) - n[2] * n
    fwd /= np.linalg.norm(fwd)
    side = np.cross(n, fwd)
    heading = math.cos(yaw) * fwd + math.sin(yaw) * side
    x = np.cross(n, heading)
    return np.stack([x, n, heading], axis=1)


def render_scene(width: int, height: int, K: CameraIntrinsics, boxes, rng) -> np.ndarray:
    yy = np.linspace(0.0, 1.0, height)[:, None, None]
    base = (1 - yy) * np.array([150.0, 170.0, 190.0]) + yy * np.array([90.0, 95.0, 85.0])
    img = base + rng.normal(0.0, 6.0, size=(height, width, 3))
    im = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(im)
    for b in sorted(boxes, key=lambda b: -b.center[2]):
        corners = box_corners(b)
        if np.any(corners[:, 2] <= 0.1):
            continue
        uv = project_points(K, corners)
        color = np.array(_COLORS.get(b.category, (180, 180, 180)), dtype=float)
        faces = sorted(_SHADED_FACES, key=lambda f: -corners[list(f[0]), 2].mean())
        for idx, shade in faces:
            poly = [(float(uv[i, 0]), float(uv[i, 1])) for i in idx]
            draw.polygon(poly, fill=tuple(int(c) for c in color * shade), outline=(20, 20, 20))
    return np.asarray(im, dtype=np.uint8).copy()


def make_scene(
    rng: np.random.Generator,
    width: int = 320,
    height: int = 240,
    focal: float = 300.0,
    n_objects: int = 5,
    pitch: Optional[float] = None,
    camera_height: Optional[float] = None,
    image_id: str = "",
    max_tries: int = 200,
) -> Sample:
    """Random scene with up to ``n_objects`` non-overlapping grounded boxes."""
    pitch = float(rng.uniform(0.15, 0.6)) if pitch is None else pitch
    camera_height = float(rng.uniform(4.0, 12.0)) if camera_height is None else camera_height
    K = CameraIntrinsics(focal, focal, width / 2.0, height / 2.0)
    plane = pitched_ground(pitch, camera_height)
    boxes: List[Box3D] = []
    for _ in range(max_tries):
        if len(boxes) >= n_objects:
            break
        cat = int(rng.choice([0, 0, 0, 1, 2]))
        dims = tuple(d * rng.uniform(0.9, 1.1) for d in _DIMS[cat])
        px = (rng.uniform(0.1 * width, 0.9 * width), rng.uniform(0.45 * height, 0.95 * height))
        try:
            ground = unproject_to_plane(K, px, plane)
        except GeometryError:
            continue
        R = grounded_rotation(plane.normal, float(rng.uniform(-math.pi, math.pi)))
        box = Box3D(box_from_bottom_center(ground, dims, R), dims, R, cat, track_id=len(boxes))
        if np.any(box_corners(box)[:, 2] <= 1.0):
            continue
        b2d = project_box_to_2d(box, K, (width, height))
        full = project_box_to_2d(box, K, (1e9, 1e9))
        if b2d is None or b2d.area < 30 or b2d.area < 0.999 * full.area:
            continue
        if any(max(covered_fraction(b2d, o.box2d), covered_fraction(o.box2d, b2d)) > 0.1 for o in boxes):
            continue
        boxes.append(box.replace(box2d=b2d))
    image = render_scene(width, height, K, boxes, rng)
    return Sample(image=image, intrinsics=K, boxes=boxes, image_id=image_id, ground_plane=plane)


def write_dataset(out_dir, n_images: int = 10, seed: int = 0, store_planes: bool = True, **scene_kw) -> Path:
    """Write ``n_images`` synthetic scenes plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        s = make_scene(rng, image_id=f"{i:06d}", **scene_kw)
        rel = f"images/{s.image_id}.png"
        write_image(out_dir / rel, s.image)
        records.append(
            ImageRecord(
                image_id=s.image_id,
                file_path=rel,
                width=s.width,
                height=s.height,
                intrinsics=s.intrinsics,
                boxes=tuple(s.boxes),
                frame_index=i,
                ground_plane=s.ground_plane if store_planes else None,
            )
        )
    manifest = DatasetManifest("synthetic", records, dict(CATEGORIES), root=out_dir)
    path = out_dir / "manifest.json"
    save_manifest(manifest, path)
    return path
