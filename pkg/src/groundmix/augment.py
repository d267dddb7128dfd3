"""3D-consistent augmentations: virtual-depth scaling, in-plane rotation,
MixUp, and ground-plane patch pasting.

Image resampling is bilinear in continuous pixel coordinates (pixel centers at
``i + 0.5``) and rounds half up to 8 bits. Every transform is a pure function
of its inputs and an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataset import Sample
from .errors import (
    DegenerateDims,
    GeometryError,
    GeometryMismatch,
    NonPositiveArgument,
)
from .geometry import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    GroundPlane,
    allocentric_to_egocentric,
    box_from_bottom_center,
    egocentric_to_allocentric,
    project,
    project_box_to_2d,
    rotation_about_optical_axis,
    unproject_at_depth,
    unproject_to_plane,
)
from .patchbank import INTRUSION_THRESHOLD, PatchBank, covered_fraction
from .plane import fit_plane_to_boxes, should_apply_groundmix

KITTI_FOCAL = 707.05


@dataclass(frozen=True)
class AugmentConfig:
    f_ref: float = KITTI_FOCAL
    s_max: float = 2.0
    max_pastes: int = 6
    groundmix: bool = True
    mixup_prob: float = 0.5
    scale_prob: float = 0.5
    rotation_prob: float = 0.5
    rotation_range: Tuple[float, float] = (-math.pi, math.pi)
    scale_range: Tuple[float, float] = (0.7, 1.3)
    intrusion_threshold: float = INTRUSION_THRESHOLD
    paste_rotation: str = "egocentric"

    def __post_init__(self):
        if self.paste_rotation not in ("egocentric", "allocentric"):
            raise ValueError(f"paste_rotation must be 'egocentric' or 'allocentric', got {self.paste_rotation!r}")
        for name in ("mixup_prob", "scale_prob", "rotation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not self.s_max > 0:
            raise ValueError(f"s_max must be positive, got {self.s_max}")
        if not self.f_ref > 0:
            raise ValueError(f"f_ref must be positive, got {self.f_ref}")
        if self.max_pastes < 0:
            raise ValueError("max_pastes must be >= 0")
        lo, hi = self.rotation_range
        if not -math.pi <= lo <= hi <= math.pi:
            raise ValueError(f"rotation_range must lie within [-pi, pi], got {self.rotation_range}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")

    @classmethod
    def from_mapping(cls, values: dict) -> "AugmentConfig":
        """Build a config from string (or typed) values keyed by field name."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key '{key}'")
            kwargs[key] = _coerce(raw, str(types[key]))
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(raw, type_name: str):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    text = raw.strip()
    if type_name.startswith("Tuple"):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    if type_name == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name == "int":
        return int(text)
    if type_name == "str":
        return text
    return float(text)


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# virtual depth


def _check_positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise NonPositiveArgument(f"{name} must be positive, got {v}")


def to_virtual_depth(z: float, f_img: float, H_img: float, H_aug: float, f_ref: float = KITTI_FOCAL) -> float:
    """Depth target after resizing from ``H_img`` to ``H_aug`` and normalising focal to ``f_ref``."""
    _check_positive(z=z, f_img=f_img, H_img=H_img, H_aug=H_aug, f_ref=f_ref)
    return (H_img / H_aug) * (f_ref / f_img) * z


def from_virtual_depth(z_target: float, f_img: float, H_img: float, H_aug: float, f_ref: float = KITTI_FOCAL) -> float:
    _check_positive(z_target=z_target, f_img=f_img, H_img=H_img, H_aug=H_aug, f_ref=f_ref)
    return z_target / ((H_img / H_aug) * (f_ref / f_img))


# ---------------------------------------------------------------------------
# resampling


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def warp_image(image: np.ndarray, out_shape, out_to_in: np.ndarray, mode: str = "constant") -> np.ndarray:
    """Bilinear warp: output pixel ``q`` samples input at ``out_to_in @ [q, 1]``.

    ``out_to_in`` is a 2x3 affine map in continuous pixel coordinates.
    """
    h, w = out_shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    qx, qy = xs + 0.5, ys + 0.5
    A = np.asarray(out_to_in, dtype=float)
    px = A[0, 0] * qx + A[0, 1] * qy + A[0, 2] - 0.5
    py = A[1, 0] * qx + A[1, 1] * qy + A[1, 2] - 0.5
    out = np.empty((h, w, image.shape[2]), dtype=np.uint8)
    for c in range(image.shape[2]):
        chan = ndimage.map_coordinates(
            image[:, :, c].astype(float), [py, px], order=1, mode=mode, cval=0.0
        )
        out[:, :, c] = _to_uint8(chan)
    return out


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (w, h) == (width, height):
        return image.copy()
    A = np.array([[w / width, 0.0, 0.0], [0.0, h / height, 0.0]])
    return warp_image(image, (height, width), A, mode="nearest")


def resize_sample(s: Sample, width: int, height: int) -> Sample:
    """Plain resize; the 3D scene is unchanged and the intrinsics absorb the scale."""
    kx, ky = width / s.width, height / s.height
    boxes = [b.replace(box2d=None if b.box2d is None else b.box2d.scaled(kx, ky)) for b in s.boxes]
    return s.replace(
        image=resize_image(s.image, width, height),
        intrinsics=s.intrinsics.scaled(kx, ky),
        boxes=boxes,
        meta=dict(s.meta),
    )


# ---------------------------------------------------------------------------
# scale augmentation


def scale_augment(
    sample: Sample,
    target_height: Optional[int] = None,
    cfg: AugmentConfig = AugmentConfig(),
    rng: Optional[np.random.Generator] = None,
) -> Sample:
    """Resize to ``target_height`` and express labels in the virtual camera.

    The virtual camera has vertical focal length ``cfg.f_ref``. Each box keeps
    its lateral offsets ``(x, y)``, dimensions and rotation, while its depth
    becomes :func:`to_virtual_depth`. The intrinsics are chosen so that the
    moved center projects exactly onto the resized original projection and
    objects keep their resized pixel height::

        fy' = f_ref            cy' = ky * cy
        fx' = fx * (f_ref / fy) * (kx / ky)      cx' = kx * cx

    With ``target_height=None`` a scale factor is drawn from
    ``cfg.scale_range`` using ``rng``.
    """
    H, W = sample.height, sample.width
    if target_height is None:
        if rng is None:
            raise ValueError("rng required when target_height is not given")
        target_height = max(1, int(round(H * rng.uniform(*cfg.scale_range))))
    if not target_height > 0:
        raise NonPositiveArgument(f"target_height must be positive, got {target_height}")
    target_width = max(1, int(round(W * target_height / H)))
    kx, ky = target_width / W, target_height / H
    K = sample.intrinsics
    focal_ratio = cfg.f_ref / K.fy
    new_K = CameraIntrinsics(K.fx * focal_ratio * (kx / ky), cfg.f_ref, K.cx * kx, K.cy * ky)

    boxes = []
    for b in sample.boxes:
        x, y, z = b.center
        z_new = to_virtual_depth(z, K.fy, H, target_height, cfg.f_ref)
        box2d = None if b.box2d is None else b.box2d.scaled(kx, ky)
        boxes.append(b.replace(center=(x, y, z_new), box2d=box2d))

    plane = sample.ground_plane
    if plane is not None:
        # (x, y, z) -> (x, y, a z) is linear, so the plane stays a plane
        a = (H / target_height) * focal_ratio
        n = np.array([plane.normal[0], plane.normal[1], plane.normal[2] / a])
        norm = np.linalg.norm(n)
        plane = GroundPlane(n / norm, plane.offset / norm)

    return sample.replace(
        image=resize_image(sample.image, target_width, target_height),
        intrinsics=new_K,
        boxes=boxes,
        ground_plane=plane,
        meta=dict(sample.meta),
    )


# ---------------------------------------------------------------------------
# rotation augmentation


def _rot2(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def rotate_pixel(px, phi: float, pivot) -> Tuple[float, float]:
    q = np.asarray(pivot, dtype=float) + _rot2(phi) @ (np.asarray(px, dtype=float) - np.asarray(pivot, dtype=float))
    return float(q[0]), float(q[1])


def rotated_box_extent(box: Box2D, phi: float, pivot) -> Box2D:
    """Axis-aligned hull of ``box`` rotated by ``phi`` about ``pivot``."""
    corners = [(box.x1, box.y1), (box.x2, box.y1), (box.x2, box.y2), (box.x1, box.y2)]
    pts = np.array([rotate_pixel(c, phi, pivot) for c in corners])
    return Box2D(float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max()))


def sample_pivot(width: int, height: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Uniform pivot inside the central box covering 25% of the image area."""
    return (float(rng.uniform(0.25 * width, 0.75 * width)), float(rng.uniform(0.25 * height, 0.75 * height)))


def rotate_augment(sample: Sample, phi: float, pivot=None) -> Sample:
    """Rotate the image by ``phi`` about ``pivot`` and carry the labels along.

    Positive ``phi`` turns image content from +x towards +y (clockwise on
    screen). Rotations become ``Rz(phi) @ R``; centers are projected, rotated in
    pixel space and unprojected at their original depth. The new 2D box is the
    reprojected 3D box truncated by the rotated original 2D box and the image.
    Boxes whose center leaves the image are dropped.
    """
    if not -math.pi <= phi <= math.pi:
        raise ValueError(f"phi must lie in [-pi, pi], got {phi}")
    K = sample.intrinsics
    W, H = sample.width, sample.height
    if pivot is None:
        pivot = (K.cx, K.cy)
    pivot = (float(pivot[0]), float(pivot[1]))

    Rz = rotation_about_optical_axis(phi)
    inv = _rot2(-phi)
    p = np.array(pivot)
    A = np.concatenate([inv, (p - inv @ p)[:, None]], axis=1)
    image = sample.image.copy() if phi == 0 else warp_image(sample.image, (H, W), A, mode="constant")

    boxes = []
    frame = Box2D(0.0, 0.0, float(W), float(H))
    for b in sample.boxes:
        if b.center[2] <= 0:
            continue
        u, v = rotate_pixel(project(K, b.center), phi, pivot)
        if not (0.0 <= u < W and 0.0 <= v < H):
            continue
        center = unproject_at_depth(K, (u, v), b.center[2])
        moved = b.replace(center=center, rotation=Rz @ b.R, box2d=None)
        reproj = project_box_to_2d(moved, K, (W, H))
        if reproj is None:
            continue
        original = b.box2d if b.box2d is not None else project_box_to_2d(b, K, (W, H))
        box2d = reproj
        if original is not None:
            box2d = reproj.intersection(rotated_box_extent(original, phi, pivot))
        box2d = None if box2d is None else box2d.intersection(frame)
        if box2d is None:
            continue
        boxes.append(moved.replace(box2d=box2d))

    plane = None
    if sample.ground_plane is not None and K.fx == K.fy and pivot == (K.cx, K.cy):
        # exact only for a rotation about the optical axis
        plane = GroundPlane(Rz @ sample.ground_plane.n, sample.ground_plane.offset)
    return sample.replace(image=image, boxes=boxes, ground_plane=plane, meta=dict(sample.meta))


# ---------------------------------------------------------------------------
# MixUp


def mixup(a: Sample, b: Sample, rtol: float = 1e-9) -> Sample:
    """Average two images and concatenate their labels.

    ``b`` is resized to ``a``'s size first. Pixels are ``(p_a + p_b + 1) // 2``,
    i.e. the mean rounded half up (black + white gives 128). Track ids of
    ``b``'s boxes are shifted past ``a``'s so they stay unique in the frame.

    Raises:
        GeometryMismatch: intrinsics still differ after resizing.
    """
    if b.size != a.size:
        b = resize_sample(b, a.width, a.height)
    ka = np.array([a.intrinsics.fx, a.intrinsics.fy, a.intrinsics.cx, a.intrinsics.cy])
    kb = np.array([b.intrinsics.fx, b.intrinsics.fy, b.intrinsics.cx, b.intrinsics.cy])
    if not np.allclose(ka, kb, rtol=rtol, atol=rtol):
        raise GeometryMismatch(f"intrinsics differ: {a.intrinsics} vs {b.intrinsics}")
    image = ((a.image.astype(np.uint16) + b.image.astype(np.uint16) + 1) // 2).astype(np.uint8)
    plane = a.ground_plane if a.ground_plane == b.ground_plane else None
    meta = dict(a.meta)
    meta["mixup_with"] = b.image_id
    return a.replace(image=image, boxes=list(a.boxes) + _fresh_tracks(a.boxes, b.boxes), ground_plane=plane, meta=meta)


def _fresh_tracks(kept, added):
    """``added`` with track ids shifted past those in ``kept`` so ids stay unique per frame."""
    ids = [b.track_id for b in kept if b.track_id is not None]
    if not ids:
        return list(added)
    offset = max(ids) + 1 - min((b.track_id for b in added if b.track_id is not None), default=0)
    offset = max(offset, 0)
    return [b if b.track_id is None else b.replace(track_id=b.track_id + offset) for b in added]


# ---------------------------------------------------------------------------
# soft pasting


def patch_scale(z_p: float, f_p: float, z_t: float, f_t: float) -> float:
    """Resize factor for a patch seen at depth ``z_p`` with focal ``f_p`` and
    re-placed at depth ``z_t`` under focal ``f_t``."""
    _check_positive(z_p=z_p, f_p=f_p, z_t=z_t, f_t=f_t)
    return z_p / f_p * f_t / z_t


@dataclass(frozen=True)
class MaskParams:
    """Per-side widths in pixels, ordered (left, right, top, bottom)."""

    crop: Tuple[float, float, float, float]
    ramp: Tuple[float, float, float, float]
    level: float


def sample_mask_params(dims, rng: np.random.Generator) -> MaskParams:
    """Crop 0-10% and ramp 0-20% of the patch size per side; center level 0.8-1.0."""
    h, w = dims
    if h < 1 or w < 1:
        raise DegenerateDims(f"mask dims must be at least 1x1, got {dims}")
    sizes = (w, w, h, h)
    crop = tuple(float(rng.uniform(0.0, 0.1 * n)) for n in sizes)
    ramp = tuple(float(rng.uniform(0.0, 0.2 * n)) for n in sizes)
    level = float(rng.uniform(0.8, 1.0))
    return MaskParams(crop, ramp, level)


def _ramp(dist: np.ndarray, crop: float, ramp: float) -> np.ndarray:
    if ramp > 0:
        r = np.clip((dist - crop) / ramp, 0.0, 1.0)
    else:
        r = np.ones_like(dist)
    return np.where(dist <= crop, 0.0, r)


def soft_mask(dims, params: MaskParams) -> np.ndarray:
    """Opacity in [0, 1] for an ``(h, w)`` patch.

    Zero within the crop band, a linear ramp up to ``params.level`` across the
    blend band, and ``params.level`` on the central plateau. Distances are
    measured from the patch border to pixel centers.
    """
    h, w = dims
    if h < 1 or w < 1:
        raise DegenerateDims(f"mask dims must be at least 1x1, got {dims}")
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    cl, cr, ct, cb = params.crop
    rl, rr, rt, rb = params.ramp
    fx = np.minimum(_ramp(xs, cl, rl), _ramp(w - xs, cr, rr))
    fy = np.minimum(_ramp(ys, ct, rt), _ramp(h - ys, cb, rb))
    return params.level * np.minimum(fy[:, None], fx[None, :])


def make_soft_mask(dims, rng: np.random.Generator) -> np.ndarray:
    return soft_mask(dims, sample_mask_params(dims, rng))


def composite(target: np.ndarray, patch: np.ndarray, mask: np.ndarray, x0: int, y0: int) -> None:
    """Blend ``patch`` into ``target`` in place at top-left ``(x0, y0)``."""
    h, w = mask.shape
    region = target[y0:y0 + h, x0:x0 + w].astype(float)
    alpha = mask[:, :, None]
    target[y0:y0 + h, x0:x0 + w] = _to_uint8(alpha * patch.astype(float) + (1.0 - alpha) * region)


def _overlap(a: Box2D, b: Box2D) -> float:
    return max(covered_fraction(a, b), covered_fraction(b, a))


def ground_mix(
    sample: Sample,
    bank: PatchBank,
    cfg: AugmentConfig = AugmentConfig(),
    rng: Optional[np.random.Generator] = None,
    plane: Optional[GroundPlane] = None,
) -> Sample:
    """Paste up to ``cfg.max_pastes`` hard-mined patches onto the ground plane.

    Per paste: a pixel is drawn uniformly and unprojected onto the plane, which
    fixes the new bottom center and the target depth. The patch is rescaled
    with :func:`patch_scale` (skipped above ``cfg.s_max``), anchored so its
    source bottom center lands on the drawn pixel, and blended through a soft
    mask. Pastes that leave the image or overlap an existing box beyond the
    intrusion threshold are skipped. The new label keeps the patch's dimensions
    and egocentric rotation (or, with ``cfg.paste_rotation="allocentric"``, its
    rotation relative to the viewing ray). Skip counts are reported in ``meta["groundmix"]``.

    Without an explicit ``plane`` the sample's stored plane is used, or one is
    fitted when the sample qualifies; otherwise the sample is returned as is.
    """
    if rng is None:
        raise ValueError("ground_mix needs an explicit rng")
    report = {"pasted": 0, "skipped": Counter()}
    out = sample.replace(image=sample.image.copy(), boxes=list(sample.boxes), meta=dict(sample.meta))
    out.meta["groundmix"] = report
    if len(bank) == 0 or cfg.max_pastes == 0:
        report["skipped"]["empty_bank" if len(bank) == 0 else "disabled"] += 1
        return out
    if plane is None:
        plane = sample.ground_plane
    if plane is None:
        if not should_apply_groundmix(sample):
            report["skipped"]["no_plane"] += 1
            return out
        plane = fit_plane_to_boxes(sample.boxes)

    K = sample.intrinsics
    W, H = sample.width, sample.height
    frame = Box2D(0.0, 0.0, float(W), float(H))
    occupied = []
    for b in sample.boxes:
        b2 = b.box2d if b.box2d is not None else project_box_to_2d(b, K, (W, H))
        if b2 is not None:
            occupied.append(b2)

    for patch in bank.sample_hard_patches(rng, cfg.max_pastes):
        u, v = float(rng.uniform(0.0, W)), float(rng.uniform(0.0, H))
        try:
            ground = unproject_to_plane(K, (u, v), plane)
        except GeometryError:
            report["skipped"]["off_ground"] += 1
            continue
        s = patch_scale(patch.source_depth, patch.source_focal, ground[2], K.fy)
        if s > cfg.s_max:
            report["skipped"]["too_large"] += 1
            continue
        ph, pw = patch.pixels.shape[:2]
        nw, nh = int(round(pw * s)), int(round(ph * s))
        if nw < 1 or nh < 1:
            report["skipped"]["too_small"] += 1
            continue
        x0 = int(round(u - s * patch.anchor[0]))
        y0 = int(round(v - s * patch.anchor[1]))
        footprint = Box2D(float(x0), float(y0), float(x0 + nw), float(y0 + nh))
        if x0 < 0 or y0 < 0 or x0 + nw > W or y0 + nh > H:
            report["skipped"]["outside"] += 1
            continue
        if any(_overlap(footprint, o) > cfg.intrusion_threshold for o in occupied):
            report["skipped"]["overlap"] += 1
            continue
        label = patch.label
        R = label.R
        if cfg.paste_rotation == "allocentric":
            R = allocentric_to_egocentric(egocentric_to_allocentric(R, label.center), ground)
        center = box_from_bottom_center(ground, label.dims, R)
        new_box = Box3D(
            center=center,
            dims=label.dims,
            rotation=R,
            category=label.category,
            box2d=footprint,
        )
        if center[2] <= 0:
            report["skipped"]["outside"] += 1
            continue
        cu, cv = project(K, center)
        if not (0.0 <= cu < W and 0.0 <= cv < H) or project_box_to_2d(new_box, K, (W, H)) is None:
            report["skipped"]["outside"] += 1
            continue
        pixels = resize_image(patch.pixels, nw, nh)
        mask = make_soft_mask((nh, nw), rng)
        composite(out.image, pixels, mask, x0, y0)
        out.boxes.append(new_box)
        occupied.append(footprint.intersection(frame))
        report["pasted"] += 1
    out.ground_plane = plane
    return out


# ---------------------------------------------------------------------------
# pipeline


def augment_sample(
    sample: Sample,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    bank: Optional[PatchBank] = None,
    partner: Optional[Sample] = None,
) -> Sample:
    """Full pipeline: GroundMix, then MixUp, rotation and scale, each by its probability.

    Every random decision is drawn from ``rng`` in a fixed order, so the output
    depends only on the inputs and the generator state.
    """
    ops = []
    out = sample
    if cfg.groundmix and bank is not None:
        out = ground_mix(out, bank, cfg, rng)
        ops.append(("groundmix", out.meta["groundmix"]["pasted"]))
    if rng.uniform() < cfg.mixup_prob and partner is not None:
        try:
            out = mixup(out, partner)
            ops.append(("mixup", partner.image_id))
        except GeometryMismatch:
            ops.append(("mixup_skipped", partner.image_id))
    if rng.uniform() < cfg.rotation_prob:
        phi = float(rng.uniform(*cfg.rotation_range))
        pivot = sample_pivot(out.width, out.height, rng)
        out = rotate_augment(out, phi, pivot)
        ops.append(("rotate", phi))
    if rng.uniform() < cfg.scale_prob:
        out = scale_augment(out, None, cfg, rng)
        ops.append(("scale", out.height))
    if out is sample:
        out = sample.replace(image=sample.image.copy(), boxes=list(sample.boxes), meta=dict(sample.meta))
    out.meta["ops"] = ops
    return out
