"""Ground-plane aware 3D-consistent data augmentation and monocular 3D detection metrics."""

from .geometry import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    GroundPlane,
    allocentric_to_egocentric,
    box_corners,
    egocentric_to_allocentric,
    gram_schmidt_rotation,
    project,
    project_box_to_2d,
    single_angle_to_so3,
    unproject_to_plane,
)
from .dataset import DatasetManifest, Sample, compute_stats, load_manifest, save_manifest
from .plane import bottom_center, fit_ground_plane, should_apply_groundmix
from .patchbank import Patch, PatchBank
from .augment import (
    AugmentConfig,
    augment_sample,
    ground_mix,
    make_soft_mask,
    mixup,
    patch_scale,
    rotate_augment,
    scale_augment,
    to_virtual_depth,
    from_virtual_depth,
)
from .evaluation import Detection, ap2d, ap3d, ap_3dp, ap_depth, iou2d, iou3d, match_and_curve

__version__ = "0.1.0"
