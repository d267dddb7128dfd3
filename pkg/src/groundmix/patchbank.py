"""Object patch buffer with difficulty scores and depth-binned hard mining."""

from __future__ import annotations

import json
import math
import sys
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .dataset import Sample, box_from_json, box_to_json, read_image, write_image
from .errors import EmptyBank, RejectedDegenerate, RejectedIntrusion, UnknownUid
from .geometry import Box2D, Box3D, project, project_box_to_2d
from .plane import bottom_center

MAX_DIFFICULTY = sys.float_info.max
INTRUSION_THRESHOLD = 0.35
DEFAULT_BINS = 6
DEFAULT_HARD_FRACTION = 0.20
DEFAULT_CAPACITY = 10_000


@dataclass(frozen=True)
class Patch:
    """A cropped object with what is needed to re-place it elsewhere.

    ``source_focal`` is the source camera's vertical focal length and
    ``source_depth`` the depth of the object's bottom center. ``anchor`` is the
    pixel position of the projected bottom center relative to the crop's
    top-left corner.
    """

    pixels: np.ndarray
    source_focal: float
    source_depth: float
    label: Box3D
    source_image_id: str
    object_uid: str
    anchor: tuple = (0.0, 0.0)


def crop_region(box: Box2D, width: int, height: int) -> Optional[tuple]:
    """Integer pixel window ``(x0, y0, x1, y1)`` covering ``box`` inside the image."""
    x0 = max(0, int(math.floor(box.x1)))
    y0 = max(0, int(math.floor(box.y1)))
    x1 = min(width, int(math.ceil(box.x2)))
    y1 = min(height, int(math.ceil(box.y2)))
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1, y1


def covered_fraction(region: Box2D, other: Box2D) -> float:
    """Fraction of ``region``'s area covered by ``other``."""
    if region.area <= 0:
        return 0.0
    inter = region.intersection(other)
    return 0.0 if inter is None else inter.area / region.area


def depth_bin(z: float, z_min: float, z_max: float, bins: int) -> int:
    """Bin index of ``z`` in ``bins`` equal bins over ``[z_min, z_max]``.

    A depth exactly on an interior edge goes to the upper bin; ``z_max`` itself
    belongs to the last bin.
    """
    if z_max <= z_min:
        return 0
    k = int(math.floor((z - z_min) / (z_max - z_min) * bins))
    return min(max(k, 0), bins - 1)


class PatchBank:
    """Bounded FIFO buffer of patches keyed by object uid.

    Mutations (insertion, difficulty updates, eviction) are serialised by a
    lock; sampling works on a snapshot taken under the same lock.
    """

    def __init__(
        self,
        bins: int = DEFAULT_BINS,
        hard_fraction: float = DEFAULT_HARD_FRACTION,
        capacity: int = DEFAULT_CAPACITY,
        depth_range: Optional[tuple] = None,
        intrusion_threshold: float = INTRUSION_THRESHOLD,
    ):
        if bins < 1:
            raise ValueError("bins must be >= 1")
        if not 0 < hard_fraction <= 1:
            raise ValueError("hard_fraction must be in (0, 1]")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.bins = bins
        self.hard_fraction = hard_fraction
        self.capacity = capacity
        self.depth_range = depth_range
        self.intrusion_threshold = intrusion_threshold
        self._patches: "OrderedDict[str, Patch]" = OrderedDict()
        self._scores: Dict[str, float] = {}
        self._lock = threading.RLock()

    def __len__(self):
        return len(self._patches)

    def __contains__(self, uid):
        return uid in self._patches

    def __iter__(self):
        return iter(self.snapshot()[0])

    def get(self, uid: str) -> Patch:
        try:
            return self._patches[uid]
        except KeyError:
            raise UnknownUid(uid) from None

    def difficulty(self, uid: str) -> float:
        try:
            return self._scores[uid]
        except KeyError:
            raise UnknownUid(uid) from None

    def snapshot(self):
        with self._lock:
            return list(self._patches.values()), dict(self._scores)

    # -- insertion ---------------------------------------------------------

    def add(self, patch: Patch, difficulty: float = MAX_DIFFICULTY) -> str:
        if patch.pixels.size == 0 or not patch.source_depth > 0 or not patch.source_focal > 0:
            raise RejectedDegenerate(f"patch {patch.object_uid} has empty pixels or non-positive depth/focal")
        with self._lock:
            uid = patch.object_uid
            if uid in self._patches:
                self._patches.move_to_end(uid)
            else:
                self._scores[uid] = difficulty
            self._patches[uid] = patch
            while len(self._patches) > self.capacity:
                old, _ = self._patches.popitem(last=False)
                del self._scores[old]
        return uid

    def insert_patch(self, sample: Sample, box_index: int, uid: Optional[str] = None) -> str:
        """Crop ``sample.boxes[box_index]`` into the bank.

        Raises:
            RejectedDegenerate: the box has no visible 2D extent.
            RejectedIntrusion: another box covers more than the intrusion
                threshold (35%) of the crop.
        """
        box = sample.boxes[box_index]
        uid = uid or default_uid(sample, box_index)
        b2d = box.box2d if box.box2d is not None else project_box_to_2d(box, sample.intrinsics, sample.size)
        window = None if b2d is None else crop_region(b2d, sample.width, sample.height)
        if window is None:
            raise RejectedDegenerate(f"{uid}: object has no visible 2D box")
        x0, y0, x1, y1 = window
        region = Box2D(x0, y0, x1, y1)
        for k, other in enumerate(sample.boxes):
            if k == box_index:
                continue
            ob = other.box2d if other.box2d is not None else project_box_to_2d(other, sample.intrinsics, sample.size)
            if ob is None:
                continue
            frac = covered_fraction(region, ob)
            if frac > self.intrusion_threshold:
                raise RejectedIntrusion(f"{uid}: {frac:.0%} of the crop is covered by box {k}")
        bottom = bottom_center(box)
        if not bottom[2] > 0:
            raise RejectedDegenerate(f"{uid}: bottom center behind the camera")
        u, v = project(sample.intrinsics, bottom)
        patch = Patch(
            pixels=sample.image[y0:y1, x0:x1].copy(),
            source_focal=sample.intrinsics.fy,
            source_depth=bottom[2],
            label=box.replace(box2d=None, score=None),
            source_image_id=sample.image_id,
            object_uid=uid,
            anchor=(u - x0, v - y0),
        )
        return self.add(patch)

    def insert_sample(self, sample: Sample) -> List[str]:
        """Insert every acceptable object of ``sample``; rejected ones are skipped."""
        uids = []
        for k in range(len(sample.boxes)):
            try:
                uids.append(self.insert_patch(sample, k))
            except (RejectedIntrusion, RejectedDegenerate):
                continue
        return uids

    # -- difficulty --------------------------------------------------------

    def update_difficulty(self, uid: str, score: float) -> None:
        score = float(score)
        if math.isnan(score) or score < 0:
            raise ValueError(f"difficulty must be a non-negative number, got {score}")
        with self._lock:
            if uid not in self._scores:
                raise UnknownUid(uid)
            self._scores[uid] = score

    # -- hard mining -------------------------------------------------------

    def bin_members(self, patches=None, scores=None) -> List[List[Patch]]:
        """Patches grouped by depth bin, each bin sorted hardest first.

        Ties in difficulty keep insertion order.
        """
        if patches is None:
            patches, scores = self.snapshot()
        if not patches:
            return [[] for _ in range(self.bins)]
        if self.depth_range is not None:
            z_min, z_max = self.depth_range
        else:
            depths = [p.source_depth for p in patches]
            z_min, z_max = min(depths), max(depths)
        groups: List[List[Patch]] = [[] for _ in range(self.bins)]
        for p in patches:
            groups[depth_bin(p.source_depth, z_min, z_max, self.bins)].append(p)
        for g in groups:
            g.sort(key=lambda p: -scores[p.object_uid])
        return groups

    def candidates(self, members: List[Patch]) -> List[Patch]:
        """The hardest ``ceil(m * n)`` members of a bin (at least one)."""
        k = max(1, math.ceil(self.hard_fraction * len(members) - 1e-9))
        return members[:k]

    def sample_hard_patches(self, rng: np.random.Generator, count: int = 1) -> List[Patch]:
        """Draw ``count`` patches by depth-binned hard mining.

        Each draw picks a non-empty depth bin uniformly, then a patch uniformly
        from that bin's hardest fraction. Within one call a patch is not drawn
        twice until every candidate set is exhausted.
        """
        patches, scores = self.snapshot()
        if not patches:
            raise EmptyBank("patch bank is empty")
        pools = [self.candidates(g) for g in self.bin_members(patches, scores) if g]
        remaining = [list(p) for p in pools]
        out = []
        for _ in range(count):
            open_bins = [i for i, p in enumerate(remaining) if p]
            if not open_bins:
                remaining = [list(p) for p in pools]
                open_bins = list(range(len(remaining)))
            b = open_bins[int(rng.integers(len(open_bins)))]
            pool = remaining[b]
            out.append(pool.pop(int(rng.integers(len(pool)))))
        return out

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> None:
        """Write one PNG crop and one JSON sidecar per patch, plus an index."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        patches, scores = self.snapshot()
        index = []
        for i, p in enumerate(patches):
            stem = f"patch_{i:06d}"
            write_image(directory / f"{stem}.png", p.pixels)
            sidecar = {
                "object_uid": p.object_uid,
                "source_image_id": p.source_image_id,
                "source_focal": p.source_focal,
                "source_depth": p.source_depth,
                "anchor": list(p.anchor),
                "difficulty": None if scores[p.object_uid] == MAX_DIFFICULTY else scores[p.object_uid],
                "label": box_to_json(p.label),
            }
            (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=1) + "\n")
            index.append(stem)
        (directory / "index.json").write_text(
            json.dumps({"bins": self.bins, "hard_fraction": self.hard_fraction,
                        "capacity": self.capacity, "patches": index}, indent=1) + "\n"
        )

    @classmethod
    def load(cls, directory, **overrides) -> "PatchBank":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        kwargs = {k: index[k] for k in ("bins", "hard_fraction", "capacity")}
        kwargs.update(overrides)
        bank = cls(**kwargs)
        for stem in index["patches"]:
            meta = json.loads((directory / f"{stem}.json").read_text())
            patch = Patch(
                pixels=read_image(directory / f"{stem}.png"),
                source_focal=meta["source_focal"],
                source_depth=meta["source_depth"],
                label=box_from_json(meta["label"], str(directory / f"{stem}.json")),
                source_image_id=meta["source_image_id"],
                object_uid=meta["object_uid"],
                anchor=tuple(meta["anchor"]),
            )
            diff = meta.get("difficulty")
            bank.add(patch, MAX_DIFFICULTY if diff is None else float(diff))
        return bank


def default_uid(sample: Sample, box_index: int) -> str:
    box = sample.boxes[box_index]
    if box.track_id is not None:
        return f"{sample.image_id}:t{box.track_id}"
    return f"{sample.image_id}:{box_index}"
