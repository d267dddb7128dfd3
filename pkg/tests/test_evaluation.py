import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundmix.evaluation import (
    Detection,
    ap2d,
    ap3d,
    ap_3dp,
    ap_depth,
    greedy_match,
    iou2d,
    iou3d,
    match_and_curve,
)
from groundmix.geometry import Box2D, Box3D, CameraIntrinsics, project_box_to_2d
from oracles import aabb_iou3d, brute_ap40, brute_flags, mc_iou3d, random_rotation, rect_iou, rodrigues

I3 = np.eye(3)
K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


def _cube(center, dims=(1, 1, 1), R=I3, **kw):
    return Box3D(center, dims, R, **kw)


# -- 3D IoU -----------------------------------------------------------------------


def test_iou3d_identical():
    b = _cube((1, 2, 10), (1.5, 2, 4), random_rotation(np.random.default_rng(0)))
    assert iou3d(b, b) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize(
    "a,b,expected",
    [
        (_cube((0, 0, 0)), _cube((0.5, 0, 0)), 1 / 3),
        (_cube((0, 0, 0)), _cube((0.5, 0.5, 0)), 0.25 / 1.75),
        (_cube((0, 0, 0)), _cube((0.5, 0.5, 0.5)), 0.125 / 1.875),
        (_cube((0, 0, 0), (2, 2, 2)), _cube((0.25, 0, 0)), 1 / 8),
        (_cube((0, 0, 0)), _cube((1.0, 0, 0)), 0.0),
        (_cube((0, 0, 0)), _cube((3, 0, 0)), 0.0),
        (_cube((0, 0, 0), (2, 1, 1)), _cube((0, 0, 0), (2, 1, 1), rodrigues((0, 1, 0), math.pi / 2)), 1 / 3),
    ],
)
def test_iou3d_analytic(a, b, expected):
    assert iou3d(a, b) == pytest.approx(expected, abs=1e-12)
    assert iou3d(b, a) == pytest.approx(expected, abs=1e-12)


def _random_pair(rng):
    a = _cube(rng.normal(size=3), rng.uniform(0.5, 3, 3), random_rotation(rng))
    b = _cube(a.c + rng.normal(size=3) * 0.7, rng.uniform(0.5, 3, 3), random_rotation(rng))
    return a, b


def test_iou3d_matches_monte_carlo():
    rng = np.random.default_rng(1)
    for k in range(20):
        a, b = _random_pair(rng)
        assert iou3d(a, b) == pytest.approx(mc_iou3d(a, b, 200_000, seed=k), abs=0.01)


def test_iou3d_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a, b = _random_pair(rng)
        v = iou3d(a, b)
        assert 0.0 <= v <= 1.0
        assert abs(v - iou3d(b, a)) <= 1e-12
        R, t = random_rotation(rng), rng.normal(size=3) * 5
        a2 = a.replace(center=R @ a.c + t, rotation=R @ a.R)
        b2 = b.replace(center=R @ b.c + t, rotation=R @ b.R)
        assert abs(iou3d(a2, b2) - v) < 1e-9
        assert iou3d(a, a) == pytest.approx(1.0, abs=1e-12)


def test_iou2d_examples():
    a = Box2D(0, 0, 1, 1)
    assert iou2d(a, a) == 1.0
    assert iou2d(a, Box2D(2, 2, 3, 3)) == 0.0
    assert iou2d(a, Box2D(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou2d(a, Box2D(1, 1, 1, 2)) == 0.0
    assert iou2d(a, None) == 0.0


# -- fixtures -------------------------------------------------------------------------


def _gt_fixture(rng, n=10, images=2):
    gts = []
    while len(gts) < n:
        c = (rng.uniform(-6, 6), rng.uniform(-1, 2), rng.uniform(8, 40))
        box = _cube(c, tuple(rng.uniform(0.8, 4.0, 3)), category=int(rng.integers(2)))
        b2 = project_box_to_2d(box, K, (640, 480))
        if b2 is None:
            continue
        gts.append(Detection(f"im{len(gts) % images}", box.replace(box2d=b2)))
    return gts


def _perturbed(rng, gts, n_extra=4):
    dets = []
    for g in gts:
        if rng.uniform() < 0.2:
            continue
        c = np.array(g.box.center) + rng.normal(size=3) * [0.3, 0.2, rng.choice([0.2, 1.5, 6.0])]
        dims = np.array(g.box.dims) * rng.uniform(0.8, 1.2, 3)
        b2 = g.box.box2d
        jitter = rng.normal(size=4) * rng.choice([1.0, 8.0])
        box2d = Box2D(b2.x1 + jitter[0], b2.y1 + jitter[1], b2.x2 + jitter[2], b2.y2 + jitter[3])
        score = float(np.round(rng.uniform(), 1))  # coarse scores create ties
        dets.append(Detection(g.image_id, g.box.replace(center=tuple(c), dims=tuple(dims), box2d=box2d, score=score)))
    for k in range(n_extra):
        extra = _gt_fixture(rng, 1)[0]
        dets.append(Detection(f"im{k % 2}", extra.box.replace(score=float(rng.uniform()))))
    return dets


def _as_dicts(items, cat):
    return [
        {"image": d.image_id, "score": d.score, "box": d.box}
        for d in items
        if cat is None or d.box.category == cat
    ]


def oracle_ap3d(dets, gts, cat=None, t=0.5):
    D, G = _as_dicts(dets, cat), _as_dicts(gts, cat)
    flags, _ = brute_flags(D, G, lambda d, g: aabb_iou3d(d["box"], g["box"]), lambda s: s >= t)
    return brute_ap40(flags, len(G))


def oracle_ap2d(dets, gts, cat=None):
    D, G = _as_dicts(dets, cat), _as_dicts(gts, cat)
    total = 0.0
    for k in range(1, 20):
        t = k / 20
        flags, _ = brute_flags(
            D, G, lambda d, g: rect_iou(d["box"].box2d.as_tuple(), g["box"].box2d.as_tuple()), lambda s: s >= t
        )
        total += brute_ap40(flags, len(G))
    return total / 19


def oracle_ap_depth(dets, gts, cat=None):
    D, G = _as_dicts(dets, cat), _as_dicts(gts, cat)
    total = 0.0
    for x in range(1, 21):
        def sim(d, g):
            if abs(d["box"].center[2] - g["box"].center[2]) > x:
                return None
            return rect_iou(d["box"].box2d.as_tuple(), g["box"].box2d.as_tuple())

        flags, _ = brute_flags(D, G, sim, lambda s: s > 0.7)
        total += brute_ap40(flags, len(G))
    return total / 20


def oracle_ap_3dp(dets, gts, cat=None):
    D, G = _as_dicts(dets, cat), _as_dicts(gts, cat)
    _, pairs = brute_flags(
        D, G, lambda d, g: rect_iou(d["box"].box2d.as_tuple(), g["box"].box2d.as_tuple()), lambda s: s > 0.7
    )
    moved = []
    for i, d in enumerate(D):
        box = d["box"]
        if i in pairs:
            zg = G[pairs[i]]["box"].center[2]
            x, y, z = box.center
            box = box.replace(center=(x * zg / z, y * zg / z, zg))
        moved.append({"image": d["image"], "score": d["score"], "box": box})
    flags, _ = brute_flags(moved, G, lambda d, g: aabb_iou3d(d["box"], g["box"]), lambda s: s >= 0.5)
    return brute_ap40(flags, len(G))


# -- AP examples ------------------------------------------------------------------------


def _perfect(gts):
    return [Detection(g.image_id, g.box.replace(score=1.0)) for g in gts]


def test_perfect_detections_score_one():
    gts = _gt_fixture(np.random.default_rng(3))
    dets = _perfect(gts)
    assert ap3d(dets, gts) == 1.0
    assert ap2d(dets, gts) == 1.0
    assert ap_depth(dets, gts) == 1.0
    assert ap_3dp(dets, gts) == 1.0


def test_no_detections_score_zero():
    gts = _gt_fixture(np.random.default_rng(4))
    assert ap3d([], gts) == ap2d([], gts) == ap_depth([], gts) == ap_3dp([], gts) == 0.0


def test_no_ground_truth_scores_zero():
    gts = _gt_fixture(np.random.default_rng(4))
    assert ap3d(_perfect(gts), []) == 0.0


def test_five_tp_then_five_fp_staircase():
    gts = _gt_fixture(np.random.default_rng(5))
    dets = [Detection(g.image_id, g.box.replace(score=1.0 - 0.01 * i)) for i, g in enumerate(gts[:5])]
    dets += [Detection(gts[0].image_id, _cube((100, 0, 50), score=0.5 - 0.01 * i)) for i in range(5)]
    expected = brute_ap40([True] * 5 + [False] * 5, 10)
    assert expected == 0.5
    assert ap3d(dets, gts) == pytest.approx(expected, abs=1e-12)


def test_interleaved_staircase():
    gts = _gt_fixture(np.random.default_rng(6))
    miss = Detection(gts[0].image_id, _cube((100, 0, 50)))
    pattern = [True, False, True, True, False, False, True, False, True, True, False]
    dets, g = [], iter(gts)
    for i, hit in enumerate(pattern):
        src = next(g) if hit else miss
        dets.append(Detection(src.image_id, src.box.replace(score=1.0 - 0.05 * i)))
    assert ap3d(dets, gts) == pytest.approx(brute_ap40(pattern, 10), abs=1e-12)


def test_ap2d_fixture_at_half_iou():
    gt = Detection("a", _cube((0, 0, 10), box2d=Box2D(0, 0, 10, 10)))
    det = Detection("a", _cube((0, 0, 10), box2d=Box2D(0, 0, 10, 5), score=0.9))
    assert iou2d(det.box.box2d, gt.box.box2d) == 0.5
    # hits for t = 0.05 .. 0.50, i.e. 10 of 19 thresholds, each with AP 1
    assert ap2d([det], [gt]) == pytest.approx(10 / 19, abs=1e-12)
    assert ap2d([det], [gt]) == pytest.approx(oracle_ap2d([det], [gt]), abs=1e-12)


@pytest.mark.parametrize("err,expected", [(0.0, 1.0), (25.0, 0.0), (10.5, 0.5), (-10.5, 0.5), (0.5, 1.0)])
def test_ap_depth_uniform_error(err, expected):
    gts = _gt_fixture(np.random.default_rng(7))
    dets = []
    for g in gts:
        x, y, z = g.box.center
        dets.append(Detection(g.image_id, g.box.replace(center=(x, y, z + err), score=1.0)))
    assert ap_depth(dets, gts) == expected


def test_ap_3dp_repairs_depth_only():
    gts = _gt_fixture(np.random.default_rng(8))
    shifted, wrong = [], []
    for g in gts:
        x, y, z = g.box.center
        k = 1.3
        shifted.append(Detection(g.image_id, g.box.replace(center=(x * k, y * k, z * k), score=1.0)))
        wrong.append(Detection(g.image_id, g.box.replace(dims=tuple(d * 0.5 for d in g.box.dims), score=1.0)))
    assert ap3d(shifted, gts) < 1.0
    assert ap_3dp(shifted, gts) == 1.0
    assert ap_3dp(wrong, gts) == 0.0


# -- oracle equivalence -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(25))
def test_ap_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    gts = _gt_fixture(rng, n=int(rng.integers(3, 9)))
    dets = _perturbed(rng, gts, n_extra=int(rng.integers(0, 21 - 2 * len(gts))))
    assert len(gts) + len(dets) <= 20
    for cat in (None, 0, 1):
        assert ap3d(dets, gts, cat) == pytest.approx(oracle_ap3d(dets, gts, cat), abs=1e-12)
        assert ap2d(dets, gts, cat) == pytest.approx(oracle_ap2d(dets, gts, cat), abs=1e-12)
        assert ap_depth(dets, gts, cat) == pytest.approx(oracle_ap_depth(dets, gts, cat), abs=1e-12)
        assert ap_3dp(dets, gts, cat) == pytest.approx(oracle_ap_3dp(dets, gts, cat), abs=1e-12)


def test_ap_bounded_and_monotone_in_threshold():
    rng = np.random.default_rng(9)
    for _ in range(20):
        gts = _gt_fixture(rng, 8)
        dets = _perturbed(rng, gts)
        prev = 1.0
        for t in np.linspace(0.05, 0.95, 19):
            v = match_and_curve(dets, gts, None, iou3d, t).ap
            assert 0.0 <= v <= prev + 1e-15
            prev = v


def test_interpolated_precision_non_increasing():
    rng = np.random.default_rng(10)
    gts = _gt_fixture(rng, 10)
    curve = match_and_curve(_perturbed(rng, gts), gts, None, iou3d, 0.3)
    assert np.all(np.diff(curve.precision) <= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 8), st.floats(0, 8), st.floats(0, 1)), min_size=1, max_size=15),
       st.lists(st.tuples(st.floats(0, 8), st.floats(0, 8)), min_size=1, max_size=8))
def test_matching_assigns_each_gt_once(det_specs, gt_specs):
    def mk(x, y, score=None):
        return Detection("a", _cube((x, y, 10), (2, 2, 2), score=score, box2d=Box2D(x, y, x + 2, y + 2)))

    dets = [mk(x, y, s) for x, y, s in det_specs]
    gts = [mk(x, y) for x, y in gt_specs]
    matches = greedy_match(dets, gts, lambda d, g: iou3d(d.box, g.box), 0.1)
    taken = [m.gt_index for m in matches if m.tp]
    assert len(taken) == len(set(taken))
    assert sum(m.tp for m in matches) <= len(gts)
