import numpy as np
import pytest

from wlflow import skeleton as skel
from wlflow.core import EPS_CONF, FlowMap, KeypointFrame, SubjectMask
from wlflow.errors import (
    DegenerateConfiguration,
    InsufficientHeadPoints,
    NoCandidates,
    TopologyMismatch,
    ValidationError,
)


def _joints(rng=None, conf=1.0):
    rng = rng or np.random.default_rng(0)
    j = np.full((17, 3), conf)
    j[:, 0] = rng.uniform(20, 80, 17)
    j[:, 1] = rng.uniform(20, 80, 17)
    return j


def test_single_bone_interpolation():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=11)
    j = np.zeros((17, 3))
    j[:, 2] = 1.0
    j[1, 0] = 10.0
    sk = skel.interpolate_skeleton(j, topo)
    assert np.allclose(sk.xy[:, 0], np.arange(11.0))
    assert np.all(sk.xy[:, 1] == 0.0)
    assert np.all(sk.confidences == 1.0)


def test_default_topology_yields_210_points():
    sk = skel.interpolate_skeleton(_joints())
    assert len(sk.points) == 210
    assert sk.topology.n_points == 14 * 15


def test_endpoint_samples_bit_exact():
    j = _joints(np.random.default_rng(5))
    topo = skel.BoneTopology()
    sk = skel.interpolate_skeleton(j, topo)
    m = topo.samples_per_bone
    for bi, (a, b) in enumerate(topo.edges):
        assert np.array_equal(sk.xy[bi * m], j[a, :2])
        assert np.array_equal(sk.xy[bi * m + m - 1], j[b, :2])


def test_interpolated_confidence_is_min_of_endpoints():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=5)
    j = np.zeros((17, 3))
    j[0, 2] = 0.9
    j[1, 2] = 0.4
    sk = skel.interpolate_skeleton(j, topo)
    assert np.all(sk.confidences == 0.4)


def test_confidence_clamped_at_floor():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=3)
    j = np.zeros((17, 3))
    sk = skel.interpolate_skeleton(j, topo)
    assert np.all(sk.confidences == EPS_CONF)


def test_offsets_identical_maps_are_zero():
    sk = skel.interpolate_skeleton(_joints())
    off = skel.skeleton_offsets(sk, sk)
    assert np.all(off.vectors == 0.0)


def test_offsets_translation():
    j = _joints()
    j2 = j.copy()
    j2[:, 0] += 3.0
    j2[:, 1] -= 2.0
    off = skel.skeleton_offsets(skel.interpolate_skeleton(j), skel.interpolate_skeleton(j2))
    assert np.allclose(off.vectors, (3.0, -2.0))


def test_offsets_single_moved_point():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=2)
    j = np.zeros((17, 3))
    j2 = j.copy()
    j2[0, :2] = (1.0, 1.0)
    off = skel.skeleton_offsets(
        skel.interpolate_skeleton(j, topo), skel.interpolate_skeleton(j2, topo)
    )
    assert np.allclose(off.vectors[0], (1.0, 1.0))


def test_topology_mismatch_raises():
    a = skel.interpolate_skeleton(_joints())
    b = skel.interpolate_skeleton(_joints(), skel.BoneTopology(samples_per_bone=10))
    with pytest.raises(TopologyMismatch):
        skel.skeleton_offsets(a, b)


def _mask_all_subject(n=100):
    return SubjectMask(np.ones((n, n), dtype=np.int32))


def test_match_coincident_point_wins():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=4)
    pts = np.array([[10.0, 10.0, 0.9], [20.0, 10.0, 1.0], [30.0, 10.0, 1.0], [40.0, 10.0, 1.0]])
    sk = skel.SkeletonMap(pts, topo)
    assert skel.match_body_point((10.0, 10.0), sk, _mask_all_subject()) == 0


def test_match_prefers_higher_confidence_at_equal_distance():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=2)
    pts = np.array([[8.0, 10.0, 1.0], [12.0, 10.0, 0.5]])
    sk = skel.SkeletonMap(pts, topo)
    # scores: 2/1.0 = 2 vs 2/0.5 = 4
    assert skel.match_body_point((10.0, 10.0), sk, _mask_all_subject()) == 0


def test_match_requires_subject_pixel():
    sk = skel.interpolate_skeleton(_joints())
    empty = SubjectMask(np.zeros((100, 100), dtype=np.int32))
    with pytest.raises(ValidationError):
        skel.match_body_point((10.0, 10.0), sk, empty)


def test_match_against_bruteforce_oracle():
    rng = np.random.default_rng(42)
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=50)
    pts = np.column_stack([
        rng.uniform(0, 99, 50),
        rng.uniform(0, 99, 50),
        rng.uniform(0.05, 1.0, 50),
    ])
    sk = skel.SkeletonMap(pts, topo)
    mask = _mask_all_subject()
    for _ in range(100):
        p = rng.uniform(0, 99, 2)
        got = skel.match_body_point(p, sk, mask)
        scores = [
            np.hypot(p[0] - q[0], p[1] - q[1]) / max(q[2], EPS_CONF) for q in pts
        ]
        assert got == int(np.argmin(scores))
        assert scores[got] <= min(scores)


def test_match_all_background_is_none():
    mask = SubjectMask(np.zeros((8, 8), dtype=np.int32))
    table = skel.match_all(FlowMap.zeros(8, 8), {}, mask)
    assert np.all(table == -1)


def test_match_all_single_pixel_subject():
    labels = np.zeros((8, 8), dtype=np.int32)
    labels[3, 4] = 1
    mask = SubjectMask(labels)
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=2)
    sk = skel.SkeletonMap(np.array([[4.0, 3.0, 1.0], [7.0, 7.0, 1.0]]), topo)
    table = skel.match_all(FlowMap.zeros(8, 8), {1: sk}, mask)
    assert table[3, 4] == 0
    assert (table >= 0).sum() == 1


def test_match_all_equals_per_pixel_oracle(small_truth):
    mask = small_truth.mask_t
    frame = small_truth.keypoints[0]
    assignment = skel.assign_subjects(frame, mask)
    skeletons = {
        lab: skel.interpolate_skeleton(frame.persons[pi]) for lab, pi in assignment.items()
    }
    table = skel.match_all(FlowMap.zeros(mask.width, mask.height), skeletons, mask)
    ys, xs = np.nonzero(mask.labels)
    for y, x in zip(ys[::7], xs[::7]):  # stride keeps the oracle loop fast
        lab = int(mask.labels[y, x])
        expect = skel.match_body_point((float(x), float(y)), skeletons[lab], mask)
        assert table[y, x] == expect
    assert np.all(table[mask.labels == 0] == -1)


def test_match_all_missing_skeleton_raises():
    labels = np.zeros((8, 8), dtype=np.int32)
    labels[1, 1] = 1
    with pytest.raises(NoCandidates):
        skel.match_all(FlowMap.zeros(8, 8), {}, SubjectMask(labels))


def test_match_all_thread_count_invariance(small_truth, monkeypatch):
    mask = small_truth.mask_t
    frame = small_truth.keypoints[0]
    assignment = skel.assign_subjects(frame, mask)
    skeletons = {
        lab: skel.interpolate_skeleton(frame.persons[pi]) for lab, pi in assignment.items()
    }
    tables = []
    for n in ("1", "2", "8"):
        monkeypatch.setenv("HMORE_THREADS", n)
        tables.append(skel.match_all(FlowMap.zeros(mask.width, mask.height), skeletons, mask))
    assert np.array_equal(tables[0], tables[1])
    assert np.array_equal(tables[0], tables[2])


def test_fit_translation_exact():
    j = _joints()
    j2 = j.copy()
    j2[:, 0] += 5.0
    t = skel.fit_alignment(
        skel.interpolate_skeleton(j), skel.interpolate_skeleton(j2), "translation"
    )
    assert t.kind == "translation"
    assert np.allclose(t.matrix[:2, 2], (-5.0, 0.0))
    moved = t.apply(np.array([[12.0, 7.0]]))
    assert np.allclose(moved, [[7.0, 7.0]])


def test_translation_alignment_cancels_rigid_motion():
    j = _joints()
    j2 = j.copy()
    j2[:, :2] += (5.0, -3.0)
    k_t = skel.interpolate_skeleton(j)
    k_t1 = skel.interpolate_skeleton(j2)
    t = skel.fit_alignment(k_t, k_t1, "translation")
    off = skel.aligned_offsets(k_t, k_t1, t)
    assert np.hypot(off.vectors[:, 0], off.vectors[:, 1]).max() < 1e-9


def test_head_anchor_recovers_rotation():
    j = _joints()
    head = j[:5, :2].mean(axis=0)
    ang = np.deg2rad(30)
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    j2 = j.copy()
    j2[:, :2] = (j[:, :2] - head) @ rot.T + head
    t = skel.fit_alignment(
        skel.interpolate_skeleton(j), skel.interpolate_skeleton(j2), "head_anchor_similarity"
    )
    assert t.kind == "similarity"
    m = t.matrix[:2, :2]
    recovered = np.arctan2(m[1, 0], m[0, 0])
    assert abs(recovered - (-ang)) < 1e-6
    scale = np.sqrt(abs(np.linalg.det(m)))
    assert abs(scale - 1.0) < 1e-9


def test_head_anchor_needs_head_points():
    j = _joints()
    j[:5, 2] = 0.0  # kill all head confidences
    k_t = skel.interpolate_skeleton(j)
    k_t1 = skel.interpolate_skeleton(j)
    with pytest.raises(InsufficientHeadPoints):
        skel.fit_alignment(k_t, k_t1, "head_anchor_similarity")


def _warp(points, h):
    hp = np.hstack([points, np.ones((points.shape[0], 1))]) @ h.T
    return hp[:, :2] / hp[:, 2:3]


def test_homography_recovery_max_reprojection():
    k_t = skel.interpolate_skeleton(_joints(np.random.default_rng(2)))
    h_true = np.array([
        [1.02, 0.03, 2.0],
        [-0.01, 0.98, -1.5],
        [1e-4, -2e-4, 1.0],
    ])
    warped = np.ones((210, 3))
    warped[:, :2] = _warp(k_t.xy, np.linalg.inv(h_true))
    k_t1 = skel.SkeletonMap(warped, k_t.topology)
    t = skel.fit_alignment(k_t, k_t1, "full_body_homography")
    assert t.kind == "homography"
    err = np.hypot(*(t.apply(k_t1.xy) - k_t.xy).T)
    assert err.max() < 1e-3


def test_homography_scale_invariance():
    rng = np.random.default_rng(9)
    k_t = skel.interpolate_skeleton(_joints(rng))
    h_true = np.array([
        [0.99, -0.02, 1.0],
        [0.015, 1.03, 0.5],
        [2e-4, 1e-4, 1.0],
    ])
    warped = np.ones((210, 3))
    warped[:, :2] = _warp(k_t.xy, np.linalg.inv(h_true))
    k_t1 = skel.SkeletonMap(warped, k_t.topology)

    def reproj_error(k_a, k_b):
        t = skel.fit_alignment(k_a, k_b, "full_body_homography")
        return np.hypot(*(t.apply(k_b.xy) - k_a.xy).T).max()

    e1 = reproj_error(k_t, k_t1)
    scaled_t = skel.SkeletonMap(k_t.points * (10.0, 10.0, 1.0), k_t.topology)
    scaled_t1 = skel.SkeletonMap(k_t1.points * (10.0, 10.0, 1.0), k_t1.topology)
    e10 = reproj_error(scaled_t, scaled_t1)
    assert abs(e10 - 10.0 * e1) <= 1e-9 * max(e10, 10.0 * e1, 1e-12) + 1e-12


def test_homography_coincident_points_degenerate():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=5)
    pts = np.ones((5, 3))
    pts[:, :2] = (10.0, 10.0)
    sk = skel.SkeletonMap(pts, topo)
    with pytest.raises(DegenerateConfiguration):
        skel.fit_alignment(sk, sk, "full_body_homography")


def test_homography_collinear_falls_back_to_similarity():
    topo = skel.BoneTopology(edges=((0, 1),), samples_per_bone=50)
    pts = np.ones((50, 3))
    pts[:, 0] = np.linspace(10, 60, 50)
    pts[:, 1] = 20.0
    sk_a = skel.SkeletonMap(pts, topo)
    moved = pts.copy()
    moved[:, 0] += 4.0
    sk_b = skel.SkeletonMap(moved, topo)
    t = skel.fit_alignment(sk_a, sk_b, "full_body_homography")
    assert t.kind == "similarity"


def test_aligned_offsets_identity_matches_plain_offsets():
    j = _joints()
    j2 = _joints(np.random.default_rng(11))
    k_t = skel.interpolate_skeleton(j)
    k_t1 = skel.interpolate_skeleton(j2)
    ident = skel.AlignTransform("translation", np.eye(3))
    off_a = skel.aligned_offsets(k_t, k_t1, ident)
    off_b = skel.skeleton_offsets(k_t, k_t1)
    assert np.allclose(off_a.vectors, off_b.vectors)


def test_aligned_offsets_rotating_figure_closed_form():
    """Global rotation about the head plus an extra forearm swing: alignment
    removes the global part, leaving exactly the local limb motion."""
    j = _joints(np.random.default_rng(21))
    topo = skel.BoneTopology()
    elbow = j[7, :2]
    swing = np.deg2rad(25)
    rs = np.array([[np.cos(swing), -np.sin(swing)], [np.sin(swing), np.cos(swing)]])
    j_local = j.copy()
    j_local[9, :2] = (j[9, :2] - elbow) @ rs.T + elbow  # wrist rotates about elbow

    head = j[:5, :2].mean(axis=0)
    ang = np.deg2rad(40)
    rg = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    j_global = j_local.copy()
    j_global[:, :2] = (j_local[:, :2] - head) @ rg.T + head

    k_t = skel.interpolate_skeleton(j, topo)
    k_t1 = skel.interpolate_skeleton(j_global, topo)
    t = skel.fit_alignment(k_t, k_t1, "head_anchor_similarity")
    got = skel.aligned_offsets(k_t, k_t1, t)
    expected = skel.skeleton_offsets(k_t, skel.interpolate_skeleton(j_local, topo))
    assert np.abs(got.vectors - expected.vectors).max() < 1e-9


def test_assign_subjects_by_hip_midpoint():
    labels = np.zeros((40, 40), dtype=np.int32)
    labels[5:15, 5:15] = 1
    labels[25:35, 25:35] = 2
    mask = SubjectMask(labels)
    p1 = np.ones((17, 3))
    p1[:, :2] = 30.0  # hips at 30 -> subject 2
    p2 = np.ones((17, 3))
    p2[:, :2] = 10.0  # hips at 10 -> subject 1
    frame = KeypointFrame((p1, p2))
    assignment = skel.assign_subjects(frame, mask)
    assert assignment == {2: 0, 1: 1}
