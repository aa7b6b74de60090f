"""Deterministic 2D articulated-figure scenes with exact ground truth.

A figure is a kinematic tree over the 17 COCO joints driven by named bone
lengths and absolute per-frame angles. Bodies are rasterized as capsules
around the default bone set; every body pixel's ground-truth world flow is
the motion of its governing bone, so the generated scenes satisfy the
kinematic and boundary constraints by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FlowMap, KeypointFrame, PointSet, SubjectMask, Vec2
from .errors import EmptySubject, SpecOutOfBounds, ValidationError
from .skeleton import DEFAULT_BONES

DEFAULT_LENGTHS = {
    "hip_width": 10.0,
    "torso": 22.0,
    "neck": 8.0,
    "head": 5.0,
    "upper_arm": 12.0,
    "forearm": 11.0,
    "thigh": 14.0,
    "shin": 13.0,
}

_DOWN = np.pi / 2
_UP = -np.pi / 2

DEFAULT_ANGLES = {
    "hip_axis": 0.0,
    "torso_l": _UP,
    "torso_r": _UP,
    "neck": _UP,
    "upper_arm_l": _DOWN + 0.35,
    "forearm_l": _DOWN + 0.2,
    "upper_arm_r": _DOWN - 0.35,
    "forearm_r": _DOWN - 0.2,
    "thigh_l": _DOWN + 0.15,
    "shin_l": _DOWN + 0.08,
    "thigh_r": _DOWN - 0.15,
    "shin_r": _DOWN - 0.08,
}

# Capsule radius per bone in DEFAULT_BONES order: arms, legs, shoulder/hip
# girdles, torso sides, nose struts.
DEFAULT_RADII = (2.5, 2.5, 2.5, 2.5, 2.5, 2.5, 2.5, 2.5, 3.0, 3.0, 4.0, 4.0, 2.5, 2.5)

_MARGIN = 2.0


@dataclass(frozen=True)
class SubjectSpec:
    """One articulated figure: root path plus per-frame absolute bone angles."""

    root_t: tuple = (64.0, 64.0)
    root_t1: tuple = (64.0, 64.0)
    lengths: dict = field(default_factory=dict)
    angles_t: dict = field(default_factory=dict)
    angles_t1: dict = field(default_factory=dict)
    capsule_radii: tuple = DEFAULT_RADII

    def __post_init__(self):
        for name in list(self.lengths) + list(self.angles_t) + list(self.angles_t1):
            if name not in DEFAULT_LENGTHS and name not in DEFAULT_ANGLES:
                raise ValidationError(f"unknown bone parameter {name!r}")
        radii = tuple(float(r) for r in self.capsule_radii)
        if len(radii) != len(DEFAULT_BONES) or any(r <= 0 for r in radii):
            raise ValidationError(f"capsule_radii needs {len(DEFAULT_BONES)} positive entries")
        object.__setattr__(self, "capsule_radii", radii)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    subjects: tuple = (SubjectSpec(),)
    camera_motion: Vec2 = Vec2(0.0, 0.0)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValidationError("scene dimensions must be at least 32 pixels")
        if not self.subjects:
            raise ValidationError("scene needs at least one subject")
        object.__setattr__(self, "subjects", tuple(self.subjects))


@dataclass(frozen=True)
class SceneTruth:
    keypoints: tuple
    mask_t: SubjectMask
    boundary_t: PointSet
    boundaries_by_subject: dict
    gt_world: FlowMap
    gt_local: FlowMap
    gt_subject: dict
    gt_subject_field: FlowMap
    frames: tuple


def _dir(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)])


def _figure_joints(spec: SubjectSpec, frame: int) -> np.ndarray:
    """Forward kinematics: 17 COCO joint positions for frame 0 or 1."""
    lengths = {**DEFAULT_LENGTHS, **spec.lengths}
    overrides = spec.angles_t if frame == 0 else spec.angles_t1
    angles = {**DEFAULT_ANGLES, **overrides}
    root = np.asarray(spec.root_t if frame == 0 else spec.root_t1, dtype=np.float64)

    j = np.zeros((17, 2))
    axis = _dir(angles["hip_axis"])
    j[11] = root - 0.5 * lengths["hip_width"] * axis
    j[12] = root + 0.5 * lengths["hip_width"] * axis
    j[5] = j[11] + lengths["torso"] * _dir(angles["torso_l"])
    j[6] = j[12] + lengths["torso"] * _dir(angles["torso_r"])
    mid = 0.5 * (j[5] + j[6])
    u = _dir(angles["neck"])
    v = np.array([-u[1], u[0]])
    j[0] = mid + lengths["neck"] * u
    # face features stay within the nose-strut capsules so every keypoint
    # lies on the rasterized body
    head = lengths["head"]
    j[1] = j[0] + 0.25 * head * u - 0.3 * head * v
    j[2] = j[0] + 0.25 * head * u + 0.3 * head * v
    j[3] = j[0] + 0.1 * head * u - 0.45 * head * v
    j[4] = j[0] + 0.1 * head * u + 0.45 * head * v
    j[7] = j[5] + lengths["upper_arm"] * _dir(angles["upper_arm_l"])
    j[9] = j[7] + lengths["forearm"] * _dir(angles["forearm_l"])
    j[8] = j[6] + lengths["upper_arm"] * _dir(angles["upper_arm_r"])
    j[10] = j[8] + lengths["forearm"] * _dir(angles["forearm_r"])
    j[13] = j[11] + lengths["thigh"] * _dir(angles["thigh_l"])
    j[15] = j[13] + lengths["shin"] * _dir(angles["shin_l"])
    j[14] = j[12] + lengths["thigh"] * _dir(angles["thigh_r"])
    j[16] = j[14] + lengths["shin"] * _dir(angles["shin_r"])
    return j


def _segment_distances(joints: np.ndarray, width: int, height: int) -> np.ndarray:
    """Distance of every pixel to each bone segment; shape (n_bones, h, w)."""
    ys, xs = np.mgrid[0:height, 0:width]
    p = np.stack([xs, ys], axis=-1).astype(np.float64)
    out = np.empty((len(DEFAULT_BONES), height, width))
    for bi, (a_idx, b_idx) in enumerate(DEFAULT_BONES):
        a = joints[a_idx]
        b = joints[b_idx]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            closest = a[None, None, :]
        else:
            t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
            closest = a + t[..., None] * ab
        d = p - closest
        out[bi] = np.hypot(d[..., 0], d[..., 1])
    return out


def _bone_motion(j0: np.ndarray, j1: np.ndarray, bone: tuple) -> tuple:
    """Segment-to-segment map (rotation, scale, translation anchor pair)."""
    a0, b0 = j0[bone[0]], j0[bone[1]]
    a1, b1 = j1[bone[0]], j1[bone[1]]
    v0 = b0 - a0
    v1 = b1 - a1
    len0 = np.hypot(*v0)
    len1 = np.hypot(*v1)
    if len0 < 1e-12:
        theta, scale = 0.0, 1.0
    else:
        theta = np.arctan2(v1[1], v1[0]) - np.arctan2(v0[1], v0[0])
        scale = len1 / len0
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]]) * scale
    return a0, a1, rot


def generate_scene(spec: SceneSpec) -> SceneTruth:
    """Build frames, masks, keypoints, boundaries, and exact GT flow.

    Identical specs (including seed) produce bitwise-identical output.
    """
    w, h = spec.width, spec.height
    labels = np.zeros((h, w), dtype=np.int32)
    labels1 = np.zeros((h, w), dtype=np.int32)
    world = np.zeros((h, w, 2))
    world[..., 0] = spec.camera_motion.dx
    world[..., 1] = spec.camera_motion.dy
    subject_field = np.zeros((h, w, 2))
    frame0 = np.zeros((h, w), dtype=np.uint8)
    frame1 = np.zeros((h, w), dtype=np.uint8)
    persons_t = []
    persons_t1 = []
    gt_subject: dict[int, Vec2] = {}

    for si, sub in enumerate(spec.subjects):
        label = si + 1
        j0 = _figure_joints(sub, 0)
        j1 = _figure_joints(sub, 1)
        radii = np.asarray(sub.capsule_radii)
        for joints in (j0, j1):
            lo = joints.min(axis=0) - radii.max()
            hi = joints.max(axis=0) + radii.max()
            if lo[0] < _MARGIN or lo[1] < _MARGIN or hi[0] > w - 1 - _MARGIN or hi[1] > h - 1 - _MARGIN:
                raise SpecOutOfBounds(
                    f"subject {label} leaves the raster (extent {lo} .. {hi})"
                )

        dists = _segment_distances(j0, w, h)
        inside = dists <= radii[:, None, None]
        body = inside.any(axis=0)
        if (labels[body] != 0).any():
            raise SpecOutOfBounds(f"subject {label} overlaps an earlier subject")
        labels[body] = label

        governing = np.argmin(np.where(inside, dists, np.inf), axis=0)
        ys, xs = np.nonzero(body)
        p = np.stack([xs, ys], axis=1).astype(np.float64)
        motions = [_bone_motion(j0, j1, bone) for bone in DEFAULT_BONES]
        for bi, (a0, a1, rot) in enumerate(motions):
            sel = governing[ys, xs] == bi
            if not sel.any():
                continue
            moved = (p[sel] - a0) @ rot.T + a1
            world[ys[sel], xs[sel]] = moved - p[sel]
        frame0[body] = (70 + 12 * governing[body]).astype(np.uint8)

        dists1 = _segment_distances(j1, w, h)
        inside1 = dists1 <= radii[:, None, None]
        body1 = inside1.any(axis=0)
        if (labels1[body1] != 0).any():
            raise SpecOutOfBounds(f"subject {label} overlaps an earlier subject at t+1")
        labels1[body1] = label
        governing1 = np.argmin(np.where(inside1, dists1, np.inf), axis=0)
        frame1[body1] = (70 + 12 * governing1[body1]).astype(np.uint8)

        root_delta = np.asarray(sub.root_t1) - np.asarray(sub.root_t)
        gt_subject[label] = Vec2(root_delta[0], root_delta[1])
        subject_field[body] = root_delta

        for joints, plist in ((j0, persons_t), (j1, persons_t1)):
            arr = np.ones((17, 3))
            arr[:, :2] = joints
            plist.append(arr)

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        conf = float(np.exp(-spec.noise_sigma))
        for plist in (persons_t, persons_t1):
            for arr in plist:
                arr[:, :2] += rng.normal(0.0, spec.noise_sigma, size=(17, 2))
                arr[:, 2] = conf

    mask = SubjectMask(labels)
    boundaries = {lab: trace_boundary(mask, lab) for lab in mask.subject_ids}
    if boundaries:
        union = np.concatenate([boundaries[lab].points for lab in sorted(boundaries)], axis=0)
    else:
        union = np.zeros((0, 2))

    local = world - subject_field
    exact_subject = world - local
    frame0.setflags(write=False)
    frame1.setflags(write=False)

    return SceneTruth(
        keypoints=(KeypointFrame(tuple(persons_t)), KeypointFrame(tuple(persons_t1))),
        mask_t=mask,
        boundary_t=PointSet(union),
        boundaries_by_subject=boundaries,
        gt_world=FlowMap(world),
        gt_local=FlowMap(local),
        gt_subject=gt_subject,
        gt_subject_field=FlowMap(exact_subject),
        frames=(frame0, frame1),
    )


# Clockwise Moore neighborhood in screen coordinates (y down), as (dy, dx).
_MOORE = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def _moore_trace(sel: np.ndarray, start: tuple, backtrack: tuple) -> list:
    """Ordered Moore-neighbor contour walk from start; backtrack is background."""
    h, w = sel.shape

    def fg(y, x):
        return 0 <= y < h and 0 <= x < w and sel[y, x]

    contour = []
    seen_states = set()
    current = start
    b = backtrack
    while (current, b) not in seen_states:
        seen_states.add((current, b))
        contour.append(current)
        rel = (b[0] - current[0], b[1] - current[1])
        i0 = _MOORE.index(rel)
        nxt = None
        for k in range(1, 9):
            idx = (i0 + k) % 8
            ny, nx = current[0] + _MOORE[idx][0], current[1] + _MOORE[idx][1]
            if fg(ny, nx):
                prev = (i0 + k - 1) % 8
                b = (current[0] + _MOORE[prev][0], current[1] + _MOORE[prev][1])
                nxt = (ny, nx)
                break
        if nxt is None:
            break  # isolated pixel
        current = nxt
    return contour


def trace_boundary(mask: SubjectMask, subject_id: int) -> PointSet:
    """Ordered outline of one subject: every pixel returned is subject-labeled
    and 8-adjacent to a non-subject pixel. Hole contours are appended after
    the outer contour."""
    sel = mask.labels == subject_id
    if not sel.any():
        raise EmptySubject(f"subject {subject_id} not present in mask")

    padded = np.pad(sel, 1)
    interior = (
        padded[:-2, :-2] & padded[:-2, 1:-1] & padded[:-2, 2:]
        & padded[1:-1, :-2] & padded[1:-1, 2:]
        & padded[2:, :-2] & padded[2:, 1:-1] & padded[2:, 2:]
    )
    boundary_set = sel & ~interior

    remaining = boundary_set.copy()
    ordered: list[tuple] = []
    seen = set()
    h, w = sel.shape
    while remaining.any():
        ys, xs = np.nonzero(remaining)
        seed = (int(ys[0]), int(xs[0]))
        back = None
        for dy, dx in _MOORE:
            ny, nx = seed[0] + dy, seed[1] + dx
            if not (0 <= ny < h and 0 <= nx < w) or not sel[ny, nx]:
                back = (ny, nx)
                break
        loop = _moore_trace(sel, seed, back)
        for pix in loop:
            remaining[pix] = False
            if pix not in seen:
                seen.add(pix)
                ordered.append(pix)
        remaining[seed] = False

    pts = np.array([(x, y) for y, x in ordered], dtype=np.float64)
    return PointSet(pts)


def scaled_lengths(factor: float) -> dict:
    """Default bone lengths scaled by a factor (smaller figures for small rasters)."""
    return {name: length * factor for name, length in DEFAULT_LENGTHS.items()}


def single_figure_scene(
    width: int = 128,
    height: int = 128,
    translation: tuple = (4.0, 1.0),
    arm_swing: float = 0.25,
    leg_swing: float = 0.18,
    root: tuple | None = None,
    length_scale: float = 1.0,
    seed: int = 0,
) -> SceneSpec:
    """Reference walking-style scene: root translation plus limb swings."""
    if root is None:
        root = (width * 0.45, height * 0.55)
    root_t1 = (root[0] + translation[0], root[1] + translation[1])
    angles_t1 = {
        "upper_arm_l": DEFAULT_ANGLES["upper_arm_l"] + arm_swing,
        "forearm_l": DEFAULT_ANGLES["forearm_l"] + arm_swing,
        "upper_arm_r": DEFAULT_ANGLES["upper_arm_r"] - arm_swing,
        "thigh_l": DEFAULT_ANGLES["thigh_l"] - leg_swing,
        "thigh_r": DEFAULT_ANGLES["thigh_r"] + leg_swing,
        "shin_l": DEFAULT_ANGLES["shin_l"] - leg_swing,
    }
    lengths = scaled_lengths(length_scale) if length_scale != 1.0 else {}
    subject = SubjectSpec(root_t=root, root_t1=root_t1, angles_t1=angles_t1, lengths=lengths)
    return SceneSpec(width=width, height=height, subjects=(subject,), seed=seed)


def random_scene(seed: int, width: int = 96, height: int = 96, length_scale: float = 1.0) -> SceneSpec:
    """Randomized single-figure scene with modest articulation, reproducible by seed."""
    rng = np.random.default_rng(seed)
    translation = rng.uniform(-3.5, 3.5, size=2)
    angles_t1 = {}
    for name in ("upper_arm_l", "upper_arm_r", "forearm_l", "forearm_r",
                 "thigh_l", "thigh_r", "shin_l", "shin_r"):
        angles_t1[name] = DEFAULT_ANGLES[name] + rng.uniform(-0.2, 0.2)
    root = (width * 0.5 - translation[0] * 0.5, height * 0.55 - translation[1] * 0.5)
    lengths = scaled_lengths(length_scale) if length_scale != 1.0 else {}
    subject = SubjectSpec(
        root_t=root,
        root_t1=(root[0] + translation[0], root[1] + translation[1]),
        angles_t1=angles_t1,
        lengths=lengths,
    )
    return SceneSpec(width=width, height=height, subjects=(subject,), seed=seed)
