"""Dense skeleton maps, body-point matching, and alignment transforms.

A skeleton map is built by uniformly sampling points along each bone of a
17-joint COCO frame. Matching assigns every subject pixel to the skeleton
point minimizing distance-over-confidence. Alignment transforms map the
later skeleton onto the earlier one so offsets can be expressed in the
subject's own frame.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import EPS_CONF, FlowMap, KeypointFrame, SubjectMask, validate_pairing, worker_count
from .errors import (
    DegenerateConfiguration,
    InsufficientHeadPoints,
    NoCandidates,
    TopologyMismatch,
    ValidationError,
)

# 14 limb/torso bones over COCO indices; with 15 samples each this yields
# the default 210-point skeleton map.
DEFAULT_BONES = (
    (5, 7), (7, 9), (6, 8), (8, 10),      # arms
    (11, 13), (13, 15), (12, 14), (14, 16),  # legs
    (5, 6), (11, 12),                      # shoulders, hips
    (5, 11), (6, 12),                      # torso sides
    (0, 5), (0, 6),                        # nose to shoulders
)
DEFAULT_SAMPLES_PER_BONE = 15

HEAD_JOINTS = (0, 1, 2, 3, 4)

# Homography fits fall back to a similarity when the DLT system is this
# ill-conditioned (near-collinear skeletons).
_DLT_CONDITION_LIMIT = 1e8


@dataclass(frozen=True)
class BoneTopology:
    edges: tuple = DEFAULT_BONES
    samples_per_bone: int = DEFAULT_SAMPLES_PER_BONE

    def __post_init__(self):
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        if not edges:
            raise ValidationError("topology needs at least one bone")
        if len(set(edges)) != len(edges):
            raise ValidationError("bone list contains duplicates")
        for a, b in edges:
            if not (0 <= a <= 16 and 0 <= b <= 16):
                raise ValidationError(f"bone ({a}, {b}) uses joint index outside 0..16")
        if self.samples_per_bone < 2:
            raise ValidationError("samples_per_bone must be >= 2")
        object.__setattr__(self, "edges", edges)

    @property
    def n_points(self) -> int:
        return len(self.edges) * self.samples_per_bone

    def bone_of_point(self, index: int) -> int:
        """Bone owning skeleton point `index` (edge-major ordering)."""
        return index // self.samples_per_bone


@dataclass(frozen=True)
class SkeletonMap:
    """Interpolated skeleton points, rows (x, y, c), edge-major ordering.

    `joints` keeps the source 17x3 joint array when the map was built by
    interpolate_skeleton; head-anchor alignment needs it.
    """

    points: np.ndarray
    topology: BoneTopology
    joints: np.ndarray | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValidationError(f"skeleton points must have shape (n, 3), got {arr.shape}")
        if arr.shape[0] != self.topology.n_points:
            raise ValidationError(
                f"skeleton has {arr.shape[0]} points but topology implies {self.topology.n_points}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError("skeleton points contain non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)
        if self.joints is not None:
            j = np.ascontiguousarray(np.asarray(self.joints, dtype=np.float64))
            j.setflags(write=False)
            object.__setattr__(self, "joints", j)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def confidences(self) -> np.ndarray:
        return self.points[:, 2]


@dataclass(frozen=True)
class SkeletonOffsets:
    """Per-point displacement between two skeleton maps of the same topology."""

    vectors: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        c = np.ascontiguousarray(np.asarray(self.confidences, dtype=np.float64))
        if v.ndim != 2 or v.shape[1] != 2 or c.shape != (v.shape[0],):
            raise ValidationError("offsets need (n, 2) vectors and (n,) confidences")
        v.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "confidences", c)

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class AlignTransform:
    """Homogeneous 3x3 map taking later-frame skeleton coordinates to the earlier frame."""

    kind: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.kind not in ("homography", "similarity", "translation"):
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        if m.shape != (3, 3):
            raise ValidationError(f"transform matrix must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValidationError("transform matrix is singular")
        if self.kind != "homography" and not np.allclose(m[2], (0.0, 0.0, 1.0)):
            raise ValidationError(f"{self.kind} transform must have affine bottom row")
        if abs(np.linalg.det(m[:2, :2])) < 1e-12:
            raise ValidationError("upper-left 2x2 block is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Transform an (n, 2) array of points."""
        pts = np.asarray(xy, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        h = np.hstack([pts, ones]) @ self.matrix.T
        return h[:, :2] / h[:, 2:3]

    def inverse(self) -> "AlignTransform":
        return AlignTransform(self.kind, np.linalg.inv(self.matrix))


def interpolate_skeleton(frame: np.ndarray, topology: BoneTopology = BoneTopology()) -> SkeletonMap:
    """Sample each bone uniformly into samples_per_bone points.

    `frame` is a (17, 3) array of (x, y, c). A sampled point's confidence is
    the smaller endpoint confidence, floored at EPS_CONF. The t=0 and t=1
    samples reproduce the joint coordinates bit-exactly.
    """
    joints = np.asarray(frame, dtype=np.float64)
    if joints.shape != (17, 3):
        raise ValidationError(f"expected a (17, 3) joint array, got {joints.shape}")
    m = topology.samples_per_bone
    t = np.linspace(0.0, 1.0, m)[:, None]
    out = np.empty((topology.n_points, 3), dtype=np.float64)
    for i, (a, b) in enumerate(topology.edges):
        pa, pb = joints[a, :2], joints[b, :2]
        seg = (1.0 - t) * pa[None, :] + t * pb[None, :]
        seg[0] = pa
        seg[-1] = pb
        conf = max(min(joints[a, 2], joints[b, 2]), EPS_CONF)
        out[i * m:(i + 1) * m, :2] = seg
        out[i * m:(i + 1) * m, 2] = conf
    return SkeletonMap(out, topology, joints=joints)


def _check_same_topology(k_t: SkeletonMap, k_t1: SkeletonMap) -> None:
    if (k_t.topology.edges != k_t1.topology.edges
            or k_t.topology.samples_per_bone != k_t1.topology.samples_per_bone):
        raise TopologyMismatch("skeleton maps use different bone topologies")


def skeleton_offsets(k_t: SkeletonMap, k_t1: SkeletonMap) -> SkeletonOffsets:
    """Per-point offsets later-minus-earlier, confidences min of the pair."""
    _check_same_topology(k_t, k_t1)
    return SkeletonOffsets(
        k_t1.xy - k_t.xy,
        np.minimum(k_t.confidences, k_t1.confidences),
    )


def match_body_point(p, skeleton: SkeletonMap, mask: SubjectMask) -> int:
    """Index of the skeleton point minimizing ||p - q|| / max(c_q, EPS_CONF).

    `p` must lie on a subject; the skeleton is assumed pre-filtered to that
    subject. Ties break toward the lowest index.
    """
    x, y = float(p[0]), float(p[1])
    ix, iy = int(round(x)), int(round(y))
    if not (0 <= iy < mask.height and 0 <= ix < mask.width) or mask.labels[iy, ix] == 0:
        raise ValidationError(f"point ({x}, {y}) is not on a subject")
    pts = skeleton.xy
    if pts.shape[0] == 0:
        raise NoCandidates("subject has no skeleton points")
    d = np.hypot(pts[:, 0] - x, pts[:, 1] - y)
    score = d / np.maximum(skeleton.confidences, EPS_CONF)
    return int(np.argmin(score))


def _match_rows(rows, labels, xs, table, out):
    """Fill match indices for a band of rows; writes only its own slice."""
    for iy in rows:
        row_labels = labels[iy]
        for lab, (xy, conf, base) in table.items():
            cols = np.nonzero(row_labels == lab)[0]
            if cols.size == 0:
                continue
            dx = xy[:, 0][None, :] - xs[cols][:, None]
            dy = xy[:, 1][None, :] - float(iy)
            score = np.hypot(dx, dy) / conf[None, :]
            out[iy, cols] = base + np.argmin(score, axis=1)
    return None


def match_all(flow: FlowMap, skeletons: Mapping[int, SkeletonMap], mask: SubjectMask) -> np.ndarray:
    """Per-pixel skeleton match table.

    Returns an (h, w) int32 array of indices into the concatenation of
    `skeletons[label].points` in ascending label order; background pixels
    hold -1. Rows are processed in parallel bands but each band writes a
    disjoint slice, so the result is independent of the worker count.
    """
    validate_pairing(flow, mask)
    labels = mask.labels
    out = np.full((mask.height, mask.width), -1, dtype=np.int32)
    present = mask.subject_ids
    for lab in present:
        if lab not in skeletons:
            raise NoCandidates(f"no skeleton supplied for subject {lab}")
        if len(skeletons[lab].points) == 0:
            raise NoCandidates(f"subject {lab} has no skeleton points")

    table = {}
    base = 0
    for lab in sorted(skeletons):
        sk = skeletons[lab]
        table[lab] = (sk.xy, np.maximum(sk.confidences, EPS_CONF), base)
        base += sk.points.shape[0]

    xs = np.arange(mask.width, dtype=np.float64)
    rows = np.arange(mask.height)
    n_workers = min(worker_count(), mask.height)
    if n_workers <= 1:
        _match_rows(rows, labels, xs, table, out)
    else:
        bands = np.array_split(rows, n_workers)
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_match_rows, band, labels, xs, table, out)
                for band in bands if band.size
            ]
            for f in futures:
                f.result()
    return out


def concat_points(skeletons: Mapping[int, SkeletonMap]) -> np.ndarray:
    """Skeleton points concatenated in the same label order match_all uses."""
    return np.concatenate([skeletons[lab].points for lab in sorted(skeletons)], axis=0)


def concat_offsets(offsets: Mapping[int, SkeletonOffsets]) -> SkeletonOffsets:
    """Offsets concatenated in the same label order match_all uses."""
    labs = sorted(offsets)
    return SkeletonOffsets(
        np.concatenate([offsets[lab].vectors for lab in labs], axis=0),
        np.concatenate([offsets[lab].confidences for lab in labs], axis=0),
    )


def assign_subjects(frame: KeypointFrame, mask: SubjectMask) -> dict[int, int]:
    """Map each mask label to the person whose hip midpoint lies nearest.

    Returns {label: person_index}. Every subject present in the mask must
    win exactly one person.
    """
    ys, xs = np.nonzero(mask.labels)
    if ys.size == 0:
        return {}
    labels_flat = mask.labels[ys, xs]
    assignment: dict[int, int] = {}
    for pi, person in enumerate(frame.persons):
        hip_mid = 0.5 * (person[11, :2] + person[12, :2])
        d2 = (xs - hip_mid[0]) ** 2 + (ys - hip_mid[1]) ** 2
        lab = int(labels_flat[np.argmin(d2)])
        if lab in assignment:
            raise ValidationError(f"persons {assignment[lab]} and {pi} both map to subject {lab}")
        assignment[lab] = pi
    return assignment


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    d = np.hypot(pts[:, 0] - centroid[0], pts[:, 1] - centroid[1]).mean()
    if d < 1e-12:
        raise DegenerateConfiguration("points are coincident")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def _apply_h(matrix: np.ndarray, pts: np.ndarray) -> np.ndarray:
    h = np.hstack([pts, np.ones((pts.shape[0], 1))]) @ matrix.T
    return h[:, :2] / h[:, 2:3]


def _fit_similarity(src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted least-squares similarity (scale, rotation, translation) src -> dst."""
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateConfiguration("all weights vanish")
    wn = w / wsum
    mu_s = wn @ src
    mu_d = wn @ dst
    cs = src - mu_s
    cd = dst - mu_d
    var_s = float((wn * (cs ** 2).sum(axis=1)).sum())
    if var_s < 1e-12:
        raise DegenerateConfiguration("source points are coincident")
    cov = (cd * wn[:, None]).T @ cs
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    if sign == 0:
        sign = 1.0
    rot = u @ np.diag([1.0, sign]) @ vt
    scale = float(d[0] + sign * d[1]) / var_s
    if abs(scale) < 1e-12:
        raise DegenerateConfiguration("degenerate similarity scale")
    t = mu_d - scale * (rot @ mu_s)
    m = np.eye(3)
    m[:2, :2] = scale * rot
    m[:2, 2] = t
    return m


def _fit_homography(src: np.ndarray, dst: np.ndarray, w: np.ndarray):
    """Confidence-weighted normalized DLT; returns (matrix, condition)."""
    if src.shape[0] < 4:
        raise DegenerateConfiguration("homography needs at least 4 point pairs")
    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    sn = _apply_h(t_src, src)
    dn = _apply_h(t_dst, dst)
    sw = np.sqrt(w)
    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    xp, yp = dn[:, 0], dn[:, 1]
    a[0::2, 3] = -x * sw
    a[0::2, 4] = -y * sw
    a[0::2, 5] = -sw
    a[0::2, 6] = yp * x * sw
    a[0::2, 7] = yp * y * sw
    a[0::2, 8] = yp * sw
    a[1::2, 0] = x * sw
    a[1::2, 1] = y * sw
    a[1::2, 2] = sw
    a[1::2, 6] = -xp * x * sw
    a[1::2, 7] = -xp * y * sw
    a[1::2, 8] = -xp * sw
    _, s, vt = np.linalg.svd(a)
    cond = s[0] / max(s[-2], 1e-300)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(h[2, 2]) > 1e-12:
        h = h / h[2, 2]
    return h, cond


def fit_alignment(k_t: SkeletonMap, k_t1: SkeletonMap, method: str) -> AlignTransform:
    """Fit a transform mapping k_t1 coordinates onto k_t.

    Methods: "full_body_homography" (confidence-weighted normalized DLT over
    all skeleton points, similarity fallback on ill conditioning),
    "head_anchor_similarity" (weighted Procrustes over head joints 0..4),
    "translation" (confidence-weighted mean offset, negated).
    """
    _check_same_topology(k_t, k_t1)
    w = np.maximum(np.minimum(k_t.confidences, k_t1.confidences), EPS_CONF)
    src = k_t1.xy
    dst = k_t.xy

    if method == "translation":
        wn = w / w.sum()
        shift = wn @ (dst - src)
        m = np.eye(3)
        m[:2, 2] = shift
        return AlignTransform("translation", m)

    if method == "head_anchor_similarity":
        if k_t.joints is None or k_t1.joints is None:
            raise InsufficientHeadPoints("skeleton maps carry no source joints")
        idx = np.array(HEAD_JOINTS)
        c = np.minimum(k_t.joints[idx, 2], k_t1.joints[idx, 2])
        usable = c > EPS_CONF
        if usable.sum() < 2:
            raise InsufficientHeadPoints(
                f"need >= 2 head keypoints with confidence above {EPS_CONF}, got {int(usable.sum())}"
            )
        hs = k_t1.joints[idx[usable], :2]
        hd = k_t.joints[idx[usable], :2]
        m = _fit_similarity(hs, hd, c[usable])
        return AlignTransform("similarity", m)

    if method == "full_body_homography":
        h, cond = _fit_homography(src, dst, w)
        if cond > _DLT_CONDITION_LIMIT or abs(np.linalg.det(h)) < 1e-12:
            m = _fit_similarity(src, dst, w)
            return AlignTransform("similarity", m)
        return AlignTransform("homography", h)

    raise ValidationError(f"unknown alignment method {method!r}")


def aligned_offsets(k_t: SkeletonMap, k_t1: SkeletonMap, t: AlignTransform) -> SkeletonOffsets:
    """Offsets after mapping k_t1 into k_t's frame: apply(t, k_t1) - k_t."""
    _check_same_topology(k_t, k_t1)
    moved = t.apply(k_t1.xy)
    return SkeletonOffsets(
        moved - k_t.xy,
        np.minimum(k_t.confidences, k_t1.confidences),
    )
