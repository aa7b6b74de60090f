"""Joint objective, variational world-flow solver, and world/local decomposition.

The objective couples the kinematic skeleton constraint with the multiscale
boundary constraint. The solver runs backtracking gradient descent on the
smooth surrogates plus a discrete smoothness regularizer, annealing the
surrogate sharpness across phases so the hard terms are recovered in the
limit. Decomposition splits world flow into per-subject motion and the
residual local flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import boundary as bnd
from . import kinematics as kin
from . import skeleton as skel
from .core import FlowMap, Hyperparams, KeypointFrame, PointSet, SubjectMask, Vec2, validate_pairing
from .errors import DimensionMismatch, EmptySubject, ValidationError


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Joint objective split into its skeleton and boundary parts."""

    total: float
    f: float
    g: float
    alpha: float
    f_report: kin.ConstraintReport | None = None
    g_result: bnd.BoundaryResult | None = None


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 500
    step_size: float = 1.0
    tau_schedule: tuple = (0.5, 0.1, 0.02)
    smoothness_weight: float = 0.05
    background_weight: float = 0.05
    tolerance: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.step_size <= 0:
            raise ValidationError("step_size must be positive")
        if self.tolerance <= 0:
            raise ValidationError("tolerance must be positive")
        schedule = tuple(float(t) for t in self.tau_schedule)
        if not schedule or any(t <= 0 for t in schedule):
            raise ValidationError("tau_schedule must be nonempty and positive")
        object.__setattr__(self, "tau_schedule", schedule)


@dataclass(frozen=True)
class Priors:
    """Everything the objective needs besides the flow itself."""

    matches: np.ndarray
    offsets: skel.SkeletonOffsets
    boundary: PointSet
    mask: SubjectMask

    @classmethod
    def build(
        cls,
        frame_t: KeypointFrame,
        frame_t1: KeypointFrame,
        mask: SubjectMask,
        boundary: PointSet,
        topology: skel.BoneTopology = skel.BoneTopology(),
        align_method: str | None = None,
    ) -> "Priors":
        """Assemble per-subject skeletons, matches, and offsets.

        With align_method set, offsets are expressed in the subject frame
        (the later skeleton is aligned onto the earlier one first), which
        yields the subject-relative constraint used for local flow.
        """
        if len(frame_t) != len(frame_t1):
            raise ValidationError("keypoint frames list different person counts")
        assignment = skel.assign_subjects(frame_t, mask)
        maps_t: dict[int, skel.SkeletonMap] = {}
        offsets_by_label: dict[int, skel.SkeletonOffsets] = {}
        for label in mask.subject_ids:
            if label not in assignment:
                raise ValidationError(f"no person assigned to subject {label}")
            person = assignment[label]
            k_t = skel.interpolate_skeleton(frame_t.persons[person], topology)
            k_t1 = skel.interpolate_skeleton(frame_t1.persons[person], topology)
            maps_t[label] = k_t
            if align_method is None:
                offsets_by_label[label] = skel.skeleton_offsets(k_t, k_t1)
            else:
                transform = skel.fit_alignment(k_t, k_t1, align_method)
                offsets_by_label[label] = skel.aligned_offsets(k_t, k_t1, transform)
        h, w = mask.height, mask.width
        matches = skel.match_all(FlowMap.zeros(w, h), maps_t, mask)
        return cls(matches, skel.concat_offsets(offsets_by_label), boundary, mask)


def joint_objective(flow: FlowMap, priors: Priors, hp: Hyperparams) -> ObjectiveBreakdown:
    """Hard objective: skeleton constraint plus alpha times boundary constraint."""
    validate_pairing(flow, priors.mask)
    f_rep = kin.skeleton_constraint(flow, priors.offsets, priors.matches, priors.mask, hp)
    g_res = bnd.boundary_constraint(flow, priors.boundary, hp)
    total = f_rep.f_value + hp.alpha * g_res.value
    return ObjectiveBreakdown(total, f_rep.f_value, g_res.value, hp.alpha, f_rep, g_res)


def local_constraint_objective(local: FlowMap, priors: Priors, hp: Hyperparams) -> ObjectiveBreakdown:
    """Subject-relative objective; priors must carry aligned offsets."""
    return joint_objective(local, priors, hp)


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    tau: float
    step: float
    surrogate: float
    hard: ObjectiveBreakdown


@dataclass(frozen=True)
class SolveResult:
    flow: FlowMap
    trace: tuple
    converged: bool


def _smoothness(arr: np.ndarray, labels: np.ndarray):
    """Mean squared forward difference of the field and its gradient.

    Differences across region boundaries (label changes) are excluded:
    motion is expected to be discontinuous at the silhouette, and smoothing
    across it would drag subject flow toward the static background.
    """
    h, w = arr.shape[:2]
    grad = np.zeros_like(arr)
    same_x = (labels[:, 1:] == labels[:, :-1])[..., None]
    same_y = (labels[1:, :] == labels[:-1, :])[..., None]
    dx = (arr[:, 1:, :] - arr[:, :-1, :]) * same_x
    dy = (arr[1:, :, :] - arr[:-1, :, :]) * same_y
    value = float((dx ** 2).sum() + (dy ** 2).sum()) / (h * w)
    grad[:, 1:, :] += 2.0 * dx
    grad[:, :-1, :] -= 2.0 * dx
    grad[1:, :, :] += 2.0 * dy
    grad[:-1, :, :] -= 2.0 * dy
    return value, grad / (h * w)


def _surrogate(arr: np.ndarray, priors: Priors, hp: Hyperparams, opts: SolverOptions, tau: float):
    flow = FlowMap(arr)
    f_val, f_grad = kin.smooth_skeleton_constraint(
        flow, priors.offsets, priors.matches, priors.mask, hp, tau
    )
    g_val, g_grad = bnd.soft_boundary_constraint(flow, priors.boundary, hp, tau)
    s_val, s_grad = _smoothness(arr, priors.mask.labels)
    h, w = arr.shape[:2]
    background = (priors.mask.labels == 0)[..., None]
    b_val = float((arr ** 2 * background).sum()) / (h * w)
    b_grad = 2.0 * arr * background / (h * w)
    value = f_val + hp.alpha * g_val + opts.smoothness_weight * s_val + opts.background_weight * b_val
    grad = f_grad + hp.alpha * g_grad + opts.smoothness_weight * s_grad + opts.background_weight * b_grad
    return value, grad


def solve_world_flow(
    init: FlowMap,
    priors: Priors,
    hp: Hyperparams,
    opts: SolverOptions = SolverOptions(),
) -> SolveResult:
    """Minimize the smooth surrogate objective by backtracking gradient descent.

    The tau schedule splits the iteration budget into phases of decreasing
    surrogate sharpness. Accepted steps never increase the surrogate within
    a phase. The trace records the hard objective at every accepted step.
    Deterministic: same inputs and options give bitwise-identical output.
    """
    validate_pairing(init, priors.mask)
    x = init.vectors.copy()
    trace: list[TraceEntry] = []
    iters_per_phase = -(-opts.max_iters // len(opts.tau_schedule))
    iteration = 0
    converged = False

    for tau in opts.tau_schedule:
        value, grad = _surrogate(x, priors, hp, opts, tau)
        gmax = float(np.abs(grad).max())
        eta = opts.step_size / gmax if gmax > 0 else opts.step_size
        phase_converged = False
        for _ in range(iters_per_phase):
            if iteration >= opts.max_iters:
                break
            gnorm2 = float((grad ** 2).sum())
            if gnorm2 == 0.0:
                phase_converged = True
                break
            step = eta
            accepted = False
            for _ in range(40):
                cand = x - step * grad
                v_new, g_new = _surrogate(cand, priors, hp, opts, tau)
                if v_new <= value - 1e-4 * step * gnorm2:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                phase_converged = True
                break
            delta = float(np.abs(cand - x).max())
            x, value, grad = cand, v_new, g_new
            iteration += 1
            trace.append(TraceEntry(
                iteration=iteration,
                tau=tau,
                step=step,
                surrogate=value,
                hard=joint_objective(FlowMap(x), priors, hp),
            ))
            eta = step * 2.0
            if delta < opts.tolerance:
                phase_converged = True
                break
        converged = phase_converged
    return SolveResult(FlowMap(x), tuple(trace), converged)


@dataclass(frozen=True)
class SubjectMotion:
    """Overall motion of one subject: a single trend vector or a dense field."""

    label: int
    method: str
    vector: Vec2 | None = None
    transform: skel.AlignTransform | None = None


def estimate_subject_motion(
    flow: FlowMap,
    mask: SubjectMask,
    skeletons_t: Mapping[int, skel.SkeletonMap] | None = None,
    skeletons_t1: Mapping[int, skel.SkeletonMap] | None = None,
    method: str = "mask_mean",
    align: str = "full_body_homography",
) -> dict[int, SubjectMotion]:
    """Estimate each subject's overall motion trend from the world flow.

    "mask_mean" averages the flow over the subject's pixels into a single
    vector. "alignment_field" fits a skeleton alignment transform and turns
    its inverse into a dense displacement field evaluated per pixel.
    """
    validate_pairing(flow, mask)
    out: dict[int, SubjectMotion] = {}
    if not mask.subject_ids:
        raise EmptySubject("mask contains no subjects")
    for label in mask.subject_ids:
        sel = mask.labels == label
        if not sel.any():
            raise EmptySubject(f"subject {label} has no pixels")
        if method == "mask_mean":
            mean = flow.vectors[sel].mean(axis=0)
            out[label] = SubjectMotion(label, method, vector=Vec2(mean[0], mean[1]))
        elif method == "alignment_field":
            if skeletons_t is None or skeletons_t1 is None:
                raise ValidationError("alignment_field needs skeleton maps for both frames")
            t = skel.fit_alignment(skeletons_t[label], skeletons_t1[label], align)
            out[label] = SubjectMotion(label, method, transform=t)
        else:
            raise ValidationError(f"unknown subject motion method {method!r}")
    return out


def subject_motion_field(motions: Mapping[int, SubjectMotion], mask: SubjectMask) -> np.ndarray:
    """Dense per-pixel subject motion; zero on background.

    For alignment-based motions the field at pixel x is T^-1(x) - x: the
    displacement the fitted inter-frame transform induces at that pixel.
    """
    field = np.zeros((mask.height, mask.width, 2))
    for label, motion in motions.items():
        sel = mask.labels == label
        if motion.vector is not None:
            field[sel] = motion.vector.as_array()
        elif motion.transform is not None:
            ys, xs = np.nonzero(sel)
            pts = np.stack([xs, ys], axis=1).astype(np.float64)
            moved = motion.transform.inverse().apply(pts)
            field[ys, xs] = moved - pts
        else:
            raise ValidationError(f"subject {label} motion carries neither vector nor transform")
    return field


@dataclass(frozen=True)
class Decomposition:
    """World flow split into subject motion and residual local flow.

    `subject` stores the exact residual world - local, so the
    reconstruction world == local + subject holds bitwise on every pixel.
    """

    world: FlowMap
    subject: FlowMap
    local: FlowMap
    motions: dict


def decompose_local(world: FlowMap, v_s, mask: SubjectMask) -> Decomposition:
    """Split world flow into subject motion and local flow.

    `v_s` is either a {label: SubjectMotion} mapping or a dense (h, w, 2)
    field. Background keeps local == world (subject motion zero there).
    """
    validate_pairing(world, mask)
    if isinstance(v_s, np.ndarray):
        field = v_s
        motions: dict[int, SubjectMotion] = {}
    else:
        motions = dict(v_s)
        field = subject_motion_field(motions, mask)
    if field.shape != world.vectors.shape:
        raise DimensionMismatch(
            f"subject field shape {field.shape} does not match flow {world.vectors.shape}"
        )
    local = world.vectors - field
    exact_subject = world.vectors - local
    return Decomposition(
        world=world,
        subject=FlowMap(exact_subject),
        local=FlowMap(local),
        motions=motions,
    )


def endpoint_error(pred: FlowMap, gt: FlowMap, mask: SubjectMask | None = None) -> tuple[float, float]:
    """Mean and max Euclidean error between two flows, optionally masked."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise DimensionMismatch(
            f"flows differ in size: {pred.width}x{pred.height} vs {gt.width}x{gt.height}"
        )
    diff = pred.vectors - gt.vectors
    err = np.hypot(diff[..., 0], diff[..., 1])
    if mask is not None:
        validate_pairing(pred, mask)
        err = err[mask.labels > 0]
        if err.size == 0:
            raise EmptySubject("mask selects no pixels")
    return float(err.mean()), float(err.max())
