"""Skeleton-guided kinematic constraint on flow fields.

The constraint combines an angular term (flow direction must stay within a
cone around the matched skeleton offset) and an intensity term (flow
magnitude must stay within a multiplicative band of the offset magnitude),
aggregated over matched pixels and normalized by the full pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EPS_VEC, FlowMap, Hyperparams, SubjectMask, validate_pairing
from .errors import DimensionMismatch, ValidationError
from .skeleton import SkeletonOffsets


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


@dataclass(frozen=True)
class ConstraintReport:
    """Aggregate value plus diagnostics of a constraint evaluation."""

    f_value: float
    angular_violation_fraction: float
    intensity_mean_penalty: float
    matched_pixels: int
    total_pixels: int
    f_matched_normalized: float
    per_pixel: np.ndarray | None = None

    def __post_init__(self):
        if self.f_value < 0:
            raise ValidationError("constraint value must be non-negative")
        for frac in (self.angular_violation_fraction,):
            if not 0.0 <= frac <= 1.0:
                raise ValidationError("violation fraction must lie in [0, 1]")


def angular_term(u, k, theta_a: float) -> float:
    """1 if the angle between u and k exceeds theta_a degrees, else 0.

    Both below EPS_VEC counts as jointly static (0); exactly one below
    EPS_VEC is motion without skeletal support, or vice versa (1).
    """
    if not 0 < theta_a < 90:
        raise ValidationError("theta_a must lie in (0, 90) degrees")
    u = np.asarray(u, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    ru = float(np.hypot(u[0], u[1]))
    rk = float(np.hypot(k[0], k[1]))
    if ru < EPS_VEC and rk < EPS_VEC:
        return 0.0
    if ru < EPS_VEC or rk < EPS_VEC:
        return 1.0
    cos = float(np.dot(u, k)) / (ru * rk)
    return 1.0 if cos < np.cos(np.deg2rad(theta_a)) else 0.0


def intensity_term(u, k, theta_il: float, theta_ih: float) -> float:
    """ReLU[(|u| - theta_il |k|)(|u| - theta_ih |k|)]; zero inside the band."""
    if not 0 < theta_il < theta_ih:
        raise ValidationError("need 0 < theta_il < theta_ih")
    u = np.asarray(u, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    ru = float(np.hypot(u[0], u[1]))
    rk = float(np.hypot(k[0], k[1]))
    return max((ru - theta_il * rk) * (ru - theta_ih * rk), 0.0)


def _gather(flow: FlowMap, offsets: SkeletonOffsets, matches: np.ndarray, mask: SubjectMask):
    validate_pairing(flow, mask)
    matches = np.asarray(matches)
    if matches.shape != (flow.height, flow.width):
        raise DimensionMismatch(
            f"match table shape {matches.shape} does not cover {flow.height}x{flow.width}"
        )
    valid = matches >= 0
    u = flow.vectors[valid]
    k = offsets.vectors[matches[valid]]
    return valid, u, k


def _terms(u: np.ndarray, k: np.ndarray, hp: Hyperparams):
    ru = np.hypot(u[:, 0], u[:, 1])
    rk = np.hypot(k[:, 0], k[:, 1])
    u_static = ru < EPS_VEC
    k_static = rk < EPS_VEC
    fa = np.zeros(len(u))
    one_static = u_static ^ k_static
    fa[one_static] = 1.0
    moving = ~(u_static | k_static)
    if moving.any():
        dot = (u[moving] * k[moving]).sum(axis=1)
        cos = dot / (ru[moving] * rk[moving])
        fa[moving] = (cos < np.cos(np.deg2rad(hp.theta_a))).astype(np.float64)
    fi = np.maximum((ru - hp.theta_il * rk) * (ru - hp.theta_ih * rk), 0.0)
    return fa, fi


def skeleton_constraint(
    flow: FlowMap,
    offsets: SkeletonOffsets,
    matches: np.ndarray,
    mask: SubjectMask,
    hp: Hyperparams,
    keep_per_pixel: bool = False,
) -> ConstraintReport:
    """Evaluate the hard constraint: mean over the raster of F_A + beta * F_I.

    Background (unmatched) pixels contribute zero; the normalizer is the
    total pixel count of the raster.
    """
    valid, u, k = _gather(flow, offsets, matches, mask)
    fa, fi = _terms(u, k, hp)
    total = flow.height * flow.width
    n = len(u)
    f = float((fa.sum() + hp.beta * fi.sum()) / total)
    per_pixel = None
    if keep_per_pixel:
        per_pixel = np.zeros((flow.height, flow.width, 2))
        per_pixel[valid, 0] = fa
        per_pixel[valid, 1] = fi
    return ConstraintReport(
        f_value=f,
        angular_violation_fraction=float(fa.mean()) if n else 0.0,
        intensity_mean_penalty=float(fi.mean()) if n else 0.0,
        matched_pixels=n,
        total_pixels=total,
        f_matched_normalized=float((fa.sum() + hp.beta * fi.sum()) / n) if n else 0.0,
        per_pixel=per_pixel,
    )


def smooth_skeleton_constraint(
    flow: FlowMap,
    offsets: SkeletonOffsets,
    matches: np.ndarray,
    mask: SubjectMask,
    hp: Hyperparams,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Differentiable surrogate of the constraint and its flow gradient.

    The angular indicator becomes sigmoid((angle(u, k) - theta_a) / tau) on
    a stabilized cosine, gated so that jointly static pairs contribute
    nothing; the surrogate approaches the hard term as tau -> 0. The
    intensity term is kept as-is (piecewise smooth, subgradient 0 at its
    kinks). Returns (value, (h, w, 2) gradient).
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    valid, u, k = _gather(flow, offsets, matches, mask)
    total = flow.height * flow.width
    grad = np.zeros((flow.height, flow.width, 2))
    if len(u) == 0:
        return 0.0, grad

    s = EPS_VEC + tau  # stabilizer; shrinks with tau so the hard terms are recovered
    s2 = s * s
    ru2 = (u ** 2).sum(axis=1)
    rk2 = (k ** 2).sum(axis=1)
    du = np.sqrt(ru2 + s2)
    dk = np.sqrt(rk2 + s2)
    dot = (u * k).sum(axis=1)
    cos = dot / (du * dk)
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    z = theta - np.deg2rad(hp.theta_a)
    sig = _sigmoid(z / tau)
    wu = ru2 / (ru2 + s2)
    wk = rk2 / (rk2 + s2)
    q = 1.0 - (1.0 - wu) * (1.0 - wk)
    ang = q * sig

    # d(ang)/du = dq * sig + q * dsig; dtheta/dcos = -1/sqrt(1 - cos^2)
    dcos_du = k / (du * dk)[:, None] - (dot / (du ** 3 * dk))[:, None] * u
    dtheta_dcos = -1.0 / np.sqrt(np.maximum(1.0 - cos ** 2, 1e-12))
    dsig_du = (sig * (1.0 - sig) / tau * dtheta_dcos)[:, None] * dcos_du
    dwu_du = 2.0 * u * (s2 / (ru2 + s2) ** 2)[:, None]
    dq_du = (1.0 - wk)[:, None] * dwu_du
    dang_du = dq_du * sig[:, None] + q[:, None] * dsig_du

    ru = np.sqrt(ru2)
    rk = np.sqrt(rk2)
    g = (ru - hp.theta_il * rk) * (ru - hp.theta_ih * rk)
    fi = np.maximum(g, 0.0)
    active = g > 0
    u_hat = np.zeros_like(u)
    nz = ru > 0
    u_hat[nz] = u[nz] / ru[nz, None]
    dfi_du = np.where(active[:, None], (2.0 * ru - (hp.theta_il + hp.theta_ih) * rk)[:, None] * u_hat, 0.0)

    value = float((ang.sum() + hp.beta * fi.sum()) / total)
    grad[valid] = (dang_du + hp.beta * dfi_du) / total
    return value, grad
