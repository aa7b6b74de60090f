"""Flow-edge extraction, Chamfer distances, and the multiscale boundary constraint.

Edges of a flow field are pixels whose displacement differs from some
8-neighbor in magnitude (intensity edges) or direction (angular edges).
The boundary constraint measures how far those edges sit from a reference
boundary curve, using a per-patch centroid distance that approximates the
Chamfer distance when points are smoothly distributed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import EPS_VEC, FlowMap, Hyperparams, PointSet
from .errors import EmptyPointSet, ValidationError

# 8-neighborhood offsets as (dy, dx).
_NEIGHBORS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


@dataclass(frozen=True)
class EdgeMap:
    intensity_edges: PointSet
    angular_edges: PointSet
    union: PointSet


@dataclass(frozen=True)
class PatchGrid:
    """Per-cell point counts and centroids for two curves on a tiled raster."""

    scale: int
    width: int
    height: int
    counts_s: np.ndarray
    centroids_s: np.ndarray
    counts_e: np.ndarray
    centroids_e: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.counts_s.shape

    @property
    def total_cells(self) -> int:
        return int(self.counts_s.size)


@dataclass(frozen=True)
class PatchDistanceResult:
    value: float
    cooccupied_cells: int
    total_cells: int

    @property
    def cooccupied_fraction(self) -> float:
        return self.cooccupied_cells / self.total_cells if self.total_cells else 0.0


@dataclass(frozen=True)
class BoundaryResult:
    """Multiscale boundary constraint value plus per-scale diagnostics."""

    value: float
    per_scale: tuple
    cooccupied_fraction: tuple
    edges_empty: bool = False


def _neighbor_views(arr: np.ndarray, fill: float) -> list[np.ndarray]:
    """For each 8-neighbor offset, the neighbor's value at every pixel."""
    h, w = arr.shape[:2]
    pad_shape = (h + 2, w + 2) + arr.shape[2:]
    padded = np.full(pad_shape, fill, dtype=arr.dtype)
    padded[1:h + 1, 1:w + 1] = arr
    return [padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _NEIGHBORS]


def extract_flow_edges(flow: FlowMap, hp: Hyperparams) -> EdgeMap:
    """Detect intensity and angular discontinuities against 8-neighbors.

    A pixel is an intensity edge when some neighbor differs in displacement
    norm by at least hp.edge_theta_i; an angular edge when some neighbor
    (both displacements non-static) differs in direction by at least
    hp.edge_theta_a degrees.
    """
    m = flow.vectors
    h, w = m.shape[:2]
    r = np.hypot(m[..., 0], m[..., 1])
    r_pad = _neighbor_views(r, np.nan)
    m_pad = _neighbor_views(m, np.nan)

    intensity = np.zeros((h, w), dtype=bool)
    angular = np.zeros((h, w), dtype=bool)
    cos_lim = np.cos(np.deg2rad(hp.edge_theta_a))
    moving = r >= EPS_VEC
    for rj, mj in zip(r_pad, m_pad):
        valid = ~np.isnan(rj)
        diff = np.abs(r - rj)
        intensity |= valid & (diff >= hp.edge_theta_i)
        both = valid & moving & (rj >= EPS_VEC)
        if both.any():
            dot = (m * mj).sum(axis=-1)
            with np.errstate(invalid="ignore"):
                cos = dot / (r * rj)
            angular |= both & (cos <= cos_lim)

    def to_points(mask2d: np.ndarray) -> PointSet:
        ys, xs = np.nonzero(mask2d)
        return PointSet(np.stack([xs, ys], axis=1).astype(np.float64))

    return EdgeMap(
        intensity_edges=to_points(intensity),
        angular_edges=to_points(angular),
        union=to_points(intensity | angular),
    )


def auto_intensity_threshold(flow: FlowMap, percentile: float = 90.0) -> float:
    """Adaptive intensity-edge threshold: percentile of neighbor norm differences."""
    m = flow.vectors
    r = np.hypot(m[..., 0], m[..., 1])
    diffs = []
    for rj in _neighbor_views(r, np.nan):
        d = np.abs(r - rj)
        diffs.append(d[~np.isnan(d)])
    alldiff = np.concatenate(diffs) if diffs else np.zeros(1)
    if alldiff.size == 0:
        return EPS_VEC
    return float(max(np.percentile(alldiff, percentile), EPS_VEC))


def exact_chamfer(s: PointSet, e: PointSet) -> float:
    """Mean nearest-neighbor distance from each point of s to the set e."""
    if len(s) == 0 or len(e) == 0:
        raise EmptyPointSet("exact_chamfer requires two nonempty point sets")
    tree = cKDTree(e.points)
    d, _ = tree.query(s.points)
    return float(np.mean(d))


def _cell_ids(points: np.ndarray, scale: int, gw: int) -> np.ndarray:
    cx = np.floor(points[:, 0] / scale).astype(np.int64)
    cy = np.floor(points[:, 1] / scale).astype(np.int64)
    return cy * gw + cx


def _bin_points(points: np.ndarray, scale: int, gh: int, gw: int):
    n_cells = gh * gw
    counts = np.zeros(n_cells, dtype=np.int64)
    centroids = np.full((n_cells, 2), np.nan)
    if points.shape[0]:
        ids = _cell_ids(points, scale, gw)
        counts = np.bincount(ids, minlength=n_cells)
        sx = np.bincount(ids, weights=points[:, 0], minlength=n_cells)
        sy = np.bincount(ids, weights=points[:, 1], minlength=n_cells)
        occ = counts > 0
        centroids[occ, 0] = sx[occ] / counts[occ]
        centroids[occ, 1] = sy[occ] / counts[occ]
    return counts.reshape(gh, gw), centroids.reshape(gh, gw, 2)


def build_patch_grid(s: PointSet, e: PointSet, scale: int, width: int, height: int) -> PatchGrid:
    """Tile the raster into scale-sized cells and bin both curves into them."""
    if scale < 2:
        raise ValidationError("patch scale must be >= 2")
    if width < 1 or height < 1:
        raise ValidationError("raster dimensions must be positive")
    for name, ps in (("s", s), ("e", e)):
        pts = ps.points
        if pts.shape[0] and (
            (pts[:, 0] < 0).any() or (pts[:, 0] >= width).any()
            or (pts[:, 1] < 0).any() or (pts[:, 1] >= height).any()
        ):
            raise ValidationError(f"curve {name} has points outside the {width}x{height} raster")
    gw = -(-width // scale)
    gh = -(-height // scale)
    counts_s, centroids_s = _bin_points(s.points, scale, gh, gw)
    counts_e, centroids_e = _bin_points(e.points, scale, gh, gw)
    for arr in (counts_s, centroids_s, counts_e, centroids_e):
        arr.setflags(write=False)
    return PatchGrid(scale, width, height, counts_s, centroids_s, counts_e, centroids_e)


def patch_centroid_distance(grid: PatchGrid) -> PatchDistanceResult:
    """Mean centroid-to-centroid distance over cells occupied by both curves."""
    both = (grid.counts_s > 0) & (grid.counts_e > 0)
    n = int(both.sum())
    if n == 0:
        return PatchDistanceResult(0.0, 0, grid.total_cells)
    d = grid.centroids_s[both] - grid.centroids_e[both]
    return PatchDistanceResult(float(np.hypot(d[:, 0], d[:, 1]).mean()), n, grid.total_cells)


def multiscale_patch_distance(
    s: PointSet,
    e: PointSet,
    scales,
    width: int,
    height: int,
    normalize: str = "cooccupied",
) -> BoundaryResult:
    """Average the per-scale patch-centroid distances.

    normalize="cooccupied" divides each scale's sum by the number of cells
    where both curves are present; "all" divides by the total cell count.
    """
    if normalize not in ("cooccupied", "all"):
        raise ValidationError(f"unknown normalization {normalize!r}")
    per_scale = []
    fractions = []
    for scale in scales:
        grid = build_patch_grid(s, e, int(scale), width, height)
        res = patch_centroid_distance(grid)
        if normalize == "all" and res.cooccupied_cells:
            res = PatchDistanceResult(
                res.value * res.cooccupied_cells / res.total_cells,
                res.cooccupied_cells,
                res.total_cells,
            )
        per_scale.append(res)
        fractions.append(res.cooccupied_fraction)
    value = float(np.mean([r.value for r in per_scale])) if per_scale else 0.0
    return BoundaryResult(value, tuple(per_scale), tuple(fractions))


def boundary_constraint(
    flow: FlowMap,
    boundary: PointSet,
    hp: Hyperparams,
    normalize: str = "cooccupied",
) -> BoundaryResult:
    """Extract flow edges and score them against the boundary curve.

    Returns value 0 with edges_empty set when the flow has no edges at all.
    """
    if len(boundary) == 0:
        raise EmptyPointSet("boundary curve is empty")
    edges = extract_flow_edges(flow, hp)
    if len(edges.union) == 0:
        return BoundaryResult(0.0, (), (), edges_empty=True)
    return multiscale_patch_distance(
        edges.union, boundary, hp.scales, flow.width, flow.height, normalize=normalize
    )


# ---------------------------------------------------------------------------
# Soft relaxation: per-pixel edge weights instead of a hard edge set, with an
# analytic gradient for the variational solver.
# ---------------------------------------------------------------------------

_MASS_FLOOR = 0.5  # cells with less soft edge mass than this are skipped


def _soft_edge_weights(m: np.ndarray, hp: Hyperparams, tau: float):
    """Forward pass of the soft edge detector.

    Returns (w, cache) where w is the per-pixel edge weight in [0, 1] and
    cache holds the intermediates the backward pass needs.
    """
    h, wd = m.shape[:2]
    r = np.hypot(m[..., 0], m[..., 1])
    s = EPS_VEC + tau
    s2 = s * s
    du = np.sqrt(r * r + s2)
    wu = (r * r) / (r * r + s2)
    theta_lim = np.deg2rad(hp.edge_theta_a)

    r_nb = _neighbor_views(r, np.nan)
    m_nb = _neighbor_views(m, np.nan)
    du_nb = _neighbor_views(du, np.nan)
    wu_nb = _neighbor_views(wu, np.nan)

    b_stack = np.full((8, h, wd), -np.inf)
    a_stack = np.full((8, h, wd), -np.inf)
    sign_stack = np.zeros((8, h, wd))
    siga_stack = np.zeros((8, h, wd))
    g_stack = np.zeros((8, h, wd))
    cosfac_stack = np.zeros((8, h, wd))

    for n in range(8):
        rj, mj, duj, wuj = r_nb[n], m_nb[n], du_nb[n], wu_nb[n]
        valid = ~np.isnan(rj)
        diff = np.where(valid, np.abs(r - rj), 0.0)
        b = _sigmoid((diff - hp.edge_theta_i) / tau)
        b_stack[n] = np.where(valid, b, -np.inf)
        sign_stack[n] = np.where(valid, np.sign(r - rj), 0.0)

        dot = np.where(valid, (m * np.nan_to_num(mj)).sum(axis=-1), 0.0)
        denom = np.where(valid, du * np.nan_to_num(duj, nan=1.0), 1.0)
        cos = dot / denom
        theta = np.arccos(np.clip(cos, -1.0, 1.0))
        siga = _sigmoid((theta - theta_lim) / tau)
        g = np.where(valid, wu * np.nan_to_num(wuj), 0.0)
        a_stack[n] = np.where(valid, g * siga, -np.inf)
        siga_stack[n] = siga
        g_stack[n] = g
        # d(siga)/d(cos) = siga' / tau * dtheta/dcos (negative)
        dtheta_dcos = -1.0 / np.sqrt(np.maximum(1.0 - cos ** 2, 1e-12))
        cosfac_stack[n] = np.where(valid, siga * (1.0 - siga) / tau * dtheta_dcos, 0.0)

    ni = np.argmax(b_stack, axis=0)
    na = np.argmax(a_stack, axis=0)
    wi = np.take_along_axis(b_stack, ni[None], axis=0)[0]
    wa = np.take_along_axis(a_stack, na[None], axis=0)[0]
    wi = np.where(np.isfinite(wi), wi, 0.0)
    wa = np.where(np.isfinite(wa), wa, 0.0)
    w = 1.0 - (1.0 - wi) * (1.0 - wa)

    cache = dict(
        r=r, s2=s2, du=du, wu=wu, ni=ni, na=na, wi=wi, wa=wa,
        b_stack=b_stack, a_stack=a_stack, sign_stack=sign_stack,
        siga_stack=siga_stack, g_stack=g_stack, cosfac_stack=cosfac_stack,
    )
    return w, cache


def _soft_cell_value(w: np.ndarray, e_counts, e_centroids, scale: int, width: int, height: int):
    """Soft patch-centroid distance at one scale and its d(value)/d(w) field."""
    h, wd = w.shape
    gw = -(-width // scale)
    gh = -(-height // scale)
    ys, xs = np.mgrid[0:h, 0:wd]
    cid = (ys // scale) * gw + (xs // scale)
    cid_flat = cid.ravel()
    n_cells = gh * gw
    m_c = np.bincount(cid_flat, weights=w.ravel(), minlength=n_cells)
    sx_c = np.bincount(cid_flat, weights=(w * xs).ravel(), minlength=n_cells)
    sy_c = np.bincount(cid_flat, weights=(w * ys).ravel(), minlength=n_cells)

    e_c = e_counts.ravel()
    ce = e_centroids.reshape(-1, 2)
    include = (m_c > _MASS_FLOOR) & (e_c > 0)
    n_inc = int(include.sum())
    dvdw = np.zeros((h, wd))
    if n_inc == 0:
        return 0.0, dvdw

    cx = np.zeros(n_cells)
    cy = np.zeros(n_cells)
    cx[include] = sx_c[include] / m_c[include]
    cy[include] = sy_c[include] / m_c[include]
    ex = np.where(include, cx - np.nan_to_num(ce[:, 0]), 0.0)
    ey = np.where(include, cy - np.nan_to_num(ce[:, 1]), 0.0)
    d = np.hypot(ex, ey)
    value = float(d[include].mean())

    # d(d_c)/d(w_i) = ((x_i - cx) ex + (y_i - cy) ey) / (d m), mean over cells
    safe_d = np.where(d > 1e-12, d, 1.0)
    coeff = np.where(include & (d > 1e-12), 1.0 / (n_inc * safe_d * np.where(include, m_c, 1.0)), 0.0)
    dvdw = (
        coeff[cid] * ((xs - cx[cid]) * ex[cid] + (ys - cy[cid]) * ey[cid])
    )
    return value, dvdw


def soft_boundary_constraint(
    flow: FlowMap,
    boundary: PointSet,
    hp: Hyperparams,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Differentiable relaxation of the boundary constraint.

    Edge membership becomes a per-pixel sigmoid weight on the neighbor
    discontinuities (the two measures are combined by a smooth union), cell
    centroids become weight-weighted means, and the returned gradient is
    analytic in every flow vector.
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    if len(boundary) == 0:
        raise EmptyPointSet("boundary curve is empty")
    m = flow.vectors
    h, wd = m.shape[:2]
    grad = np.zeros((h, wd, 2))
    if h * wd == 1:
        return 0.0, grad

    w, cache = _soft_edge_weights(m, hp, tau)

    dvdw_total = np.zeros((h, wd))
    value = 0.0
    scales = hp.scales
    for scale in scales:
        grid = build_patch_grid(PointSet(np.zeros((0, 2))), boundary, int(scale), wd, h)
        v_s, dvdw = _soft_cell_value(w, grid.counts_e, grid.centroids_e, int(scale), wd, h)
        value += v_s / len(scales)
        dvdw_total += dvdw / len(scales)

    # Backward through w = 1 - (1 - wi)(1 - wa) and the neighbor sigmoids.
    r = cache["r"]
    s2 = cache["s2"]
    du = cache["du"]
    wu = cache["wu"]
    wi, wa = cache["wi"], cache["wa"]
    ni, na = cache["ni"], cache["na"]
    b_stack = cache["b_stack"]
    a_stack = cache["a_stack"]
    sign_stack = cache["sign_stack"]
    siga_stack = cache["siga_stack"]
    g_stack = cache["g_stack"]
    cosfac_stack = cache["cosfac_stack"]

    grad_r = np.zeros((h, wd))
    dwdwi = dvdw_total * (1.0 - wa)
    dwdwa = dvdw_total * (1.0 - wi)
    ys, xs = np.mgrid[0:h, 0:wd]
    dwu_dr = 2.0 * r * s2 / (r * r + s2) ** 2

    for n, (dy, dx) in enumerate(_NEIGHBORS):
        jy, jx = ys + dy, xs + dx
        inb = (jy >= 0) & (jy < h) & (jx >= 0) & (jx < wd)

        # intensity path through the argmax neighbor
        sel = (ni == n) & inb & np.isfinite(b_stack[n])
        if sel.any():
            b = b_stack[n][sel]
            common = dwdwi[sel] * b * (1.0 - b) / tau * sign_stack[n][sel]
            np.add.at(grad_r, (ys[sel], xs[sel]), common)
            np.add.at(grad_r, (jy[sel], jx[sel]), -common)

        # angular path through the argmax neighbor
        sel = (na == n) & inb & np.isfinite(a_stack[n]) & (g_stack[n] > 0)
        if sel.any():
            iy_s, ix_s = ys[sel], xs[sel]
            jy_s, jx_s = jy[sel], jx[sel]
            mi = m[iy_s, ix_s]
            mj = m[jy_s, jx_s]
            dui = du[iy_s, ix_s]
            duj = du[jy_s, jx_s]
            wui = wu[iy_s, ix_s]
            wuj = wu[jy_s, jx_s]
            siga = siga_stack[n][sel]
            g = g_stack[n][sel]
            cosfac = cosfac_stack[n][sel]
            common = dwdwa[sel]

            np.add.at(grad_r, (iy_s, ix_s), common * siga * wuj * dwu_dr[iy_s, ix_s])
            np.add.at(grad_r, (jy_s, jx_s), common * siga * wui * dwu_dr[jy_s, jx_s])

            dot = (mi * mj).sum(axis=1)
            factor = common * g * cosfac
            dcos_di = mj / (dui * duj)[:, None] - (dot / (dui ** 3 * duj))[:, None] * mi
            dcos_dj = mi / (dui * duj)[:, None] - (dot / (duj ** 3 * dui))[:, None] * mj
            np.add.at(grad, (iy_s, ix_s), factor[:, None] * dcos_di)
            np.add.at(grad, (jy_s, jx_s), factor[:, None] * dcos_dj)

    safe_r = np.where(r > 0, r, 1.0)
    grad += (grad_r / safe_r)[..., None] * m
    return value, grad


# ---------------------------------------------------------------------------
# Curve morphing driven purely by the patch-centroid distance.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MorphOptions:
    grid_shape: tuple = (10, 10)
    scales: tuple = (4, 8, 16, 32)
    max_iters: int = 400
    step_size: float = 4.0
    tolerance: float = 1e-4
    width: int | None = None
    height: int | None = None


@dataclass(frozen=True)
class MorphResult:
    displacement: np.ndarray
    moved: PointSet
    objective_trace: tuple
    converged: bool


def _bilinear_weights(points: np.ndarray, gh: int, gw: int, width: int, height: int):
    """Control-grid corner indices and weights for each point."""
    fx = points[:, 0] / max(width - 1, 1) * (gw - 1)
    fy = points[:, 1] / max(height - 1, 1) * (gh - 1)
    fx = np.clip(fx, 0.0, gw - 1 - 1e-9)
    fy = np.clip(fy, 0.0, gh - 1 - 1e-9)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    tx = fx - x0
    ty = fy - y0
    corners = np.stack([
        y0 * gw + x0,
        y0 * gw + (x0 + 1),
        (y0 + 1) * gw + x0,
        (y0 + 1) * gw + (x0 + 1),
    ], axis=1)
    weights = np.stack([
        (1 - tx) * (1 - ty),
        tx * (1 - ty),
        (1 - tx) * ty,
        tx * ty,
    ], axis=1)
    return corners, weights


_MORPH_MASS_FLOOR = 0.25


def _soft_bin(points: np.ndarray, scale: int, gw: int, gh: int):
    """Bilinear assignment of points to the 2x2 nearest cells of a tiling.

    Returns (cells, weights, dwdx, dwdy), each (n, 4); entries for cells
    outside the grid carry zero weight and point at cell 0.
    """
    u = points[:, 0] / scale - 0.5
    v = points[:, 1] / scale - 0.5
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    tx = u - i0
    ty = v - j0
    inv = 1.0 / scale
    cells = []
    weights = []
    dwdx = []
    dwdy = []
    for di, dj in ((0, 0), (1, 0), (0, 1), (1, 1)):
        ci = i0 + di
        cj = j0 + dj
        wx = tx if di else 1.0 - tx
        wy = ty if dj else 1.0 - ty
        gx = inv if di else -inv
        gy = inv if dj else -inv
        ok = (ci >= 0) & (ci < gw) & (cj >= 0) & (cj < gh)
        cells.append(np.where(ok, cj * gw + ci, 0))
        weights.append(np.where(ok, wx * wy, 0.0))
        dwdx.append(np.where(ok, gx * wy, 0.0))
        dwdy.append(np.where(ok, wx * gy, 0.0))
    return (np.stack(cells, axis=1), np.stack(weights, axis=1),
            np.stack(dwdx, axis=1), np.stack(dwdy, axis=1))


def _morph_loss_and_grad(moved: np.ndarray, target_grids, scales, width, height):
    """Multiscale patch-centroid distance of moved vs target with soft cell
    assignment; returns the loss and its gradient on the moved points."""
    n_pts = moved.shape[0]
    grad = np.zeros((n_pts, 2))
    value = 0.0
    for scale, (me, ce_x, ce_y, gw, gh) in zip(scales, target_grids):
        cells, w, dwdx, dwdy = _soft_bin(moved, int(scale), gw, gh)
        n_cells = gh * gw
        flat = cells.ravel()
        m = np.bincount(flat, weights=w.ravel(), minlength=n_cells)
        sx = np.bincount(flat, weights=(w * moved[:, 0:1]).ravel(), minlength=n_cells)
        sy = np.bincount(flat, weights=(w * moved[:, 1:2]).ravel(), minlength=n_cells)
        include = (m > _MORPH_MASS_FLOOR) & (me > _MORPH_MASS_FLOOR)
        n_inc = int(include.sum())
        if n_inc == 0:
            continue
        safe_m = np.where(include, m, 1.0)
        cmx = np.where(include, sx / safe_m, 0.0)
        cmy = np.where(include, sy / safe_m, 0.0)
        ex = np.where(include, cmx - ce_x, 0.0)
        ey = np.where(include, cmy - ce_y, 0.0)
        d = np.hypot(ex, ey)
        value += float(d[include].mean()) / len(scales)

        safe_d = np.where(d > 1e-12, d, 1.0)
        live = include & (d > 1e-12)
        ux = np.where(live, ex / safe_d, 0.0) / (len(scales) * n_inc)
        uy = np.where(live, ey / safe_d, 0.0) / (len(scales) * n_inc)
        # d(cm_x)/dx_i = (w + dw/dx (x_i - cm_x)) / m ; d(cm_y)/dx_i = dw/dx (y_i - cm_y) / m
        mx = safe_m[cells]
        rx = moved[:, 0:1] - cmx[cells]
        ry = moved[:, 1:2] - cmy[cells]
        gx = ux[cells] * (w + dwdx * rx) / mx + uy[cells] * (dwdx * ry) / mx
        gy = ux[cells] * (dwdy * rx) / mx + uy[cells] * (w + dwdy * ry) / mx
        grad[:, 0] += gx.sum(axis=1)
        grad[:, 1] += gy.sum(axis=1)
    return value, grad


def morph_curve_fit(moving: PointSet, target: PointSet, opts: MorphOptions = MorphOptions()) -> MorphResult:
    """Fit a coarse displacement grid moving one curve onto another.

    The control grid is bilinearly interpolated at the moving points and
    optimized by backtracking gradient descent on the multiscale
    patch-centroid distance alone. Non-convergence is reported through the
    `converged` flag; the best iterate is always returned.
    """
    if len(moving) == 0 or len(target) == 0:
        raise EmptyPointSet("morph_curve_fit requires two nonempty curves")
    pts = moving.points
    width = opts.width or int(np.ceil(max(pts[:, 0].max(), target.points[:, 0].max()) + 2))
    height = opts.height or int(np.ceil(max(pts[:, 1].max(), target.points[:, 1].max()) + 2))
    gh, gw = opts.grid_shape
    if gh < 2 or gw < 2:
        raise ValidationError("control grid must be at least 2x2")
    # a whole-raster cell supplies the global centroid pull (translation mode)
    scales = tuple(int(s) for s in opts.scales) + (max(width, height),)

    target_grids = []
    for scale in scales:
        cgw = -(-width // scale)
        cgh = -(-height // scale)
        cells, tw, _, _ = _soft_bin(target.points, scale, cgw, cgh)
        n_cells = cgh * cgw
        flat = cells.ravel()
        me = np.bincount(flat, weights=tw.ravel(), minlength=n_cells)
        tsx = np.bincount(flat, weights=(tw * target.points[:, 0:1]).ravel(), minlength=n_cells)
        tsy = np.bincount(flat, weights=(tw * target.points[:, 1:2]).ravel(), minlength=n_cells)
        occupied = me > _MORPH_MASS_FLOOR
        ce_x = np.where(occupied, tsx / np.where(occupied, me, 1.0), 0.0)
        ce_y = np.where(occupied, tsy / np.where(occupied, me, 1.0), 0.0)
        target_grids.append((me, ce_x, ce_y, cgw, cgh))

    corners, weights = _bilinear_weights(pts, gh, gw, width, height)
    disp = np.zeros((gh * gw, 2))

    def field_at_points(d):
        return (weights[..., None] * d[corners]).sum(axis=1)

    def loss_and_grid_grad(d):
        moved = pts + field_at_points(d)
        value, gpts = _morph_loss_and_grad(moved, target_grids, scales, width, height)
        gd = np.zeros_like(d)
        np.add.at(gd, corners.ravel(),
                  (weights[..., None] * gpts[:, None, :]).reshape(-1, 2))
        return value, gd

    value, grad = loss_and_grid_grad(disp)
    trace = [value]
    eta = opts.step_size
    converged = False
    for _ in range(opts.max_iters):
        gnorm2 = float((grad ** 2).sum())
        if gnorm2 == 0.0:
            converged = True
            break
        step = eta
        accepted = False
        for _ in range(40):
            cand = disp - step * grad
            v_new, g_new = loss_and_grid_grad(cand)
            if v_new <= value - 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        delta = float(np.abs(cand - disp).max())
        disp, value, grad = cand, v_new, g_new
        trace.append(value)
        eta = step * 2.0
        if delta < opts.tolerance:
            converged = True
            break

    moved = PointSet(pts + field_at_points(disp))
    return MorphResult(disp.reshape(gh, gw, 2), moved, tuple(trace), converged)
