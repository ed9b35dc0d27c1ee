"""Epipolar geometry: essential matrices, symmetric epipolar distance,
weighted eight-point estimation with a differentiable smallest-eigenvector
solve, pose decomposition, and angular pose-error metrics.

All functions are pure and numpy-based.  The symmetric eigensolver is a
cyclic Jacobi iteration (optionally batched over leading axes), which the
eight-point solve and the essential-matrix decomposition both share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GeometryError",
    "DegeneratePoseError",
    "DegenerateGeometryError",
    "InsufficientSupportError",
    "DecompositionError",
    "CameraIntrinsics",
    "Pose",
    "EssentialMatrix",
    "CorrespondenceSet",
    "skew",
    "rotation_from_axis_angle",
    "essential_from_pose",
    "normalize_points",
    "denormalize_points",
    "symmetric_epipolar_distance",
    "epipolar_distances",
    "classify_by_epipolar",
    "build_design_matrix",
    "jacobi_eigh",
    "weighted_eight_point",
    "weighted_eight_point_solve",
    "eig_backward",
    "eight_point_weight_gradient",
    "decompose_essential",
    "pose_angular_errors",
]

EIGENGAP_TOL = 1e-12
JACOBI_TOL = 1e-14


class GeometryError(Exception):
    """Base class for epipolar-geometry errors."""


class DegeneratePoseError(GeometryError):
    """Near-zero baseline: the essential matrix is undefined."""


class DegenerateGeometryError(GeometryError):
    """The two smallest eigenvalues of the normal matrix (nearly) coincide."""


class InsufficientSupportError(GeometryError):
    """Fewer than eight usable correspondences."""


class DecompositionError(GeometryError):
    """No decomposition candidate passed the cheirality vote."""


# -- domain types --------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    def as_list(self):
        return [self.fx, self.fy, self.cx, self.cy]


@dataclass(frozen=True)
class Pose:
    """Rigid transform of camera 2 relative to camera 1: x2 = R x1 + t."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation determinant is not +1")
        if np.linalg.norm(t) == 0.0:
            raise DegeneratePoseError("zero translation")


@dataclass(frozen=True)
class EssentialMatrix:
    """3x3 matrix of unit Frobenius norm; E and -E are equivalent."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "m", m)
        if abs(np.linalg.norm(m) - 1.0) > 1e-9:
            raise GeometryError("essential matrix must have unit Frobenius norm")


@dataclass
class CorrespondenceSet:
    """N putative matches as rows [x1, y1, x2, y2] in normalized coordinates."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise GeometryError(f"correspondences must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("non-finite correspondence coordinates")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=bool).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise GeometryError("label count does not match correspondence count")
            self.labels = lab

    def __len__(self):
        return self.points.shape[0]


# -- basic constructions -------------------------------------------------


def skew(v):
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_from_axis_angle(axis, angle):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.eye(3)
    k = skew(axis / n)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def essential_from_pose(pose):
    """E = [t]_x R, rescaled to unit Frobenius norm."""
    if np.linalg.norm(pose.t) <= 1e-12:
        raise DegeneratePoseError("baseline too small for an essential matrix")
    e = skew(pose.t) @ pose.r
    return EssentialMatrix(e / np.linalg.norm(e))


def normalize_points(pixels, k1, k2):
    """Map pixel correspondences (N, 4) into camera-normalized coordinates."""
    px = np.asarray(pixels, dtype=np.float64)
    out = np.empty_like(px)
    out[:, 0] = (px[:, 0] - k1.cx) / k1.fx
    out[:, 1] = (px[:, 1] - k1.cy) / k1.fy
    out[:, 2] = (px[:, 2] - k2.cx) / k2.fx
    out[:, 3] = (px[:, 3] - k2.cy) / k2.fy
    return CorrespondenceSet(out)


def denormalize_points(corrs, k1, k2):
    """Inverse of :func:`normalize_points`; returns an (N, 4) pixel array."""
    pts = corrs.points if isinstance(corrs, CorrespondenceSet) else np.asarray(corrs)
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] * k1.fx + k1.cx
    out[:, 1] = pts[:, 1] * k1.fy + k1.cy
    out[:, 2] = pts[:, 2] * k2.fx + k2.cx
    out[:, 3] = pts[:, 3] * k2.fy + k2.cy
    return out


# -- symmetric epipolar distance -----------------------------------------


def epipolar_distances(points, e):
    """Vectorized symmetric epipolar distance for (N, 4) normalized points.

    d = (x2' E x1)^2 * (1/|l1_xy|^2 + 1/|l2_xy|^2) with l1 = E x1,
    l2 = E' x2.  Pairs whose epipolar lines both vanish get +inf.
    """
    pts = points.points if isinstance(points, CorrespondenceSet) else np.asarray(points)
    em = e.m if isinstance(e, EssentialMatrix) else np.asarray(e)
    n = pts.shape[0]
    x1 = np.column_stack([pts[:, 0], pts[:, 1], np.ones(n)])
    x2 = np.column_stack([pts[:, 2], pts[:, 3], np.ones(n)])
    l1 = x1 @ em.T          # rows: E x1
    l2 = x2 @ em            # rows: E' x2
    resid = np.einsum("ij,ij->i", x2, l1)
    n1 = l1[:, 0] ** 2 + l1[:, 1] ** 2
    n2 = l2[:, 0] ** 2 + l2[:, 1] ** 2
    d = np.full(n, np.inf)
    with np.errstate(divide="ignore"):
        inv1 = np.where(n1 > 0, 1.0 / np.where(n1 > 0, n1, 1.0), np.inf)
        inv2 = np.where(n2 > 0, 1.0 / np.where(n2 > 0, n2, 1.0), np.inf)
    ok = (n1 > 0) | (n2 > 0)
    both = (n1 > 0) & (n2 > 0)
    only1 = ok & ~both & (n1 > 0)
    only2 = ok & ~both & (n2 > 0)
    r2 = resid * resid
    d[both] = r2[both] * (inv1[both] + inv2[both])
    d[only1] = r2[only1] * inv1[only1]
    d[only2] = r2[only2] * inv2[only2]
    return d


def symmetric_epipolar_distance(x1, x2, e):
    """Scalar symmetric epipolar distance for a single normalized pair."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(2)
    row = np.concatenate([x1, x2]).reshape(1, 4)
    return float(epipolar_distances(row, e)[0])


def classify_by_epipolar(corrs, e, tau):
    """Boolean inlier labels: symmetric epipolar distance below ``tau``."""
    if tau <= 0:
        raise GeometryError("epipolar threshold must be positive")
    return epipolar_distances(corrs, e) < tau


# -- Jacobi eigensolver --------------------------------------------------


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=60):
    """Eigendecomposition of symmetric matrices by cyclic Jacobi rotations.

    ``a`` has shape (..., n, n); returns (eigvals, eigvecs) with eigvals
    ascending and eigvecs[..., :, k] the k-th eigenvector.  Iteration
    stops when every off-diagonal of the Frobenius-normalized matrix is
    below ``tol``.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    if a.shape[-2] != n:
        raise GeometryError("jacobi_eigh expects square matrices")
    if a.ndim == 2:
        return _jacobi_single(a, tol, max_sweeps)
    scale = np.sqrt(np.einsum("...ij,...ij->...", a, a))
    scale = np.where(scale > 0, scale, 1.0)
    w = a / scale[..., None, None]
    v = np.broadcast_to(np.eye(n), w.shape).copy()
    pairs = [(p, q) for p in range(n) for q in range(p + 1, n)]
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.max(np.abs(w[..., offmask])) < tol:
            break
        for p, q in pairs:
            apq = w[..., p, q]
            small = np.abs(apq) < 1e-300
            app = w[..., p, p]
            aqq = w[..., q, q]
            tau = (aqq - app) / (2.0 * np.where(small, 1.0, apq))
            sgn = np.where(tau >= 0, 1.0, -1.0)
            abstau = np.abs(tau)
            with np.errstate(over="ignore", divide="ignore"):
                t = sgn / (abstau + np.sqrt(1.0 + tau * tau))
                # for huge tau the rotation angle is ~1/(2 tau)
                t = np.where(abstau > 1e150, sgn / (2.0 * abstau), t)
            t = np.where(small, 0.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # rotate rows p, q then columns p, q: W <- G' W G
            wp = w[..., p, :].copy()
            wq = w[..., q, :].copy()
            w[..., p, :] = c[..., None] * wp - s[..., None] * wq
            w[..., q, :] = s[..., None] * wp + c[..., None] * wq
            wp = w[..., :, p].copy()
            wq = w[..., :, q].copy()
            w[..., :, p] = c[..., None] * wp - s[..., None] * wq
            w[..., :, q] = s[..., None] * wp + c[..., None] * wq
            vp = v[..., :, p].copy()
            vq = v[..., :, q].copy()
            v[..., :, p] = c[..., None] * vp - s[..., None] * vq
            v[..., :, q] = s[..., None] * vp + c[..., None] * vq
    vals = np.einsum("...ii->...i", w) * scale[..., None]
    order = np.argsort(vals, axis=-1)
    vals = np.take_along_axis(vals, order, axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    return vals, v


def _jacobi_single(a, tol, max_sweeps):
    """Scalar-pivot specialization of ``jacobi_eigh`` for one matrix.

    Applies the same rotations in the same order as the batched path
    (tiny pivots get an exact identity rotation there, so skipping them
    here is bitwise equivalent), but with float arithmetic per pivot,
    which is much faster for the batch-of-one case.
    """
    n = a.shape[0]
    scale = float(np.sqrt(np.sum(a * a)))
    if scale <= 0:
        scale = 1.0
    w = a / scale
    v = np.eye(n)
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.max(np.abs(w[offmask])) < tol:
            break
        for p in range(n):
            for q in range(p + 1, n):
                apq = w[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (w[q, q] - w[p, p]) / (2.0 * apq)
                sgn = 1.0 if tau >= 0 else -1.0
                abstau = abs(tau)
                if abstau > 1e150:
                    t = sgn / (2.0 * abstau)
                else:
                    t = sgn / (abstau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                wp = w[p, :].copy()
                wq = w[q, :].copy()
                w[p, :] = c * wp - s * wq
                w[q, :] = s * wp + c * wq
                wp = w[:, p].copy()
                wq = w[:, q].copy()
                w[:, p] = c * wp - s * wq
                w[:, q] = s * wp + c * wq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    vals = np.diagonal(w).copy() * scale
    order = np.argsort(vals)
    return vals[order], v[:, order]


# -- weighted eight-point ------------------------------------------------


def build_design_matrix(points):
    """Epipolar design matrix (N, 9); row n dotted with vec(E) gives
    x2' E x1 for correspondence n."""
    pts = points.points if isinstance(points, CorrespondenceSet) else np.asarray(points)
    x1, y1, x2, y2 = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]
    one = np.ones_like(x1)
    return np.column_stack(
        [x1 * x2, y1 * x2, x2, x1 * y2, y1 * y2, y2, x1, y1, one]
    )


def _fix_sign(vec):
    """Make the first non-negligible entry positive; returns (vec, sign)."""
    idx = np.flatnonzero(np.abs(vec) > 1e-12 * max(1.0, np.max(np.abs(vec))))
    if idx.size == 0:
        return vec, 1.0
    s = 1.0 if vec[idx[0]] > 0 else -1.0
    return s * vec, s


def weighted_eight_point_solve(x_design, weights):
    """Core solve on a prebuilt (N, 9) design matrix.

    Returns (e9, eigvals, eigvecs, sign) where e9 is the sign-fixed unit
    eigenvector of G = X' diag(w^2) X for the smallest eigenvalue.
    """
    x = np.asarray(x_design, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != x.shape[0]:
        raise GeometryError("weight count does not match correspondence count")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise GeometryError("weights must be finite and nonnegative")
    if np.count_nonzero(w > 0) < 8:
        raise InsufficientSupportError(
            "weighted eight-point needs at least 8 positive weights"
        )
    # divide out the weight scale before squaring so rescaled weight
    # vectors build (nearly) the same matrix; eigenvalues are mapped back
    # to the caller's scale for gradient use
    m = np.max(w)
    wn = w / m
    g = (x * (wn * wn)[:, None]).T @ x
    vals, vecs = jacobi_eigh(g)
    vals = vals * (m * m)
    g = g * (m * m)
    gap = (vals[1] - vals[0]) / max(np.linalg.norm(g), 1e-300)
    if gap < EIGENGAP_TOL:
        raise DegenerateGeometryError(
            f"eigengap {gap:.3e} below {EIGENGAP_TOL:.0e}: configuration degenerate"
        )
    v0 = _refine_smallest_eigvec(g, vals, vecs[:, 0])
    vecs = vecs.copy()
    vecs[:, 0] = v0
    e9, sign = _fix_sign(v0)
    return e9, vals, vecs, sign


def _refine_smallest_eigvec(g, vals, v0):
    """One shifted inverse-iteration step to polish the Jacobi eigenvector.

    Makes the solve's output insensitive (to ~machine precision) to the
    rounding path, which the weight-rescaling invariance contract needs.
    """
    gnorm = np.linalg.norm(g)
    shift = vals[0] - 1e-8 * max(gnorm, 1e-300)
    try:
        z = np.linalg.solve(g - shift * np.eye(g.shape[0]), v0)
    except np.linalg.LinAlgError:
        return v0
    nz = np.linalg.norm(z)
    if not np.isfinite(nz) or nz == 0:
        return v0
    z /= nz
    if z @ v0 < 0:
        z = -z
    return z


def weighted_eight_point(corrs, weights):
    """Estimate the essential matrix from weighted correspondences.

    Solves min_e e' X' diag(w^2) X e over unit e; the returned matrix has
    unit Frobenius norm and a deterministic sign.
    """
    pts = corrs.points if isinstance(corrs, CorrespondenceSet) else np.asarray(corrs)
    if pts.shape[0] < 8:
        raise InsufficientSupportError("need at least 8 correspondences")
    e9, _, _, _ = weighted_eight_point_solve(build_design_matrix(pts), weights)
    return EssentialMatrix(e9.reshape(3, 3))


def eig_backward(eigvals, eigvecs, upstream_grad, index=0):
    """Gradient of the ``index``-th eigenvector with respect to the matrix.

    Uses the first-order perturbation formula
    dv_i = sum_{k != i} (v_k' dG v_i) / (lam_i - lam_k) v_k and returns
    the symmetrized adjoint dL/dG for upstream gradient dL/dv_i.
    """
    vals = np.asarray(eigvals, dtype=np.float64)
    vecs = np.asarray(eigvecs, dtype=np.float64)
    u = np.asarray(upstream_grad, dtype=np.float64).reshape(-1)
    n = vals.shape[0]
    vi = vecs[:, index]
    m = np.zeros((n, n))
    for k in range(n):
        if k == index:
            continue
        denom = vals[index] - vals[k]
        if abs(denom) < EIGENGAP_TOL * max(1.0, np.max(np.abs(vals))):
            raise DegenerateGeometryError(
                "degenerate eigengap: eigenvector gradient undefined"
            )
        ck = (vecs[:, k] @ u) / denom
        m += ck * np.outer(vecs[:, k], vi)
    return 0.5 * (m + m.T)


def eight_point_weight_gradient(x_design, weights, eigvals, eigvecs, sign,
                                upstream_grad):
    """Chain dL/de9 back to the weight vector through G = X' diag(w^2) X."""
    x = np.asarray(x_design, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    u = sign * np.asarray(upstream_grad, dtype=np.float64).reshape(-1)
    vals = np.asarray(eigvals)
    vecs = np.asarray(eigvecs)
    a = x @ vecs                       # (N, 9): a[:, k] = X v_k
    scale = max(np.max(np.abs(vals)), 1e-300)
    grad = np.zeros_like(w)
    for k in range(1, vals.shape[0]):
        denom = vals[0] - vals[k]
        if abs(denom) < EIGENGAP_TOL * scale:
            raise DegenerateGeometryError(
                "degenerate eigengap: weight gradient undefined"
            )
        ck = (vecs[:, k] @ u) / denom
        grad += ck * a[:, k] * a[:, 0]
    return 2.0 * w * grad


# -- decomposition and metrics -------------------------------------------

_W_TWIST = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _triangulated_depths(r, t, x1h, x2h):
    """Midpoint-triangulation depths of each pair in both cameras."""
    c2 = -r.T @ t
    d1 = x1h
    d2 = x2h @ r                      # rows: R' x2
    a = np.einsum("ij,ij->i", d1, d1)
    b = np.einsum("ij,ij->i", d1, d2)
    cc = np.einsum("ij,ij->i", d2, d2)
    e1 = d1 @ c2
    e2 = d2 @ c2
    det = a * cc - b * b
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    z1 = (cc * e1 - b * e2) / det
    z2 = (b * e1 - a * e2) / det
    mid = 0.5 * (z1[:, None] * d1 + c2[None, :] + z2[:, None] * d2)
    depth1 = mid[:, 2]
    depth2 = (mid @ r.T)[:, 2] + t[2]
    return depth1, depth2


def decompose_essential(e, corrs, mask=None):
    """Recover (R, unit t) from an essential matrix by cheirality voting.

    ``mask`` restricts the voting set (e.g. to predicted inliers); by
    default every correspondence votes.  The sign ambiguity of E is
    absorbed: decompose(E) == decompose(-E).
    """
    em = e.m if isinstance(e, EssentialMatrix) else np.asarray(e)
    pts = corrs.points if isinstance(corrs, CorrespondenceSet) else np.asarray(corrs)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.any():
            pts = pts[mask]
    if pts.shape[0] == 0:
        raise DecompositionError("no correspondences available for cheirality voting")
    vals, vecs = jacobi_eigh(em.T @ em)
    # descending singular order; the two large singular values define U
    v1, v2, v3 = vecs[:, 2], vecs[:, 1], vecs[:, 0]
    s1, s2 = np.sqrt(max(vals[2], 0.0)), np.sqrt(max(vals[1], 0.0))
    if s1 < 1e-12 or s2 < 1e-12:
        raise DecompositionError("rank-deficient essential matrix")
    u1 = em @ v1 / s1
    u2 = em @ v2 / s2
    u3 = np.cross(u1, u2)
    u = np.column_stack([u1, u2, u3])
    v = np.column_stack([v1, v2, v3])
    if np.linalg.det(v) < 0:
        v[:, 2] = -v[:, 2]
    r_a = u @ _W_TWIST @ v.T
    r_b = u @ _W_TWIST.T @ v.T
    n = pts.shape[0]
    x1h = np.column_stack([pts[:, 0], pts[:, 1], np.ones(n)])
    x2h = np.column_stack([pts[:, 2], pts[:, 3], np.ones(n)])
    candidates = [(r_a, u3), (r_a, -u3), (r_b, u3), (r_b, -u3)]
    best, best_votes = None, 0
    for r, t in candidates:
        d1, d2 = _triangulated_depths(r, t, x1h, x2h)
        votes = int(np.count_nonzero((d1 > 0) & (d2 > 0)))
        if votes > best_votes:
            best, best_votes = (r, t), votes
    if best is None:
        raise DecompositionError("every candidate failed the cheirality test")
    r, t = best
    return Pose(r, t / np.linalg.norm(t))


def pose_angular_errors(gt, pred):
    """Rotation and translation angle errors in degrees.

    Translation error ignores sign since the essential matrix fixes the
    direction only up to it.
    """
    cos_r = np.clip((np.trace(gt.r.T @ pred.r) - 1.0) / 2.0, -1.0, 1.0)
    err_r = np.degrees(np.arccos(cos_r))
    t1 = gt.t / np.linalg.norm(gt.t)
    t2 = pred.t / np.linalg.norm(pred.t)
    cos_t = np.clip(abs(t1 @ t2), 0.0, 1.0)
    err_t = np.degrees(np.arccos(cos_t))
    return float(err_r), float(err_t)
