"""Homogeneous 2D geometry, epipolar-pencil homographies and fundamental matrices.

Points and lines are plain length-3 float arrays. A line ``l`` contains the
point ``p`` iff ``l @ p == 0``. Image coordinates are continuous with the
origin at the top-left corner of the image; pixel ``(x, y)`` covers
``[x, x+1) x [y, y+1)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateInputError,
    DomainError,
    InconsistentInputError,
    InvariantViolationError,
)

INCIDENCE_TOL = 1e-9
BASIS_COND_MAX = 1e8
RANK_TOL = 1e-9
# pixel-coordinate F with a far epipole has s1/s0 near 1e-10, so rank-1 is judged near eps
RANK1_TOL = 1e-13
_PROPORTIONAL_TOL = 1e-12


@dataclass(frozen=True)
class ImageRect:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise InvariantViolationError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def length(self) -> float:
        """The larger image dimension."""
        return max(self.width, self.height)

    def conditioning(self) -> np.ndarray:
        """Point transform centering the image with half-diagonal sqrt(2)."""
        s = np.sqrt(2.0) / (0.5 * np.hypot(self.width, self.height))
        return np.array(
            [[s, 0.0, -s * self.width / 2], [0.0, s, -s * self.height / 2], [0.0, 0.0, 1.0]]
        )


def skew(v) -> np.ndarray:
    """Matrix ``[v]_x`` with ``[v]_x @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unit_line(l) -> np.ndarray:
    """Scale so that ``hypot(a, b) == 1`` and the first nonzero of (a, b) is positive.

    Works on a single line or on an (n, 3) stack.
    """
    l = np.asarray(l, dtype=float)
    ab = np.hypot(l[..., 0], l[..., 1])
    if np.any(ab == 0):
        raise DegenerateInputError("line at infinity has no normal direction")
    sign = np.where(l[..., 0] > 0, 1.0, np.where(l[..., 0] < 0, -1.0, np.sign(l[..., 1])))
    return l / (ab * sign)[..., None]


def _unit3(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _cross_checked(u, v, what):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError(f"zero homogeneous vector passed to {what}")
    w = np.cross(u, v)
    if np.linalg.norm(w) <= _PROPORTIONAL_TOL * nu * nv:
        raise DegenerateInputError(f"{what}: inputs are proportional")
    return w


def line_through(p, q) -> np.ndarray:
    return _cross_checked(p, q, "line_through")


def intersect(l1, l2) -> np.ndarray:
    """Intersection point; parallel lines give a point at infinity."""
    return _cross_checked(l1, l2, "intersect")


def is_infinite(p, tol: float = 1e-12) -> bool:
    p = np.asarray(p, dtype=float)
    return abs(p[2]) <= tol * np.linalg.norm(p)


def point_line_distance(p, l) -> float:
    p = np.asarray(p, dtype=float)
    l = np.asarray(l, dtype=float)
    if p[2] == 0:
        raise DomainError("distance to a point at infinity is undefined")
    ab = np.hypot(l[0], l[1])
    if ab == 0:
        raise DegenerateInputError("line at infinity")
    return float(abs(l @ p) / (ab * abs(p[2])))


# --- clipping and areas ---------------------------------------------------------


def clip_lines_to_rect(lines, rect: ImageRect):
    """Clip an (n, 3) stack of lines to ``[0, W] x [0, H]``.

    Returns ``(p, q, ok)`` with (n, 2) endpoints and a mask of lines that
    cross the rectangle along a segment of positive length. Endpoints are
    snapped exactly onto the boundary side they were clipped against.
    """
    L = np.atleast_2d(np.asarray(lines, dtype=float))
    a, b, c = L[:, 0], L[:, 1], L[:, 2]
    n2 = a * a + b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        x0 = -a * c / n2
        y0 = -b * c / n2
    dx, dy = -b, a
    W, H = float(rect.width), float(rect.height)
    tmin = np.full(len(L), -np.inf)
    tmax = np.full(len(L), np.inf)
    # which boundary each end was clipped against: 0 x=0, 1 x=W, 2 y=0, 3 y=H
    smin = np.full(len(L), -1)
    smax = np.full(len(L), -1)
    ok = n2 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        for d, o, lo, hi, s_lo, s_hi in ((dx, x0, 0.0, W, 0, 1), (dy, y0, 0.0, H, 2, 3)):
            par = d == 0
            ok &= ~(par & ((o < lo) | (o > hi)))
            t1 = (lo - o) / d
            t2 = (hi - o) / d
            neg = d < 0
            ta = np.where(neg, t2, t1)
            tb = np.where(neg, t1, t2)
            sa = np.where(neg, s_hi, s_lo)
            sb = np.where(neg, s_lo, s_hi)
            upd = ~par & (ta > tmin)
            tmin = np.where(upd, ta, tmin)
            smin = np.where(upd, sa, smin)
            upd = ~par & (tb < tmax)
            tmax = np.where(upd, tb, tmax)
            smax = np.where(upd, sb, smax)
    ok &= np.isfinite(tmin) & np.isfinite(tmax) & (tmax - tmin > 1e-12 * (W + H))
    tmin = np.where(ok, tmin, 0.0)
    tmax = np.where(ok, tmax, 0.0)
    x0 = np.where(ok, x0, 0.0)
    y0 = np.where(ok, y0, 0.0)
    p = np.stack([x0 + tmin * dx, y0 + tmin * dy], axis=1)
    q = np.stack([x0 + tmax * dx, y0 + tmax * dy], axis=1)
    for pts, side in ((p, smin), (q, smax)):
        pts[side == 0, 0] = 0.0
        pts[side == 1, 0] = W
        pts[side == 2, 1] = 0.0
        pts[side == 3, 1] = H
        np.clip(pts[:, 0], 0.0, W, out=pts[:, 0])
        np.clip(pts[:, 1], 0.0, H, out=pts[:, 1])
    return p, q, ok


def clip_line_to_rect(l, rect: ImageRect):
    """Segment ``l ∩ rect`` as ``(p, q)`` pixel coordinates, or None."""
    p, q, ok = clip_lines_to_rect(np.asarray(l, dtype=float)[None], rect)
    if not ok[0]:
        return None
    return p[0], q[0]


def _rect_polygons(n, rect):
    K = 8
    V = np.zeros((n, K, 2))
    V[:, :4] = [[0.0, 0.0], [rect.width, 0.0], [rect.width, rect.height], [0.0, rect.height]]
    return V, np.full(n, 4)


def _clip_polygons(V, count, L):
    """Keep the part of each convex polygon where ``L @ (x, y, 1) >= 0``."""
    n, K, _ = V.shape
    s = V[:, :, 0] * L[:, 0:1] + V[:, :, 1] * L[:, 1:2] + L[:, 2:3]
    idx = np.arange(K)
    nxt = np.where(idx[None, :] + 1 < count[:, None], idx[None, :] + 1, 0)
    rows = np.arange(n)[:, None]
    Vn = V[rows, nxt]
    sn = s[rows, nxt]
    live = idx[None, :] < count[:, None]
    ins = s >= 0
    ins_n = sn >= 0
    cross = live & (ins != ins_n)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(cross, s / (s - sn), 0.0)
    X = V + t[..., None] * (Vn - V)
    out = np.empty((n, 2 * K, 2))
    out[:, 0::2] = V
    out[:, 1::2] = X
    valid = np.empty((n, 2 * K), dtype=bool)
    valid[:, 0::2] = live & ins
    valid[:, 1::2] = cross
    order = np.argsort(~valid, axis=1, kind="stable")[:, :K]
    return out[rows, order], np.minimum(valid.sum(axis=1), K)


def _polygon_areas(V, count):
    K = V.shape[1]
    idx = np.arange(K)
    nxt = np.where(idx[None, :] + 1 < count[:, None], idx[None, :] + 1, 0)
    rows = np.arange(V.shape[0])[:, None]
    Vn = V[rows, nxt]
    cr = V[:, :, 0] * Vn[:, :, 1] - V[:, :, 1] * Vn[:, :, 0]
    cr = np.where(idx[None, :] < count[:, None], cr, 0.0)
    return 0.5 * np.abs(cr.sum(axis=1))


def _disagreement_areas(L1, L2, rect):
    n = len(L1)
    total = np.zeros(n)
    for s1, s2 in ((1.0, -1.0), (-1.0, 1.0)):
        V, cnt = _rect_polygons(n, rect)
        V, cnt = _clip_polygons(V, cnt, s1 * L1)
        V, cnt = _clip_polygons(V, cnt, s2 * L2)
        total += np.where(cnt >= 3, _polygon_areas(V, cnt), 0.0)
    return total


def areas_between_lines(L1, L2, rect: ImageRect) -> np.ndarray:
    """Vectorized :func:`area_between_lines` over two (n, 3) stacks."""
    L1 = unit_line(np.atleast_2d(L1))
    L2 = unit_line(np.atleast_2d(L2))
    dot = L1[:, 0] * L2[:, 0] + L1[:, 1] * L2[:, 1]
    L2o = np.where((dot < 0)[:, None], -L2, L2)
    area = _disagreement_areas(L1, L2o, rect)
    perp = dot == 0
    if np.any(perp):
        alt = _disagreement_areas(L1[perp], -L2[perp], rect)
        area[perp] = np.minimum(area[perp], alt)
    return area


def area_between_lines(l1, l2, rect: ImageRect) -> float:
    """Image area (px^2) lying on opposite sides of the two lines."""
    return float(areas_between_lines(np.asarray(l1, float)[None], np.asarray(l2, float)[None], rect)[0])


# --- epipolar pencils ------------------------------------------------------------


def _basis_matrix(basis):
    B = unit_line(np.asarray(basis, dtype=float)).T  # 3 x 2
    if np.linalg.cond(B) > BASIS_COND_MAX:
        raise DegenerateInputError("pencil basis lines are (nearly) dependent")
    return B


def pencil_coordinates(l, basis):
    """Least-squares ``(alpha, beta)`` with ``unit(l) ~ alpha*b1 + beta*b2``.

    ``basis`` is a pair of lines; all three lines are unit-normalized first.
    Accepts a single line or an (n, 3) stack (then returns (n, 2)).
    """
    B = _basis_matrix(basis)
    l = unit_line(l)
    coef = np.linalg.pinv(B) @ np.atleast_2d(l).T
    return coef.T if np.ndim(l) == 2 else coef[:, 0]


def _to_conditioned_lines(L, T):
    # lines map by the inverse transpose of the point transform
    return unit_line(np.asarray(L, dtype=float) @ np.linalg.inv(T))


@dataclass(frozen=True)
class PencilHomography:
    """Projective map between the epipolar pencils of two images.

    ``e``, ``e_prime`` and the basis lines are in pixel coordinates. Pencil
    coordinates and ``m`` refer to the basis lines expressed in the
    conditioned frames ``norm_a`` / ``norm_b`` (identity when unconditioned).
    """

    e: np.ndarray
    e_prime: np.ndarray
    basis_a: np.ndarray  # (2, 3)
    basis_b: np.ndarray  # (2, 3)
    m: np.ndarray  # (2, 2)
    norm_a: np.ndarray
    norm_b: np.ndarray

    def conditioned_basis_a(self):
        return _to_conditioned_lines(self.basis_a, self.norm_a)

    def conditioned_basis_b(self):
        return _to_conditioned_lines(self.basis_b, self.norm_b)


def _incident(l, e):
    return abs(unit_line(l) @ _unit3(e)) <= INCIDENCE_TOL


def build_pencil_homography(
    pairs, e, e_prime, rect_a: ImageRect | None = None, rect_b: ImageRect | None = None
) -> PencilHomography:
    """Pencil homography sending each ``l_i`` to ``l_i'`` for three line pairs.

    With ``rect_a``/``rect_b`` given, the computation runs in Hartley-conditioned
    coordinates of each image.
    """
    if len(pairs) != 3:
        raise ValueError("exactly three line pairs are required")
    Ta = np.eye(3) if rect_a is None else rect_a.conditioning()
    Tb = np.eye(3) if rect_b is None else rect_b.conditioning()
    La = _to_conditioned_lines([p[0] for p in pairs], Ta)
    Lb = _to_conditioned_lines([p[1] for p in pairs], Tb)
    ea = Ta @ np.asarray(e, float)
    eb = Tb @ np.asarray(e_prime, float)
    for i in range(3):
        if not (_incident(La[i], ea) and _incident(Lb[i], eb)):
            raise InconsistentInputError(f"line pair {i} does not pass through the epipoles")
    for L in (La, Lb):
        for i, j in ((0, 1), (0, 2), (1, 2)):
            if np.linalg.norm(np.cross(L[i], L[j])) <= _PROPORTIONAL_TOL * 10:
                raise DegenerateInputError(f"lines {i} and {j} of one image coincide")
    a3, b3 = pencil_coordinates(La[2], La[:2])
    a3p, b3p = pencil_coordinates(Lb[2], Lb[:2])
    tol = 1e-9
    if (
        abs(b3) <= tol * np.hypot(a3, b3)
        or abs(a3) <= tol * np.hypot(a3, b3)
        or abs(a3p) <= tol * np.hypot(a3p, b3p)
        or abs(b3p) <= tol * np.hypot(a3p, b3p)
    ):
        raise DegenerateInputError("third line coincides with a basis line")
    mu = (b3p * a3) / (a3p * b3)
    basis_a = unit_line(np.asarray([pairs[0][0], pairs[1][0]], dtype=float))
    basis_b = unit_line(np.asarray([pairs[0][1], pairs[1][1]], dtype=float))
    return PencilHomography(
        e=np.asarray(e, float).copy(),
        e_prime=np.asarray(e_prime, float).copy(),
        basis_a=basis_a,
        basis_b=basis_b,
        m=np.diag([1.0, mu]),
        norm_a=Ta,
        norm_b=Tb,
    )


def apply_pencil_homography(h: PencilHomography, l) -> np.ndarray:
    """Map line(s) of image A to image B; off-pencil lines are projected first.

    Accepts one line or an (n, 3) stack; results are unit-normalized.
    """
    l = np.asarray(l, dtype=float)
    Lc = _to_conditioned_lines(np.atleast_2d(l), h.norm_a)
    coef = pencil_coordinates(Lc, h.conditioned_basis_a())  # (n, 2)
    out_c = (coef @ h.m.T) @ h.conditioned_basis_b()
    out = unit_line(out_c @ h.norm_b)
    return out if l.ndim == 2 else out[0]


def normalize_f(F) -> np.ndarray:
    """Unit Frobenius norm, sign fixed by the largest-magnitude entry."""
    F = np.asarray(F, dtype=float)
    F = F / np.linalg.norm(F)
    k = np.argmax(np.abs(F))
    return F if F.flat[k] > 0 else -F


def f_from_pencil(h: PencilHomography) -> np.ndarray:
    """Fundamental matrix whose epipolar lines are the pencil map of A's pencil."""
    Ba = h.conditioned_basis_a().T
    Bb = h.conditioned_basis_b().T
    ec = h.norm_a @ h.e
    Fc = Bb @ h.m @ np.linalg.pinv(Ba) @ skew(ec)
    return normalize_f(h.norm_b.T @ Fc @ h.norm_a)


def f_distance(F1, F2) -> float:
    """Frobenius distance between normalized matrices, minimized over sign."""
    A = normalize_f(F1)
    B = normalize_f(F2)
    return float(min(np.linalg.norm(A - B), np.linalg.norm(A + B)))


def check_fundamental(F) -> np.ndarray:
    F = normalize_f(F)
    s = np.linalg.svd(F, compute_uv=False)
    if s[2] > RANK_TOL * s[0]:
        raise InvariantViolationError(f"matrix is rank 3 (singular values {s})")
    if s[1] <= RANK1_TOL * s[0]:
        raise InvariantViolationError(f"matrix has rank below 2 (singular values {s})")
    return F


def epipoles_of(F):
    """``(e, e_prime)`` with ``F e = 0`` and ``e_prime^T F = 0`` (unit 3-vectors)."""
    F = check_fundamental(F)
    U, _, Vt = np.linalg.svd(F)
    e = Vt[2]
    ep = U[:, 2]
    if abs(e[2]) > 1e-12:
        e = e * np.sign(e[2])
    if abs(ep[2]) > 1e-12:
        ep = ep * np.sign(ep[2])
    return e, ep


def symmetric_epipolar_distances(F, x, x_prime) -> np.ndarray:
    """Vectorized symmetric epipolar distance for (n, 3) point stacks."""
    F = np.asarray(F, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(x_prime, dtype=float))
    if np.any(x[:, 2] == 0) or np.any(xp[:, 2] == 0):
        raise DomainError("symmetric epipolar distance needs finite points")
    lb = x @ F.T  # lines in B
    la = xp @ F  # lines in A
    nb = np.hypot(lb[:, 0], lb[:, 1])
    na = np.hypot(la[:, 0], la[:, 1])
    scale = np.linalg.norm(F) * 1e-12
    if np.any(nb <= scale * np.linalg.norm(x, axis=1)) or np.any(na <= scale * np.linalg.norm(xp, axis=1)):
        raise DomainError("point maps to a null epipolar line (point at an epipole)")
    r = np.sum(xp * lb, axis=1)
    db = np.abs(r) / (nb * np.abs(xp[:, 2]))
    da = np.abs(r) / (na * np.abs(x[:, 2]))
    return 0.5 * (db + da)


def symmetric_epipolar_distance(F, x, x_prime) -> float:
    return float(symmetric_epipolar_distances(F, np.asarray(x, float)[None], np.asarray(x_prime, float)[None])[0])


# --- serialization -------------------------------------------------------------------


def format_fundamental(F) -> str:
    F = np.asarray(F, dtype=float)
    return "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in F)


def save_fundamental(path: str | os.PathLike, F) -> None:
    with open(path, "w") as fh:
        fh.write(format_fundamental(F))


def load_fundamental(path: str | os.PathLike) -> np.ndarray:
    F = np.loadtxt(path, dtype=float, ndmin=2)
    if F.shape != (3, 3):
        raise InvariantViolationError(f"{path}: expected 3x3 matrix, got {F.shape}")
    return F


def project_onto_pencil(lines, basis, norm=None) -> np.ndarray:
    """Least-squares projection of line(s) onto the pencil spanned by ``basis``.

    The projection is computed in the frame given by the point transform
    ``norm`` (identity by default); results are unit lines in pixel frame.
    """
    T = np.eye(3) if norm is None else norm
    L = np.asarray(lines, dtype=float)
    Lc = _to_conditioned_lines(np.atleast_2d(L), T)
    Bc = _to_conditioned_lines(basis, T)
    coef = pencil_coordinates(Lc, Bc)
    out = unit_line((coef @ Bc) @ T)
    return out if L.ndim == 2 else out[0]
