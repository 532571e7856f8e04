"""Cross-camera barcode correlation, candidate selection and traffic filtering."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .barcode import BorderLine, MotionBarcode, barcode_matrix, raster_line_pixels
from .errors import UndefinedCorrelationError
from .geometry import ImageRect, clip_line_to_rect, unit_line
from .mask_io import HeatMap


@dataclass(frozen=True, eq=False)
class CandidatePair:
    line_a: BorderLine
    line_b: BorderLine
    score: float
    a_index: int = -1
    b_index: int = -1


@dataclass(frozen=True, eq=False)
class TrafficLine:
    line: np.ndarray
    support: float  # mean heat along the line's raster
    votes: float = 0.0
    rho: float = 0.0
    theta: float = 0.0


def correlation_matrix(barcodes_a: list[MotionBarcode], barcodes_b: list[MotionBarcode]) -> np.ndarray:
    """``values[i, j] = ncc(a_i, b_j)`` via co-occurrence counts."""
    A = barcode_matrix(barcodes_a).astype(np.float64)
    B = barcode_matrix(barcodes_b).astype(np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError("barcodes differ in length")
    N = A.shape[1]
    n1 = A.sum(axis=1)
    n2 = B.sum(axis=1)
    if np.any((n1 == 0) | (n1 == N)) or np.any((n2 == 0) | (n2 == N)):
        raise UndefinedCorrelationError("constant barcode in correlation matrix input")
    n11 = A @ B.T
    denom = np.sqrt(np.outer(n1 * (N - n1), n2 * (N - n2)))
    return np.clip((N * n11 - np.outer(n1, n2)) / denom, -1.0, 1.0)


def _topk_mask(values: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Entries among the ``k`` largest along ``axis``; ties go to lower index."""
    order = np.argsort(-values, axis=axis, kind="stable")
    mask = np.zeros(values.shape, dtype=bool)
    top = np.take(order, np.arange(min(k, values.shape[axis])), axis=axis)
    if axis == 1:
        mask[np.arange(values.shape[0])[:, None], top] = True
    else:
        mask[top, np.arange(values.shape[1])[None, :]] = True
    return mask


def mutual_topk(values: np.ndarray, k: int = 3) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)`` in the top ``k`` of both their row and column."""
    if k < 1:
        raise ValueError("k must be >= 1")
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return []
    both = _topk_mask(values, k, 1) & _topk_mask(values, k, 0)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(both))]


def _group_topk(group, other, vals, k):
    """Keep entries among the ``k`` best of their ``group`` (ties: lower ``other``)."""
    order = np.lexsort((other, -vals, group))
    g = group[order]
    start = np.r_[0, np.flatnonzero(np.diff(g)) + 1]
    rank = np.arange(len(g)) - np.repeat(start, np.diff(np.r_[start, len(g)]))
    return order[rank < k]


def _block_topk(vals, k, axis):
    """Entries of a dense block among the top ``k`` along ``axis``, as (row, col)."""
    kk = min(k, vals.shape[axis])
    kth = -np.partition(-vals, kk - 1, axis=axis).take(kk - 1, axis=axis)
    r, c = np.nonzero(vals >= np.expand_dims(kth, axis))
    v = vals[r, c]
    keep = _group_topk(r, c, v, k) if axis == 1 else _group_topk(c, r, v, k)
    return r[keep], c[keep], v[keep]


def blocked_mutual_topk(
    bits_a: np.ndarray, bits_b: np.ndarray, k: int = 3, block: int = 512
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mutual top-``k`` pairs of a correlation matrix computed block by block.

    Takes (n, N) boolean barcode matrices and returns index arrays ``i, j``
    with scores, matching :func:`mutual_topk` on the dense matrix.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    A = np.asarray(bits_a, dtype=np.float32)
    B = np.asarray(bits_b, dtype=np.float32)
    if A.shape[1] != B.shape[1]:
        raise ValueError("barcodes differ in length")
    N = A.shape[1]
    n1 = A.sum(axis=1, dtype=np.float64)
    n2 = B.sum(axis=1, dtype=np.float64)
    if np.any((n1 == 0) | (n1 == N)) or np.any((n2 == 0) | (n2 == N)):
        raise UndefinedCorrelationError("constant barcode in correlation matrix input")
    var2 = n2 * (N - n2)
    rows, cols = [], []
    BT = np.ascontiguousarray(B.T)
    for s in range(0, A.shape[0], block):
        # float32 products of 0/1 vectors are exact integers for N < 2**24
        n11 = (A[s : s + block] @ BT).astype(np.float64)
        a1 = n1[s : s + block, None]
        vals = np.clip((N * n11 - a1 * n2[None]) / np.sqrt((a1 * (N - a1)) * var2[None]), -1.0, 1.0)
        r, c, v = _block_topk(vals, k, 1)
        rows.append((r + s, c, v))
        r, c, v = _block_topk(vals, k, 0)
        cols.append((r + s, c, v))
    ri, rj, rv = (np.concatenate(x) for x in zip(*rows))
    ci, cj, cv = (np.concatenate(x) for x in zip(*cols))
    keep = _group_topk(cj, ci, cv, k)
    ci, cj = ci[keep], cj[keep]
    nb = B.shape[0]
    both = np.isin(ri * nb + rj, ci * nb + cj)
    return ri[both], rj[both], rv[both]


def mutual_topk_candidates(
    values: np.ndarray, k: int, lines_a: list[BorderLine], lines_b: list[BorderLine]
) -> list[CandidatePair]:
    return [
        CandidatePair(lines_a[i], lines_b[j], float(values[i, j]), i, j) for i, j in mutual_topk(values, k)
    ]


def select_top_candidates(pairs: list[CandidatePair], limit: int = 1000) -> list[CandidatePair]:
    """Highest scores first; ties by A index then B index."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    ranked = sorted(pairs, key=lambda c: (-c.score, c.a_index, c.b_index))
    return ranked[:limit]


# --- traffic lines -----------------------------------------------------------------


def line_rho_theta(l) -> tuple[np.ndarray, np.ndarray]:
    """``(rho, theta)`` with ``x cos(theta) + y sin(theta) = rho``, theta in [0, pi)."""
    L = unit_line(np.atleast_2d(l))
    theta = np.arctan2(L[:, 1], L[:, 0])
    rho = -L[:, 2]
    flip = theta < 0
    theta = np.where(flip, theta + np.pi, theta)
    rho = np.where(flip, -rho, rho)
    wrap = theta >= np.pi
    theta = np.where(wrap, theta - np.pi, theta)
    rho = np.where(wrap, -rho, rho)
    return rho, theta


def rho_theta_distance(rho1, theta1, rho2, theta2):
    """Per-element ``(|drho|, |dtheta|)`` accounting for the theta wrap at pi."""
    dth = np.abs(theta1 - theta2)
    drho = np.abs(rho1 - rho2)
    wrapped = dth > np.pi / 2
    dth = np.where(wrapped, np.pi - dth, dth)
    drho = np.where(wrapped, np.abs(rho1 + rho2), drho)
    return drho, dth


def hough_accumulator(
    mask: np.ndarray, rho_step: float = 1.0, theta_step: float = np.deg2rad(0.5), weights: np.ndarray | None = None
):
    """Vote pixel centers of ``mask`` into a ``(rho, theta)`` accumulator.

    Every pixel votes 1 unless ``weights`` (same shape as ``mask``) gives its vote.

    Each vote is split linearly between the two nearest rho bins; rounding to
    one bin aliases at diagonal angles, where pixel projections fall on a
    1/sqrt(2) lattice and alternate bins collect unequal counts.
    """
    H, W = mask.shape
    thetas = np.arange(0.0, np.pi, theta_step)
    diag = np.hypot(W, H)
    n = int(np.ceil(diag / rho_step))
    rhos = np.arange(-n, n + 1) * rho_step
    acc = np.zeros((len(rhos), len(thetas)))
    ys, xs = np.nonzero(mask)
    if len(xs):
        cx = xs + 0.5
        cy = ys + 0.5
        wt = np.ones(len(xs)) if weights is None else np.asarray(weights, dtype=float)[ys, xs]
        cos, sin = np.cos(thetas), np.sin(thetas)
        for k in range(len(thetas)):
            r = cx * cos[k] + cy * sin[k]
            pos = (r - rhos[0]) / rho_step
            i0 = np.floor(pos).astype(np.int64)
            w1 = pos - i0
            acc[:, k] = np.bincount(i0, wt * (1.0 - w1), len(rhos) + 1)[: len(rhos)]
            acc[:, k] += np.bincount(i0 + 1, wt * w1, len(rhos) + 1)[: len(rhos)]
    return acc, rhos, thetas


def _local_maxima(acc: np.ndarray) -> np.ndarray:
    """Mask of cells not exceeded by any 3x3 neighbour (theta wraps with rho mirrored)."""
    R, T = acc.shape
    pad = np.full((R + 2, T + 2), -1, dtype=acc.dtype)
    pad[1:-1, 1:-1] = acc
    # theta wrap: column T-1 neighbours column 0 with rho negated (rho grid is symmetric)
    pad[1:-1, 0] = acc[::-1, T - 1]
    pad[1:-1, -1] = acc[::-1, 0]
    ok = np.ones(acc.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dt in (-1, 0, 1):
            if dr == 0 and dt == 0:
                continue
            nb = pad[1 + dr : R + 1 + dr, 1 + dt : T + 1 + dt]
            # strict on one side so plateaus keep a single representative
            ok &= (acc > nb) if (dr, dt) < (0, 0) else (acc >= nb)
    return ok


def _refine_line(rho, theta, weight, window, iters=20, step=2.0, tol=1e-3):
    """Fit a line through the heat centroids of cross-sections of the band around a peak.

    Cross-sections reaching outside the image are skipped, since a border cut
    shifts their centroid towards the inside.
    """
    H, W = weight.shape
    offs = np.arange(-window, window + 0.5, 0.5)
    for _ in range(iters):
        seg = clip_line_to_rect(np.array([np.cos(theta), np.sin(theta), -rho]), ImageRect(W, H))
        if seg is None:
            break
        p, q = np.asarray(seg[0], float), np.asarray(seg[1], float)
        n = np.array([np.cos(theta), np.sin(theta)])
        t = np.arange(0.0, np.hypot(*(q - p)), step) / max(np.hypot(*(q - p)), 1e-12)
        mids = p[None] + t[:, None] * (q - p)[None]
        pts = mids[:, None, :] + offs[None, :, None] * n[None, None, :]
        inside = np.all((pts[..., 0] >= 0) & (pts[..., 0] < W) & (pts[..., 1] >= 0) & (pts[..., 1] < H), axis=1)
        pts, mids = pts[inside], mids[inside]
        if len(mids) < 2:
            break
        h = weight[pts[..., 1].astype(np.int64), pts[..., 0].astype(np.int64)]
        mass = h.sum(axis=1)
        keep = mass > 0
        if keep.sum() < 2:
            break
        c = (h[keep] @ offs) / mass[keep]
        ridge = mids[keep] + c[:, None] * n[None]
        wm = mass[keep] / mass[keep].sum()
        centre = wm @ ridge
        d = ridge - centre
        cov = (d * wm[:, None]).T @ d
        normal = np.linalg.eigh(cov)[1][:, 0]
        r, th = line_rho_theta(np.array([normal[0], normal[1], -(normal @ centre)]))
        dr, dt = rho_theta_distance(rho, theta, float(r[0]), float(th[0]))
        rho, theta = float(r[0]), float(th[0])
        if dr < tol and dt < tol * 1e-3:
            break
    return rho, theta


def detect_traffic_lines(
    heat: HeatMap,
    hot_fraction: float = 0.90,
    hough_rho_step: float = 1.0,
    hough_theta_step: float = np.deg2rad(0.5),
    peak_min_support: float | None = None,
    max_lines: int = 10,
    min_support_ratio: float = 0.3,
    refine_window_px: float = 20.0,
) -> list[TrafficLine]:
    """Dominant straight motion paths in a heat map.

    Peaks are located on the accumulator of hot pixels weighted by their heat
    (the heat integral along each line). A hot band thicker than one cell
    leaves a flat ridge of near-equal peaks, so each peak is then moved onto
    the band's axis, fitted through the heat centroids of cross-sections
    ``refine_window_px`` to either side, and peaks that land in the same
    accumulator cell as a stronger one are dropped.
    ``peak_min_support`` applies to the unweighted vote count; by default it is
    ``min_support_ratio`` times the diagonal of the hot pixels' bounding box.
    """
    counts = heat.counts
    nz = counts[counts > 0]
    if nz.size == 0:
        return []
    thresh = np.quantile(nz, hot_fraction)
    hot = counts >= max(thresh, 1)
    ys, xs = np.nonzero(hot)
    if peak_min_support is None:
        chord = np.hypot(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
        peak_min_support = min_support_ratio * chord
    acc, rhos, thetas = hough_accumulator(hot, hough_rho_step, hough_theta_step)
    mass, _, _ = hough_accumulator(hot, hough_rho_step, hough_theta_step, weights=counts)
    peaks = _local_maxima(mass) & (acc >= peak_min_support) & (acc > 0)
    ri, ti = np.nonzero(peaks)
    if len(ri) == 0:
        return []
    order = np.lexsort((ti, ri, -mass[ri, ti]))
    weight = np.where(hot, counts, 0).astype(float)
    rect = ImageRect(heat.width, heat.height)
    out = []
    for k in order:
        if len(out) == max_lines:
            break
        rho, th = _refine_line(rhos[ri[k]], thetas[ti[k]], weight, refine_window_px)
        dup = False
        for t in out:
            dr, dt = rho_theta_distance(rho, th, t.rho, t.theta)
            if dr <= hough_rho_step and dt <= hough_theta_step:
                dup = True
                break
        if dup:
            continue
        line = np.array([np.cos(th), np.sin(th), -rho])
        px = raster_line_pixels(line, rect)
        if len(px) == 0:
            continue
        support = float(counts[px[:, 1], px[:, 0]].mean())
        if support <= 0:
            continue
        out.append(TrafficLine(line, support, float(acc[ri[k], ti[k]]), rho, th))
    return out


def _near_traffic(lines: np.ndarray, traffic: list[TrafficLine], rho_tol, theta_tol) -> np.ndarray:
    if not traffic or len(lines) == 0:
        return np.zeros(len(lines), dtype=bool)
    rho, th = line_rho_theta(lines)
    trho, tth = line_rho_theta(np.array([t.line for t in traffic]))
    drho, dth = rho_theta_distance(rho[:, None], th[:, None], trho[None], tth[None])
    return np.any((drho <= rho_tol) & (dth <= theta_tol), axis=1)


def filter_traffic_candidates(
    cands: list[CandidatePair],
    traffic_a: list[TrafficLine],
    traffic_b: list[TrafficLine],
    rho_tol_px: float = 5.0,
    theta_tol_rad: float = 0.02,
) -> list[CandidatePair]:
    """Drop pairs whose lines both lie on heavy-traffic lines of their images."""
    if not cands or not traffic_a or not traffic_b:
        return list(cands)
    la = np.array([c.line_a.line for c in cands])
    lb = np.array([c.line_b.line for c in cands])
    drop = _near_traffic(la, traffic_a, rho_tol_px, theta_tol_rad) & _near_traffic(
        lb, traffic_b, rho_tol_px, theta_tol_rad
    )
    return [c for c, d in zip(cands, drop) if not d]


# --- export ------------------------------------------------------------------------

CANDIDATE_COLUMNS = ["a_id", "b_id", "score", "a_px", "a_py", "a_qx", "a_qy", "b_px", "b_py", "b_qx", "b_qy"]


def write_candidates(path: str | os.PathLike, cands: list[CandidatePair]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANDIDATE_COLUMNS)
        for c in cands:
            a, b = c.line_a, c.line_b
            w.writerow(
                [a.id, b.id, repr(c.score)]
                + [repr(float(v)) for v in (a.p[0], a.p[1], a.q[0], a.q[1], b.p[0], b.p[1], b.q[0], b.q[1])]
            )


def read_candidates(path: str | os.PathLike) -> list[CandidatePair]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            f = {k: float(r[k]) for k in CANDIDATE_COLUMNS[2:]}
            a = BorderLine.from_points((f["a_px"], f["a_py"]), (f["a_qx"], f["a_qy"]), int(r["a_id"]))
            b = BorderLine.from_points((f["b_px"], f["b_py"]), (f["b_qx"], f["b_qy"]), int(r["b_id"]))
            out.append(CandidatePair(a, b, f["score"], a.id, b.id))
    return out
