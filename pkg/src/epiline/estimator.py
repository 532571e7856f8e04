"""RANSAC over candidate epipolar line pairs."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateInputError,
    DegenerateSampleError,
    EstimationFailure,
    InconsistentInputError,
    InsufficientCandidatesError,
)
from .geometry import (
    ImageRect,
    PencilHomography,
    apply_pencil_homography,
    areas_between_lines,
    build_pencil_homography,
    clip_lines_to_rect,
    epipoles_of,
    f_from_pencil,
    intersect,
    project_onto_pencil,
    unit_line,
)
from .matching import CandidatePair

DEGENERATE_REASON = "inlier pencil spans a single epipolar line"


@dataclass
class RansacConfig:
    max_iterations: int = 10000
    inlier_area_threshold_px: float = 3.0
    seed: int = 0
    min_pair_separation_deg: float = 2.0
    early_exit_confidence: float = 0.999
    max_sample_retries: int = 32
    degeneracy_span_rad: float = 0.1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.inlier_area_threshold_px <= 0 or self.min_pair_separation_deg <= 0:
            raise ValueError("thresholds must be positive")
        if not 0 <= self.early_exit_confidence < 1:
            raise ValueError("early_exit_confidence must be in [0, 1)")


@dataclass
class EstimationResult:
    f: np.ndarray
    h: PencilHomography
    inlier_pairs: list
    iterations_run: int
    inlier_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    degenerate: bool = False
    reason: str = ""
    sample_indices: tuple = ()
    failed_trials: dict = field(default_factory=dict)

    @property
    def inlier_count(self) -> int:
        return len(self.inlier_pairs)

    def to_dict(self) -> dict:
        return {
            "F": [float(v) for v in self.f.ravel()],
            "epipole_a": [float(v) for v in self.h.e],
            "epipole_b": [float(v) for v in self.h.e_prime],
            "inliers": [[c.line_a.id, c.line_b.id] for c in self.inlier_pairs],
            "inlier_count": self.inlier_count,
            "iterations_run": self.iterations_run,
            "degenerate": self.degenerate,
            "reason": self.reason,
        }


def write_result(path: str | os.PathLike, result: EstimationResult) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
        fh.write("\n")


# --- sampling -------------------------------------------------------------------------


def _line_angles(L):
    """Direction angle of each line in [0, pi)."""
    return np.mod(np.arctan2(L[..., 0], -L[..., 1]), np.pi)


def _angle_between(l1, l2):
    d = abs(_line_angles(l1) - _line_angles(l2))
    return min(d, np.pi - d)


def _draw_two(weights, rng):
    p = weights / weights.sum()
    i = int(rng.choice(len(weights), p=p))
    w2 = weights.copy()
    w2[i] = 0.0
    j = int(rng.choice(len(weights), p=w2 / w2.sum()))
    return i, j


def _sample_indices(weights, La, Lb, rng, min_sep_rad, max_retries):
    for _ in range(max_retries):
        i, j = _draw_two(weights, rng)
        if _angle_between(La[i], La[j]) >= min_sep_rad and _angle_between(Lb[i], Lb[j]) >= min_sep_rad:
            return i, j
    raise DegenerateSampleError("no well-separated pair of candidates after retries")


def _sampling_weights(cands):
    w = np.maximum(np.array([c.score for c in cands], dtype=float), 0.0)
    if np.count_nonzero(w) < 2:
        raise InsufficientCandidatesError("need at least two candidates with positive correlation")
    return w


def sample_two_pairs(
    cands: list[CandidatePair],
    rng: np.random.Generator,
    min_pair_separation_deg: float = 2.0,
    max_retries: int = 32,
) -> tuple[CandidatePair, CandidatePair]:
    """Two distinct candidates drawn with probability proportional to max(score, 0)."""
    if len(cands) < 2:
        raise InsufficientCandidatesError("need at least two candidates")
    w = _sampling_weights(cands)
    La = np.array([c.line_a.line for c in cands])
    Lb = np.array([c.line_b.line for c in cands])
    i, j = _sample_indices(w, La, Lb, rng, np.deg2rad(min_pair_separation_deg), max_retries)
    return cands[i], cands[j]


def propose_epipoles(p1: CandidatePair, p2: CandidatePair):
    """Epipole candidates ``l1 x l2`` in each image (possibly at infinity)."""
    try:
        e = intersect(p1.line_a.line, p2.line_a.line)
        ep = intersect(p1.line_b.line, p2.line_b.line)
    except DegenerateInputError as exc:
        raise DegenerateSampleError(str(exc)) from exc
    return e, ep


def _is_far(e, tol=1e-12):
    return abs(e[2]) <= tol * np.linalg.norm(e)


def epipole_distances(L: np.ndarray, e: np.ndarray, width: float) -> np.ndarray:
    """Distance (px) of each unit line to ``e``; angle times ``width`` for ideal ``e``."""
    L = unit_line(np.atleast_2d(L))
    e = np.asarray(e, dtype=float)
    if _is_far(e):
        s = np.abs(L[:, 0] * e[0] + L[:, 1] * e[1]) / np.hypot(e[0], e[1])
        return np.arcsin(np.clip(s, 0.0, 1.0)) * width
    return np.abs(L @ e) / abs(e[2])


def _third_index(La, Lb, used, e, ep, width_a, width_b):
    crit = epipole_distances(La, e, width_a) + epipole_distances(Lb, ep, width_b)
    crit[list(used)] = np.inf
    k = int(np.argmin(crit))
    if not np.isfinite(crit[k]):
        raise InsufficientCandidatesError("no candidate left for the third pair")
    return k, float(crit[k])


def third_pair(
    cands: list[CandidatePair],
    used,
    e,
    e_prime,
    rect_a: ImageRect,
    rect_b: ImageRect,
) -> tuple[CandidatePair, float]:
    """Candidate (other than ``used``) minimizing ``d(l, e) + d(l', e')``.

    ``used`` holds the two sampled candidates (or their indices). Returns the
    chosen pair and its criterion value.
    """
    if len(cands) < 3:
        raise InsufficientCandidatesError("need at least three candidates")
    idx = [u if isinstance(u, (int, np.integer)) else next(k for k, c in enumerate(cands) if c is u) for u in used]
    La = np.array([c.line_a.line for c in cands])
    Lb = np.array([c.line_b.line for c in cands])
    k, val = _third_index(La, Lb, idx, e, e_prime, rect_a.width, rect_b.width)
    return cands[k], val


def score_homography(
    h: PencilHomography, cands: list[CandidatePair], rect_b: ImageRect, threshold: float = 3.0
) -> tuple[int, list[CandidatePair]]:
    """Pairs whose mapped A-line encloses less than ``threshold * width`` px^2 with the B-line."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if not cands:
        return 0, []
    La = np.array([c.line_a.line for c in cands])
    Lb = np.array([c.line_b.line for c in cands])
    mask = _inlier_mask(h, La, Lb, rect_b, threshold)
    inl = [c for c, m in zip(cands, mask) if m]
    return len(inl), inl


def _inlier_mask(h, La, Lb, rect_b, threshold):
    mapped = apply_pencil_homography(h, La)
    return areas_between_lines(mapped, Lb, rect_b) < threshold * rect_b.width


def _trial(k, La, Lb, weights, cfg, rect_a, rect_b):
    rng = np.random.default_rng([cfg.seed, k])
    i, j = _sample_indices(
        weights, La, Lb, rng, np.deg2rad(cfg.min_pair_separation_deg), cfg.max_sample_retries
    )
    try:
        e = intersect(La[i], La[j])
        ep = intersect(Lb[i], Lb[j])
    except DegenerateInputError as exc:
        raise DegenerateSampleError(str(exc)) from exc
    t, _ = _third_index(La, Lb, (i, j), e, ep, rect_a.width, rect_b.width)
    Ta, Tb = rect_a.conditioning(), rect_b.conditioning()
    try:
        l3 = project_onto_pencil(La[t], La[[i, j]], Ta)
        l3p = project_onto_pencil(Lb[t], Lb[[i, j]], Tb)
        h = build_pencil_homography(
            [(La[i], Lb[i]), (La[j], Lb[j]), (l3, l3p)], e, ep, rect_a, rect_b
        )
    except (DegenerateInputError, InconsistentInputError) as exc:
        raise DegenerateSampleError(str(exc)) from exc
    return h, (i, j, t)


def _needed_trials(inlier_ratio, confidence, cap):
    if confidence <= 0:
        return cap
    if inlier_ratio >= 1.0:
        return 0
    denom = np.log1p(-(inlier_ratio**3))
    if denom == 0:
        return cap
    return min(cap, int(np.ceil(np.log1p(-confidence) / denom)))


def estimate_fundamental(
    cands: list[CandidatePair], rect_a: ImageRect, rect_b: ImageRect, cfg: RansacConfig | None = None
) -> EstimationResult:
    """Best pencil homography over up to ``cfg.max_iterations`` trials, and its F.

    Trial ``k`` draws from its own stream seeded by ``(cfg.seed, k)``; the
    winner is the model with the most inliers, earliest trial on ties.
    """
    cfg = cfg or RansacConfig()
    n = len(cands)
    if n < 3:
        raise InsufficientCandidatesError(f"need at least three candidates, got {n}")
    weights = _sampling_weights(cands)
    La = unit_line(np.array([c.line_a.line for c in cands]))
    Lb = unit_line(np.array([c.line_b.line for c in cands]))

    best = None  # (count, h, mask, sample)
    failures: Counter = Counter()
    needed = cfg.max_iterations
    k = 0
    while k < min(needed, cfg.max_iterations):
        try:
            h, sample = _trial(k, La, Lb, weights, cfg, rect_a, rect_b)
        except DegenerateSampleError as exc:
            failures[str(exc).split(":")[0]] += 1
            k += 1
            continue
        k += 1
        mask = _inlier_mask(h, La, Lb, rect_b, cfg.inlier_area_threshold_px)
        count = int(mask.sum())
        if best is None or count > best[0]:
            best = (count, h, mask, sample)
            needed = _needed_trials(count / n, cfg.early_exit_confidence, cfg.max_iterations)
    if best is None:
        raise EstimationFailure(
            f"all {k} RANSAC trials were degenerate", {"iterations": k, "failures": dict(failures)}
        )
    count, h, mask, sample = best
    idx = np.flatnonzero(mask)
    return EstimationResult(
        f=f_from_pencil(h),
        h=h,
        inlier_pairs=[cands[i] for i in idx],
        iterations_run=k,
        inlier_indices=idx,
        sample_indices=sample,
        failed_trials=dict(failures),
    )


def pencil_span(lines: np.ndarray, e: np.ndarray, rect: ImageRect, far_factor: float = 20.0) -> float:
    """Angular extent (rad) of a set of lines around the epipole ``e``.

    For an epipole at infinity, or farther than ``far_factor`` image
    diagonals from the image center, the extent is the spread of the lines'
    offsets across the image divided by the image width.
    """
    L = unit_line(np.atleast_2d(lines))
    if len(L) < 2:
        return 0.0
    e = np.asarray(e, dtype=float)
    diag = np.hypot(rect.width, rect.height)
    center = np.array([rect.width / 2, rect.height / 2])
    far = _is_far(e) or np.linalg.norm(e[:2] / e[2] - center) > far_factor * diag
    if far:
        d = e[:2] / np.linalg.norm(e[:2])
        normal = np.array([-d[1], d[0]])
        p, q, ok = clip_lines_to_rect(L, rect)
        mids = 0.5 * (p + q)
        mids = np.where(ok[:, None], mids, center)
        off = mids @ normal
        return float((off.max() - off.min()) / rect.width)
    ang = np.sort(_line_angles(L))
    gaps = np.diff(np.concatenate([ang, [ang[0] + np.pi]]))
    return float(np.pi - gaps.max())


def detect_degeneracy(
    result: EstimationResult, rect_a: ImageRect, angle_span_min_rad: float = 0.1
) -> EstimationResult:
    """Flag results whose inlier A-lines all lie near one epipolar line."""
    if result.inlier_count == 0:
        return replace(result, degenerate=True, reason="no inliers")
    La = np.array([c.line_a.line for c in result.inlier_pairs])
    span = pencil_span(La, result.h.e, rect_a)
    if span < angle_span_min_rad:
        return replace(result, degenerate=True, reason=DEGENERATE_REASON)
    return replace(result, degenerate=False, reason="")


def check_epipoles(result: EstimationResult) -> float:
    """Angular mismatch between ``result.h`` epipoles and the null vectors of ``result.f``."""
    e, ep = epipoles_of(result.f)
    worst = 0.0
    for a, b in ((e, result.h.e), (ep, result.h.e_prime)):
        b = b / np.linalg.norm(b)
        worst = max(worst, float(np.linalg.norm(np.cross(a, b))))
    return worst
