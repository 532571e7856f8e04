"""End-to-end calibration runs: configuration, per-pair orchestration and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import barcode as bc
from .errors import ConfigError, DomainError, EpilineError
from .estimator import RansacConfig, detect_degeneracy, estimate_fundamental, write_result
from .geometry import (
    ImageRect,
    areas_between_lines,
    clip_lines_to_rect,
    epipoles_of,
    save_fundamental,
    symmetric_epipolar_distance,
    unit_line,
)
from .mask_io import HeatMap, SilhouetteVideo, compute_heat_map, load_mask_sequence, load_packed
from .matching import (
    CandidatePair,
    blocked_mutual_topk,
    detect_traffic_lines,
    filter_traffic_candidates,
    select_top_candidates,
    write_candidates,
)
from .simulator import CameraModel, ScenarioConfig, ground_truth_correspondences, ground_truth_f, simulate
from .svg import write_pair_overlays

# sub-stream tags for default_rng([seed, tag, ...])
_LINES_STREAM = 1
GT_STREAM = 2


@dataclass
class TrafficConfig:
    enabled: bool = True
    hot_fraction: float = 0.9
    rho_step: float = 1.0
    theta_step_deg: float = 0.5
    min_support_ratio: float = 0.3
    max_lines: int = 10
    rho_tol_px: float = 5.0
    theta_tol_rad: float = 0.02


@dataclass
class PipelineConfig:
    lines_per_camera: int = 80000
    q_min: float = 0.05
    q_max: float = 0.95
    mutual_k: int = 3
    candidate_limit: int = 1000
    thickness: float = 1.0
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    tp_factor: float = 3.0
    seed: int = 0
    scenario: dict | None = field(default_factory=dict)
    inputs: list | None = None
    cameras_file: str | None = None
    gt_points: int = 1000
    gt_volume: list = field(default_factory=lambda: [[-3.0, -3.0, -1.5], [3.0, 3.0, 1.5]])
    svg: bool = True
    svg_pairs: int = 50
    block: int = 512

    def validate(self) -> "PipelineConfig":
        for name in ("lines_per_camera", "mutual_k", "candidate_limit", "gt_points", "block", "svg_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.q_min < self.q_max <= 1:
            raise ConfigError("need 0 <= q_min < q_max <= 1")
        if not 0 <= self.traffic.hot_fraction <= 1:
            raise ConfigError("traffic.hot_fraction must be in [0, 1]")
        if self.thickness < 1:
            raise ConfigError("thickness must be >= 1")
        if self.tp_factor <= 0:
            raise ConfigError("tp_factor must be positive")
        if self.inputs is None and self.scenario is None:
            raise ConfigError("config needs either 'inputs' or 'scenario'")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            if "traffic" in d:
                d["traffic"] = TrafficConfig(**d["traffic"])
            if "ransac" in d:
                d["ransac"] = RansacConfig(**d["ransac"])
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return PipelineConfig.from_dict(d)


def apply_override(d: dict, key: str, value) -> None:
    """Set dotted ``key`` (e.g. ``ransac.max_iterations``) in a config dict."""
    *path, last = key.split(".")
    node = d
    for p in path:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    node[last] = value


def scenario_config(cfg: PipelineConfig) -> ScenarioConfig:
    sc = dict(cfg.scenario or {})
    sc.setdefault("seed", cfg.seed)
    for k in ("size_range", "speed_range", "volume_half"):
        if k in sc:
            sc[k] = tuple(sc[k])
    try:
        return ScenarioConfig(**sc)
    except TypeError as exc:
        raise ConfigError(f"bad scenario section: {exc}") from exc


# --- evaluation ----------------------------------------------------------------------


def true_positive_mask(lines: np.ndarray, e: np.ndarray, rect: ImageRect, factor: float) -> np.ndarray:
    """Lines within ``factor * rect.length`` area of the epipolar line through their midpoint."""
    L = unit_line(np.atleast_2d(lines))
    p, q, ok = clip_lines_to_rect(L, rect)
    mids = np.hstack([0.5 * (p + q), np.ones((len(L), 1))])
    T = np.cross(mids, np.asarray(e, dtype=float)[None])
    at_epipole = np.linalg.norm(T[:, :2], axis=1) < 1e-12
    T = np.where(at_epipole[:, None], L, T)  # every line through the epipole is epipolar
    area = areas_between_lines(L, T, rect)
    return ok & (area < factor * rect.length)


def true_positive_rate(
    cands: list[CandidatePair], f_truth, rect_a: ImageRect, rect_b: ImageRect, factor: float = 3.0
) -> float:
    """Fraction of pairs whose two lines are both near-epipolar under ``f_truth``.

    Each line is compared with the true epipolar line through its own
    clipped midpoint, in its own image.
    """
    if not cands:
        return 0.0
    e, ep = epipoles_of(f_truth)
    ta = true_positive_mask(np.array([c.line_a.line for c in cands]), e, rect_a, factor)
    tb = true_positive_mask(np.array([c.line_b.line for c in cands]), ep, rect_b, factor)
    return float(np.mean(ta & tb))


def evaluate_f(f, x, x_prime) -> dict:
    """Mean/median/max symmetric epipolar distance; points raising domain errors are counted apart."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(x_prime, dtype=float))
    if len(x) < 1 or len(x) != len(xp):
        raise ValueError("need at least one correspondence and equal-length point sets")
    d, errors = [], 0
    for a, b in zip(x, xp):
        try:
            d.append(symmetric_epipolar_distance(f, a, b))
        except DomainError:
            errors += 1
    if not d:
        return {"mean": None, "median": None, "max": None, "count": 0, "domain_errors": errors}
    d = np.array(d)
    return {
        "mean": float(d.mean()),
        "median": float(np.median(d)),
        "max": float(d.max()),
        "count": int(len(d)),
        "domain_errors": errors,
    }


# --- per-camera and per-pair stages ------------------------------------------------


@dataclass
class CameraLines:
    """Informative lines of one camera with their barcodes and traffic lines."""

    lines: list
    barcodes: list
    heat: HeatMap
    traffic: list
    rect: ImageRect
    sampled: int = 0
    first_frame: np.ndarray | None = None


def sample_camera_lines(rect: ImageRect, cfg: PipelineConfig, cam_index: int) -> list[bc.BorderLine]:
    rng = np.random.default_rng([cfg.seed, _LINES_STREAM, cam_index])
    lines = bc.sample_border_lines(rect, cfg.lines_per_camera, rng)
    return [l for l in lines if not bc.shares_edge(l, rect)]


def prepare_camera(video: SilhouetteVideo, cfg: PipelineConfig, cam_index: int) -> CameraLines:
    rect = ImageRect(video.width, video.height)
    lines = sample_camera_lines(rect, cfg, cam_index)
    codes = bc.line_barcodes(video, lines, cfg.thickness)
    keep = [k for k, b in enumerate(codes) if bc.is_informative(b, cfg.q_min, cfg.q_max)]
    heat = compute_heat_map(video)
    t = cfg.traffic
    traffic = (
        detect_traffic_lines(
            heat,
            hot_fraction=t.hot_fraction,
            hough_rho_step=t.rho_step,
            hough_theta_step=np.deg2rad(t.theta_step_deg),
            max_lines=t.max_lines,
            min_support_ratio=t.min_support_ratio,
        )
        if t.enabled
        else []
    )
    first = video.frame(0) if video.num_frames else None
    return CameraLines([lines[k] for k in keep], [codes[k] for k in keep], heat, traffic, rect, len(lines), first)


def match_cameras(ca: CameraLines, cb: CameraLines, cfg: PipelineConfig) -> tuple[list[CandidatePair], dict]:
    """Mutual top-k pairs, the top ``candidate_limit`` of them, then the traffic filter."""
    stats = {"informative_a": len(ca.lines), "informative_b": len(cb.lines)}
    if not ca.lines or not cb.lines:
        raise EpilineError("no informative lines in one of the cameras")
    i, j, v = blocked_mutual_topk(
        bc.barcode_matrix(ca.barcodes), bc.barcode_matrix(cb.barcodes), cfg.mutual_k, cfg.block
    )
    pairs = [CandidatePair(ca.lines[a], cb.lines[b], float(s), int(a), int(b)) for a, b, s in zip(i, j, v)]
    stats["mutual_pairs"] = len(pairs)
    top = select_top_candidates(pairs, cfg.candidate_limit) if pairs else []
    stats["selected"] = len(top)
    t = cfg.traffic
    kept = filter_traffic_candidates(top, ca.traffic, cb.traffic, t.rho_tol_px, t.theta_tol_rad) if t.enabled else top
    stats["after_traffic_filter"] = len(kept)
    return kept, stats


def _load_input(spec) -> SilhouetteVideo:
    if isinstance(spec, str):
        spec = {"packed": spec}
    if "packed" in spec:
        return load_packed(spec["packed"])
    if "pattern" in spec:
        return load_mask_sequence(spec["pattern"], (int(spec["start"]), int(spec["stop"])))
    raise ConfigError(f"input entry needs 'packed' or 'pattern': {spec!r}")


def load_cameras(path: str | os.PathLike) -> list[CameraModel]:
    with open(path) as fh:
        d = json.load(fh)
    return [CameraModel.from_dict(c) for c in d["cameras"]]


@dataclass
class Sources:
    """Videos (or per-camera load errors) and optional ground truth."""

    videos: list
    errors: dict
    cameras: list | None = None
    volume: tuple | None = None


def gather_sources(cfg: PipelineConfig) -> Sources:
    if cfg.inputs is not None:
        videos, errors = [], {}
        for k, spec in enumerate(cfg.inputs):
            try:
                videos.append(_load_input(spec))
            except (OSError, EpilineError, ValueError) as exc:
                videos.append(None)
                errors[k] = f"{type(exc).__name__}: {exc}"
        cams = load_cameras(cfg.cameras_file) if cfg.cameras_file else None
        lo, hi = (np.asarray(v, dtype=float) for v in cfg.gt_volume)
        return Sources(videos, errors, cams, (lo, hi))
    sim = simulate(scenario_config(cfg))
    return Sources(list(sim.videos), {}, list(sim.cameras), (sim.scene.bounds_lo, sim.scene.bounds_hi))


# --- orchestration -------------------------------------------------------------------

REPORT_NOTES = (
    "true_positive_rate compares each candidate line with the true epipolar line through "
    "that line's own clipped midpoint in its own image; a pair is true when both lines are"
)


def _rnd(x):
    return None if x is None else float(x)


def process_pair(i, j, cams: dict, src: Sources, cfg: PipelineConfig, out_dir: str | None) -> dict:
    ca, cb = cams[i], cams[j]
    entry = {"pair": [i, j], "status": "ok", "error": None}
    cands, stats = match_cameras(ca, cb, cfg)
    entry.update(stats)
    tag = f"{i}_{j}"
    if out_dir:
        write_candidates(os.path.join(out_dir, f"candidates_{tag}.csv"), cands)
    f_truth = None
    if src.cameras is not None:
        f_truth = ground_truth_f(src.cameras[i], src.cameras[j])
        entry["true_positive_rate"] = true_positive_rate(cands, f_truth, ca.rect, cb.rect, cfg.tp_factor)
    else:
        entry["true_positive_rate"] = None
    rcfg = dataclasses.replace(cfg.ransac, seed=cfg.seed)
    res = estimate_fundamental(cands, ca.rect, cb.rect, rcfg)
    res = detect_degeneracy(res, ca.rect, rcfg.degeneracy_span_rad)
    entry.update(
        inlier_count=res.inlier_count,
        iterations_run=res.iterations_run,
        degenerate=res.degenerate,
        reason=res.reason,
        F=[float(v) for v in res.f.ravel()],
    )
    if out_dir:
        save_fundamental(os.path.join(out_dir, f"F_{tag}.txt"), res.f)
        write_result(os.path.join(out_dir, f"estimate_{tag}.json"), res)
        if f_truth is not None:
            save_fundamental(os.path.join(out_dir, f"F_truth_{tag}.txt"), f_truth)
        if cfg.svg and ca.first_frame is not None and cb.first_frame is not None:
            write_pair_overlays(
                os.path.join(out_dir, f"overlay_{tag}_a.svg"),
                os.path.join(out_dir, f"overlay_{tag}_b.svg"),
                ca.first_frame,
                cb.first_frame,
                res.inlier_pairs,
                cfg.svg_pairs,
            )
    if src.cameras is not None:
        rng = np.random.default_rng([cfg.seed, GT_STREAM, i, j])
        xa, xb = ground_truth_correspondences(src.cameras[i], src.cameras[j], src.volume, cfg.gt_points, rng)
        ev = evaluate_f(res.f, xa, xb)
        entry.update(
            sed_mean=_rnd(ev["mean"]),
            sed_median=_rnd(ev["median"]),
            sed_max=_rnd(ev["max"]),
            sed_domain_errors=ev["domain_errors"],
        )
    return entry


def _summarize(pairs: list[dict]) -> dict:
    ok = [p for p in pairs if p["status"] == "ok"]

    def avg(key):
        vals = [p[key] for p in ok if p.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "pairs": len(pairs),
        "succeeded": len(ok),
        "failed": len(pairs) - len(ok),
        "degenerate": sum(1 for p in ok if p.get("degenerate")),
        "sed_mean": avg("sed_mean"),
        "sed_median": avg("sed_median"),
        "true_positive_rate": avg("true_positive_rate"),
        "inlier_count": avg("inlier_count"),
    }


def run_pipeline(cfg: PipelineConfig, out_dir: str | os.PathLike | None = None) -> dict:
    """Estimate F for every camera pair; returns the report (also written to ``out_dir``).

    Errors in one pair are recorded in its entry and the remaining pairs
    still run. Wall-clock timings go to a separate ``timings.json`` so the
    report itself is reproducible bit for bit.
    """
    cfg.validate()
    out = None if out_dir is None else os.fspath(out_dir)
    if out:
        os.makedirs(out, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    src = gather_sources(cfg)
    timings["sources"] = time.perf_counter() - t0
    cams, cam_errors = {}, dict(src.errors)
    for k, video in enumerate(src.videos):
        if video is None:
            continue
        t0 = time.perf_counter()
        try:
            cams[k] = prepare_camera(video, cfg, k)
        except (EpilineError, ValueError) as exc:
            cam_errors[k] = f"{type(exc).__name__}: {exc}"
        timings[f"camera_{k}"] = time.perf_counter() - t0
    pairs = []
    for i, j in itertools.combinations(range(len(src.videos)), 2):
        t0 = time.perf_counter()
        bad = [k for k in (i, j) if k in cam_errors]
        if bad:
            entry = {"pair": [i, j], "status": "error", "error": f"camera {bad[0]}: {cam_errors[bad[0]]}"}
        else:
            try:
                entry = process_pair(i, j, cams, src, cfg, out)
            except (EpilineError, ValueError, np.linalg.LinAlgError) as exc:
                entry = {"pair": [i, j], "status": "error", "error": f"{type(exc).__name__}: {exc}"}
        pairs.append(entry)
        timings[f"pair_{i}_{j}"] = time.perf_counter() - t0
    report = {
        "config": cfg.to_dict(),
        "notes": REPORT_NOTES,
        "cameras": {
            str(k): {"sampled_lines": c.sampled, "informative_lines": len(c.lines), "traffic_lines": len(c.traffic)}
            for k, c in sorted(cams.items())
        },
        "camera_errors": {str(k): v for k, v in sorted(cam_errors.items())},
        "pairs": pairs,
        "summary": _summarize(pairs),
    }
    if out:
        write_report(out, report)
        with open(os.path.join(out, "timings.json"), "w") as fh:
            json.dump({k: round(v, 3) for k, v in timings.items()}, fh, indent=2)
            fh.write("\n")
    return report


REPORT_COLUMNS = [
    "pair",
    "status",
    "sed_mean",
    "sed_median",
    "sed_max",
    "inlier_count",
    "true_positive_rate",
    "degenerate",
    "error",
]


def write_report(out_dir: str, report: dict) -> None:
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for p in report["pairs"]:
            row = [f"{p['pair'][0]}-{p['pair'][1]}"] + [p.get(c) for c in REPORT_COLUMNS[1:]]
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


def exit_code(report: dict) -> int:
    return 2 if report["summary"]["failed"] else 0
