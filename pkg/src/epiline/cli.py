"""Command line entry point: ``epiline <stage> --config FILE [--seed N] [--out DIR]``.

Stages share one output directory; each reads what the previous one wrote:

    simulate   cam_<k>.eplm, scene.json, F_truth_<i>_<j>.txt
    barcodes   lines_<k>.csv, barcodes_<k>.txt, traffic_<k>.json, images.json
    match      candidates_<i>_<j>.csv, match_<i>_<j>.json
    estimate   F_<i>_<j>.txt, estimate_<i>_<j>.json
    evaluate   evaluation.json
    pipeline   everything above in one pass, plus report.json/report.csv

Exit status: 0 on success, 2 when some camera pairs failed, 1 on fatal errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import itertools
import json
import logging
import os
import re
import sys

import numpy as np

from . import barcode as bc
from .errors import ConfigError, EpilineError
from .estimator import detect_degeneracy, estimate_fundamental, write_result
from .geometry import ImageRect, load_fundamental, save_fundamental
from .mask_io import save_packed
from .matching import TrafficLine, read_candidates, write_candidates
from .pipeline import (
    GT_STREAM,
    CameraLines,
    PipelineConfig,
    Sources,
    apply_override,
    evaluate_f,
    exit_code,
    gather_sources,
    load_cameras,
    match_cameras,
    prepare_camera,
    run_pipeline,
    scenario_config,
    true_positive_rate,
)
from .simulator import ground_truth_correspondences, ground_truth_f, simulate

log = logging.getLogger("epiline")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> PipelineConfig:
    d = {}
    if args.config:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        apply_override(d, key, _parse_value(value))
    if args.seed is not None:
        d["seed"] = args.seed
    return PipelineConfig.from_dict(d)


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _indexed(out, pattern):
    """Sorted ``{index: path}`` for files named like ``pattern`` with one ``{}``."""
    rx = re.compile(re.escape(pattern).replace(r"\{\}", r"(\d+)") + "$")
    found = {}
    for p in glob.glob(os.path.join(out, pattern.replace("{}", "*"))):
        m = rx.search(os.path.basename(p))
        if m:
            found[int(m.group(1))] = p
    return dict(sorted(found.items()))


def _pair_files(out, prefix, ext):
    rx = re.compile(rf"^{prefix}_(\d+)_(\d+)\.{ext}$")
    found = {}
    for name in os.listdir(out):
        m = rx.match(name)
        if m:
            found[(int(m.group(1)), int(m.group(2)))] = os.path.join(out, name)
    return dict(sorted(found.items()))


# --- stages ----------------------------------------------------------------------------


def cmd_simulate(cfg: PipelineConfig, out: str) -> int:
    sim = simulate(scenario_config(cfg))
    for k, v in enumerate(sim.videos):
        save_packed(v, os.path.join(out, f"cam_{k}.eplm"))
    _dump(os.path.join(out, "scene.json"), sim.scene_record())
    for (i, j), F in sorted(sim.f_truth.items()):
        save_fundamental(os.path.join(out, f"F_truth_{i}_{j}.txt"), F)
    log.info("simulated %d cameras x %d frames", len(sim.videos), sim.scene.num_frames)
    return 0


def _stage_sources(cfg: PipelineConfig, out: str) -> Sources:
    if cfg.inputs is None:
        packed = _indexed(out, "cam_{}.eplm")
        if packed:
            cfg = dataclasses.replace(cfg, inputs=[{"packed": p} for p in packed.values()])
    return gather_sources(cfg)


def _traffic_dict(t: TrafficLine) -> dict:
    return {"line": [float(v) for v in t.line], "support": t.support, "votes": t.votes, "rho": t.rho, "theta": t.theta}


def cmd_barcodes(cfg: PipelineConfig, out: str) -> int:
    src = _stage_sources(cfg, out)
    images, status = {}, 0
    for k, video in enumerate(src.videos):
        if video is None:
            log.error("camera %d: %s", k, src.errors[k])
            status = 2
            continue
        cam = prepare_camera(video, cfg, k)
        bc.write_lines(os.path.join(out, f"lines_{k}.csv"), cam.lines)
        bc.write_barcodes(os.path.join(out, f"barcodes_{k}.txt"), [l.id for l in cam.lines], cam.barcodes)
        _dump(os.path.join(out, f"traffic_{k}.json"), [_traffic_dict(t) for t in cam.traffic])
        images[str(k)] = [video.width, video.height]
        log.info("camera %d: %d informative of %d lines", k, len(cam.lines), cam.sampled)
    _dump(os.path.join(out, "images.json"), images)
    return status


def _images(out) -> dict:
    try:
        with open(os.path.join(out, "images.json")) as fh:
            return {int(k): ImageRect(*v) for k, v in json.load(fh).items()}
    except OSError as exc:
        raise ConfigError(f"{out}: run the barcodes stage first ({exc})") from exc


def _load_camera_lines(out, k, rect) -> CameraLines:
    lines = bc.read_lines(os.path.join(out, f"lines_{k}.csv"))
    ids, codes = bc.read_barcodes(os.path.join(out, f"barcodes_{k}.txt"))
    by_id = {l.id: l for l in lines}
    with open(os.path.join(out, f"traffic_{k}.json")) as fh:
        traffic = [
            TrafficLine(np.array(t["line"]), t["support"], t["votes"], t["rho"], t["theta"]) for t in json.load(fh)
        ]
    return CameraLines([by_id[i] for i in ids], codes, None, traffic, rect)


def cmd_match(cfg: PipelineConfig, out: str) -> int:
    rects = _images(out)
    status = 0
    for i, j in itertools.combinations(sorted(rects), 2):
        try:
            ca = _load_camera_lines(out, i, rects[i])
            cb = _load_camera_lines(out, j, rects[j])
            cands, stats = match_cameras(ca, cb, cfg)
        except (OSError, EpilineError, ValueError) as exc:
            log.error("pair %d-%d: %s", i, j, exc)
            status = 2
            continue
        write_candidates(os.path.join(out, f"candidates_{i}_{j}.csv"), cands)
        _dump(os.path.join(out, f"match_{i}_{j}.json"), stats)
    return status


def cmd_estimate(cfg: PipelineConfig, out: str) -> int:
    rects = _images(out)
    rcfg = dataclasses.replace(cfg.ransac, seed=cfg.seed)
    status = 0
    for (i, j), path in _pair_files(out, "candidates", "csv").items():
        try:
            cands = read_candidates(path)
            res = estimate_fundamental(cands, rects[i], rects[j], rcfg)
            res = detect_degeneracy(res, rects[i], rcfg.degeneracy_span_rad)
        except (OSError, EpilineError, ValueError, KeyError) as exc:
            log.error("pair %d-%d: %s", i, j, exc)
            status = 2
            continue
        save_fundamental(os.path.join(out, f"F_{i}_{j}.txt"), res.f)
        write_result(os.path.join(out, f"estimate_{i}_{j}.json"), res)
        if res.degenerate:
            log.warning("pair %d-%d flagged degenerate: %s", i, j, res.reason)
    return status


def _ground_truth(cfg: PipelineConfig, out: str):
    """Cameras and sampling volume from ``cameras_file`` or the simulate stage's scene.json."""
    path = cfg.cameras_file or os.path.join(out, "scene.json")
    try:
        with open(path) as fh:
            record = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"evaluation needs camera ground truth: {exc}") from exc
    scene = record.get("scene") or {}
    volume = (scene["bounds_lo"], scene["bounds_hi"]) if "bounds_lo" in scene else tuple(cfg.gt_volume)
    return load_cameras(path), volume


def cmd_evaluate(cfg: PipelineConfig, out: str) -> int:
    cams, volume = _ground_truth(cfg, out)
    rects = _images(out) if os.path.exists(os.path.join(out, "images.json")) else {}
    results, status = {}, 0
    for (i, j), path in _pair_files(out, "F", "txt").items():
        try:
            F = load_fundamental(path)
            rng = np.random.default_rng([cfg.seed, GT_STREAM, i, j])
            xa, xb = ground_truth_correspondences(cams[i], cams[j], volume, cfg.gt_points, rng)
            entry = evaluate_f(F, xa, xb)
            cpath = os.path.join(out, f"candidates_{i}_{j}.csv")
            if os.path.exists(cpath) and i in rects and j in rects:
                f_truth = ground_truth_f(cams[i], cams[j])
                entry["true_positive_rate"] = true_positive_rate(
                    read_candidates(cpath), f_truth, rects[i], rects[j], cfg.tp_factor
                )
        except (OSError, EpilineError, ValueError, IndexError) as exc:
            log.error("pair %d-%d: %s", i, j, exc)
            entry, status = {"error": str(exc)}, 2
        results[f"{i}-{j}"] = entry
    _dump(os.path.join(out, "evaluation.json"), results)
    return status


def cmd_pipeline(cfg: PipelineConfig, out: str) -> int:
    report = run_pipeline(cfg, out)
    for p in report["pairs"]:
        if p["status"] != "ok":
            log.error("pair %s: %s", p["pair"], p["error"])
    s = report["summary"]
    log.info("pairs ok %d/%d, mean SED %s px", s["succeeded"], s["pairs"], s["sed_mean"])
    return exit_code(report)


COMMANDS = {
    "simulate": cmd_simulate,
    "barcodes": cmd_barcodes,
    "match": cmd_match,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epiline", description="Camera pair calibration from motion barcodes.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default="epiline_out", help="output directory (default: %(default)s)")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. ransac.max_iterations=500"
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except (EpilineError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
