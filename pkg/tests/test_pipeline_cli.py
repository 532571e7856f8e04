import json
import os

import numpy as np
import pytest

from conftest import RECT, random_lines
from epiline.barcode import BorderLine
from epiline.cli import main
from epiline.errors import ConfigError
from epiline.geometry import clip_line_to_rect, load_fundamental, point_line_distance
from epiline.matching import CandidatePair
from epiline.pipeline import (
    PipelineConfig,
    apply_override,
    evaluate_f,
    exit_code,
    load_config,
    run_pipeline,
    true_positive_rate,
)

SMALL = {
    "lines_per_camera": 3000,
    "seed": 3,
    "scenario": {"num_frames": 160},
    "gt_points": 300,
    "svg_pairs": 10,
}


def _cands(La, Lb):
    out = []
    for k, (a, b) in enumerate(zip(La, Lb)):
        sa, sb = clip_line_to_rect(a, RECT), clip_line_to_rect(b, RECT)
        if sa is None or sb is None:
            continue
        out.append(CandidatePair(BorderLine.from_points(*sa, k), BorderLine.from_points(*sb, k), 1.0, k, k))
    return out


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_pipeline(PipelineConfig.from_dict(SMALL), out)
    return out, report


# --- configuration -----------------------------------------------------------------------


def test_config_defaults_and_strictness(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.mutual_k, cfg.candidate_limit, cfg.ransac.max_iterations, cfg.tp_factor) == (3, 1000, 10000, 3.0)
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"no_such_key": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"q_min": 0.9, "q_max": 0.1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"ransac": {"max_iterations": 0}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"scenario": None})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"mutual_k": 2, "ransac": {"seed": 9}}))
    cfg = load_config(p)
    assert cfg.mutual_k == 2 and cfg.ransac.seed == 9
    assert PipelineConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_apply_override():
    d = {"ransac": {"seed": 1}}
    apply_override(d, "ransac.max_iterations", 5)
    apply_override(d, "traffic.enabled", False)
    apply_override(d, "seed", 4)
    assert d == {"ransac": {"seed": 1, "max_iterations": 5}, "traffic": {"enabled": False}, "seed": 4}
    with pytest.raises(ConfigError):
        apply_override({"seed": 1}, "seed.x", 2)


# --- evaluation ----------------------------------------------------------------------------


def test_true_positive_rate_examples(rig):
    La, Lb = rig.epipolar_pairs(200)
    assert true_positive_rate(_cands(La, Lb), rig.F, RECT, RECT) == 1.0
    rng = np.random.default_rng(0)
    rand = _cands(random_lines(rng, 500), random_lines(rng, 500))
    assert true_positive_rate(rand, rig.F, RECT, RECT) < 0.02
    assert true_positive_rate([], rig.F, RECT, RECT) == 0.0


def test_true_positive_needs_both_lines(rig):
    La, Lb = rig.epipolar_pairs(50)
    rng = np.random.default_rng(1)
    mixed = _cands(La, random_lines(rng, 50))
    assert true_positive_rate(mixed, rig.F, RECT, RECT) < 0.1


def test_evaluate_f_examples(rig):
    x, xp = rig.points(300)
    ev = evaluate_f(rig.F, x, xp)
    assert ev["mean"] < 1e-9 and ev["count"] == 300 and ev["domain_errors"] == 0
    moved = xp + np.array([2.0, 0.0, 0.0])
    ev = evaluate_f(rig.F, x, moved)
    # the shifted image's half is at most 2 px; the other half follows from the shared residual
    for a, b in zip(x, moved):
        assert point_line_distance(b, rig.F @ a) <= 2.0 + 1e-9
    direct = [0.5 * (point_line_distance(b, rig.F @ a) + point_line_distance(a, rig.F.T @ b)) for a, b in zip(x, moved)]
    assert ev["mean"] == pytest.approx(np.mean(direct), abs=1e-12)
    assert ev["max"] >= ev["median"] >= 0


def test_evaluate_f_counts_domain_errors(rig):
    x, xp = rig.points(10)
    x = np.vstack([x, [[1.0, 2.0, 0.0]], rig.e[None]])
    xp = np.vstack([xp, xp[:2]])
    ev = evaluate_f(rig.F, x, xp)
    assert ev["count"] == 10 and ev["domain_errors"] == 2
    with pytest.raises(ValueError):
        evaluate_f(rig.F, np.zeros((0, 3)), np.zeros((0, 3)))


# --- end to end ---------------------------------------------------------------------------


def test_small_run_report(small_run):
    out, report = small_run
    assert [p["pair"] for p in report["pairs"]] == [[0, 1]]
    p = report["pairs"][0]
    assert p["status"] == "ok"
    assert 0 <= p["true_positive_rate"] <= 1
    assert p["sed_mean"] >= 0 and p["sed_median"] >= 0 and p["sed_max"] >= p["sed_mean"]
    assert p["inlier_count"] >= 3 and p["after_traffic_filter"] <= 1000
    assert exit_code(report) == 0
    for name in (
        "report.json",
        "report.csv",
        "timings.json",
        "candidates_0_1.csv",
        "F_0_1.txt",
        "F_truth_0_1.txt",
        "estimate_0_1.json",
        "overlay_0_1_a.svg",
        "overlay_0_1_b.svg",
    ):
        assert (out / name).exists(), name
    F = load_fundamental(out / "F_0_1.txt")
    assert np.array_equal(F.ravel(), np.array(p["F"]))
    svg = (out / "overlay_0_1_a.svg").read_text()
    assert svg.startswith("<svg") and "<line" in svg


def test_pipeline_is_deterministic(small_run, tmp_path):
    out, _ = small_run
    run_pipeline(PipelineConfig.from_dict(SMALL), tmp_path)
    for name in ("report.json", "report.csv", "F_0_1.txt", "candidates_0_1.csv", "estimate_0_1.json"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_svg_does_not_change_numbers(small_run, tmp_path):
    _, report = small_run
    other = run_pipeline(PipelineConfig.from_dict({**SMALL, "svg": False}), tmp_path)
    assert other["pairs"] == report["pairs"]
    assert not (tmp_path / "overlay_0_1_a.svg").exists()


def test_staged_cli_matches_pipeline(small_run, tmp_path):
    out, report = small_run
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    stage = tmp_path / "stages"
    for cmd in ("simulate", "barcodes", "match", "estimate", "evaluate"):
        assert main([cmd, "--config", str(cfg), "--out", str(stage)]) == 0, cmd
    assert (stage / "F_0_1.txt").read_bytes() == (out / "F_0_1.txt").read_bytes()
    assert (stage / "candidates_0_1.csv").read_bytes() == (out / "candidates_0_1.csv").read_bytes()
    ev = json.loads((stage / "evaluation.json").read_text())["0-1"]
    p = report["pairs"][0]
    assert ev["mean"] == p["sed_mean"] and ev["true_positive_rate"] == p["true_positive_rate"]


def test_cli_pipeline_with_overrides(tmp_path):
    code = main(
        [
            "pipeline",
            "--out",
            str(tmp_path),
            "--seed",
            "5",
            "--set",
            "lines_per_camera=1500",
            "--set",
            "scenario.num_frames=100",
            "--set",
            "svg=false",
            "--set",
            "gt_points=50",
        ]
    )
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["seed"] == 5 and report["config"]["lines_per_camera"] == 1500


def test_missing_input_is_a_pair_error(tmp_path):
    sim_dir = tmp_path / "sim"
    assert main(["simulate", "--out", str(sim_dir), "--set", "scenario.num_frames=60", "--set", "scenario.num_cameras=3"]) == 0
    cfg = {
        "lines_per_camera": 1500,
        "inputs": [str(sim_dir / "cam_0.eplm"), str(sim_dir / "cam_1.eplm"), str(tmp_path / "missing.eplm")],
        "svg": False,
    }
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    code = main(["pipeline", "--config", str(p), "--out", str(tmp_path / "o")])
    assert code == 2
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    status = {tuple(e["pair"]): e["status"] for e in report["pairs"]}
    assert status == {(0, 1): "ok", (0, 2): "error", (1, 2): "error"}
    assert "camera 2" in report["pairs"][1]["error"]
    # no ground truth was given, so the rate is reported as unknown
    assert report["pairs"][0]["true_positive_rate"] is None


def test_fatal_errors_exit_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["pipeline", "--set", "nonsense=1", "--out", str(tmp_path)]) == 1
    assert main(["estimate", "--out", str(tmp_path / "empty")]) == 1
    assert not os.path.exists(tmp_path / "report.json")
