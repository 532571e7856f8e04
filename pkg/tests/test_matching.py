import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiline.barcode import BorderLine, MotionBarcode, raster_line_pixels, sample_border_lines
from epiline.errors import UndefinedCorrelationError
from epiline.geometry import ImageRect
from epiline.mask_io import HeatMap
from epiline.matching import (
    CandidatePair,
    TrafficLine,
    blocked_mutual_topk,
    correlation_matrix,
    detect_traffic_lines,
    filter_traffic_candidates,
    line_rho_theta,
    mutual_topk,
    mutual_topk_candidates,
    read_candidates,
    rho_theta_distance,
    select_top_candidates,
    write_candidates,
)

RECT = ImageRect(640, 480)


def _bc(bits):
    return MotionBarcode.from_bits(np.asarray(bits, bool))


def _random_barcodes(rng, n, N=200):
    out = []
    while len(out) < n:
        b = rng.random(N) < rng.uniform(0.1, 0.9)
        if 0 < b.sum() < N:
            out.append(b)
    return np.array(out)


def _brute_mutual(values, k):
    """Per-row and per-column rank by (value desc, index asc)."""
    n, m = values.shape
    row_top = [set(sorted(range(m), key=lambda j: (-values[i, j], j))[:k]) for i in range(n)]
    col_top = [set(sorted(range(n), key=lambda i: (-values[i, j], i))[:k]) for j in range(m)]
    return {(i, j) for i in range(n) for j in row_top[i] if i in col_top[j]}


# --- correlation ----------------------------------------------------------------------


def test_correlation_examples():
    b = _bc([1, 0, 1, 1, 0])
    assert correlation_matrix([b], [b]).tolist() == [[1.0]]
    assert correlation_matrix([b], [_bc(~b.bits)]).tolist() == [[-1.0]]
    with pytest.raises(UndefinedCorrelationError):
        correlation_matrix([b], [_bc([0] * 5)])


def test_correlation_matrix_vs_per_entry():
    rng = np.random.default_rng(0)
    A = _random_barcodes(rng, 100)
    B = _random_barcodes(rng, 100)
    M = correlation_matrix([_bc(a) for a in A], [_bc(b) for b in B])
    for i in range(100):
        for j in range(100):
            direct = np.corrcoef(A[i].astype(float), B[j].astype(float))[0, 1]
            assert abs(M[i, j] - direct) < 1e-12


# --- mutual top-k -----------------------------------------------------------------------


def test_mutual_topk_examples():
    assert mutual_topk(np.array([[0.3]]), 3) == [(0, 0)]
    assert mutual_topk(np.array([[0.9, 0.1], [0.2, 0.8]]), 1) == [(0, 0), (1, 1)]
    with pytest.raises(ValueError):
        mutual_topk(np.array([[0.3]]), 0)


def test_mutual_topk_vs_brute_force_1000_cases():
    rng = np.random.default_rng(1)
    for case in range(1000):
        n, m = rng.integers(1, 25, 2)
        k = int(rng.integers(1, 5))
        if case % 3 == 0:
            values = rng.integers(-3, 4, (n, m)) / 3.0  # heavy ties
        else:
            values = rng.uniform(-1, 1, (n, m))
        assert set(mutual_topk(values, k)) == _brute_mutual(values, k)


def test_mutual_topk_50_by_60():
    values = np.random.default_rng(2).uniform(-1, 1, (50, 60))
    assert set(mutual_topk(values, 3)) == _brute_mutual(values, 3)


def test_mutual_topk_transpose_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(200):
        v = rng.integers(-4, 5, (rng.integers(1, 15), rng.integers(1, 15))) / 4.0
        assert {(j, i) for i, j in mutual_topk(v.T, 2)} == set(mutual_topk(v, 2))


@pytest.mark.parametrize("block", [1, 7, 64, 512])
def test_blocked_mutual_topk_matches_dense(block):
    rng = np.random.default_rng(4)
    for _ in range(25):
        A = _random_barcodes(rng, int(rng.integers(1, 90)), N=int(rng.integers(8, 120)))
        B = _random_barcodes(rng, int(rng.integers(1, 90)), N=A.shape[1])
        k = int(rng.integers(1, 4))
        dense = correlation_matrix([_bc(a) for a in A], [_bc(b) for b in B])
        i, j, s = blocked_mutual_topk(A, B, k, block)
        assert set(zip(i.tolist(), j.tolist())) == set(mutual_topk(dense, k))
        assert np.allclose(s, dense[i, j], atol=1e-12)


def test_blocked_rejects_constant():
    with pytest.raises(UndefinedCorrelationError):
        blocked_mutual_topk(np.zeros((2, 8), bool), np.eye(8, dtype=bool)[:2])


# --- selection ---------------------------------------------------------------------------


def _pairs(scores):
    l = BorderLine.from_points((0, 0), (640, 480), 0)
    return [CandidatePair(l, l, float(s), i, i) for i, s in enumerate(scores)]


def test_select_examples():
    out = select_top_candidates(_pairs([0.5, 0.9, 0.7]), 2)
    assert [c.score for c in out] == [0.9, 0.7]
    assert [c.score for c in select_top_candidates(_pairs([0.1, 0.3, 0.2]), 1000)] == [0.3, 0.2, 0.1]


def test_select_never_rejects_higher_score():
    rng = np.random.default_rng(5)
    scores = rng.integers(0, 500, 5000) / 500
    pairs = _pairs(scores)
    out = select_top_candidates(pairs, 1000)
    assert len(out) == 1000
    kept = {c.a_index for c in out}
    rejected = [c.score for c in pairs if c.a_index not in kept]
    assert min(c.score for c in out) >= max(rejected)
    # ties broken by index
    keys = [(-c.score, c.a_index) for c in out]
    assert keys == sorted(keys)


def test_mutual_candidates_carry_lines():
    rng = np.random.default_rng(6)
    la = sample_border_lines(RECT, 5, rng)
    lb = sample_border_lines(RECT, 4, rng)
    v = rng.uniform(-1, 1, (5, 4))
    for c in mutual_topk_candidates(v, 2, la, lb):
        assert c.line_a is la[c.a_index] and c.line_b is lb[c.b_index]
        assert c.score == v[c.a_index, c.b_index]


# --- traffic lines -------------------------------------------------------------------------


def _heat_with_lines(lines, rng, noise=0.0, hot=60):
    counts = np.zeros((480, 640), np.int64)
    if noise:
        salt = rng.random(counts.shape) < noise
        counts[salt] = rng.integers(1, 6, salt.sum())
    for l in lines:
        px = raster_line_pixels(np.asarray(l, float), RECT)
        counts[px[:, 1], px[:, 0]] = hot
    return HeatMap(counts)


def _within_cell(t: TrafficLine, l, rho_step=1.0, theta_step=np.deg2rad(0.5)):
    """The detected cell is the planted line's own accumulator cell or a neighbour."""
    r0, t0 = line_rho_theta(np.asarray(l, float))
    r1, t1 = line_rho_theta(t.line)
    if abs(t0[0] - t1[0]) > np.pi / 2:  # compare across the theta wrap
        t1 = t1 + np.pi * np.sign(t0 - t1)
        r1 = -r1
    return (
        abs(np.round(r0[0] / rho_step) - np.round(r1[0] / rho_step)) <= 1
        and abs(np.round(t0[0] / theta_step) - np.round(t1[0] / theta_step)) <= 1
    )


def test_no_traffic_in_empty_heat():
    assert detect_traffic_lines(HeatMap(np.zeros((48, 64), np.int64))) == []


def test_single_hot_row():
    counts = np.zeros((480, 640), np.int64)
    counts[200] = 40
    found = detect_traffic_lines(HeatMap(counts))
    assert len(found) == 1
    assert _within_cell(found[0], [0.0, 1.0, -200.0])
    assert found[0].support > 0


def test_two_planted_lines_with_salt_noise():
    rng = np.random.default_rng(7)
    planted = [np.array([0.3, -1.0, 100.0]), np.array([1.0, 1.0, -500.0])]
    found = detect_traffic_lines(_heat_with_lines(planted, rng, noise=0.05))
    assert len(found) == 2
    for l in planted:
        assert any(_within_cell(t, l) for t in found)


def test_rho_theta_wrap():
    r, t = line_rho_theta(np.array([[0.0, 1.0, -5.0], [0.0, -1.0, 5.0]]))
    assert np.allclose(r, 5.0) and np.allclose(t, np.pi / 2)
    # near theta = 0 and theta = pi the same line
    dr, dt = rho_theta_distance(np.array(10.0), np.array(0.001), np.array(-10.0), np.array(np.pi - 0.001))
    assert dr == pytest.approx(0.0) and dt == pytest.approx(0.002)


# --- filtering ---------------------------------------------------------------------------


def _traffic(l):
    return TrafficLine(np.asarray(l, float) / np.hypot(l[0], l[1]), 10.0)


def test_filter_examples():
    hot = BorderLine.from_points((0, 100), (640, 100), 0)
    other = BorderLine.from_points((0, 0), (640, 480), 1)
    cands = [CandidatePair(hot, other, 0.9, 0, 1), CandidatePair(hot, hot, 0.8, 0, 0)]
    assert filter_traffic_candidates(cands, [], []) == cands
    ta = [_traffic([0, 1, -100])]
    tb = [_traffic([0, 1, -100])]
    out = filter_traffic_candidates(cands, ta, tb)
    assert out == [cands[0]]  # only A overlaps in the first pair


@settings(max_examples=100)
@given(st.integers(0, 10**6))
def test_filter_idempotent_and_order_preserving(seed):
    rng = np.random.default_rng(seed)
    la = sample_border_lines(RECT, 40, rng)
    lb = sample_border_lines(RECT, 40, rng)
    cands = [CandidatePair(a, b, 0.5, a.id, b.id) for a, b in zip(la, lb)]
    ta = [TrafficLine(l.line, 1.0) for l in la[:: int(rng.integers(2, 6))]]
    tb = [TrafficLine(l.line, 1.0) for l in lb[:: int(rng.integers(2, 6))]]
    once = filter_traffic_candidates(cands, ta, tb)
    assert filter_traffic_candidates(once, ta, tb) == once
    idx = [cands.index(c) for c in once]
    assert idx == sorted(idx)


def test_candidate_csv_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    la = sample_border_lines(RECT, 10, rng)
    lb = sample_border_lines(RECT, 10, rng)
    cands = [CandidatePair(a, b, float(rng.uniform(-1, 1)), a.id, b.id) for a, b in zip(la, lb)]
    write_candidates(tmp_path / "c.csv", cands)
    back = read_candidates(tmp_path / "c.csv")
    for c, d in zip(cands, back):
        assert c.score == d.score and c.line_a.id == d.line_a.id
        assert np.array_equal(c.line_a.p, d.line_a.p) and np.array_equal(c.line_b.q, d.line_b.q)
