import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epiline.errors import MaskFormatError, MaskIOError
from epiline.mask_io import (
    SilhouetteVideo,
    compute_heat_map,
    load_mask_sequence,
    load_packed,
    read_pbm,
    save_mask_sequence,
    save_packed,
    unpack_video,
    write_pbm,
)


def _write_frames(tmp_path, frames):
    for i, f in enumerate(frames):
        write_pbm(tmp_path / f"f{i:03d}.pbm", f)
    return str(tmp_path / "f{:03d}.pbm")


def test_load_three_blank_frames(tmp_path):
    pattern = _write_frames(tmp_path, [np.zeros((2, 4), bool)] * 3)
    v = load_mask_sequence(pattern, range(3))
    assert (v.width, v.height, v.num_frames) == (4, 2, 3)
    assert not v.to_array().any()


def test_load_single_full_frame(tmp_path):
    pattern = _write_frames(tmp_path, [np.ones((2, 2), bool)])
    v = load_mask_sequence(pattern, (0, 1))
    assert (v.width, v.height, v.num_frames) == (2, 2, 1)
    assert v.to_array().all()


def test_size_mismatch_names_frame(tmp_path):
    pattern = _write_frames(tmp_path, [np.zeros((2, 4), bool), np.zeros((4, 2), bool)])
    with pytest.raises(MaskFormatError, match="frame 1"):
        load_mask_sequence(pattern, range(2))


def test_missing_file_names_index(tmp_path):
    pattern = _write_frames(tmp_path, [np.zeros((2, 4), bool)])
    with pytest.raises(MaskIOError, match="frame 1"):
        load_mask_sequence(pattern, range(2))


def test_percent_pattern_and_frame_order(tmp_path):
    frames = [np.eye(3, dtype=bool), np.zeros((3, 3), bool), np.ones((3, 3), bool)]
    for i, f in enumerate(frames):
        write_pbm(tmp_path / f"m_{i + 5}.pbm", f)
    v = load_mask_sequence(str(tmp_path / "m_%d.pbm"), range(5, 8))
    assert np.array_equal(v.to_array(), np.stack(frames))


def test_pbm_header_comments(tmp_path):
    p = tmp_path / "c.pbm"
    p.write_bytes(b"P4\n# made by hand\n3 2\n" + bytes([0b10100000, 0b01000000]))
    assert np.array_equal(read_pbm(p), [[1, 0, 1], [0, 1, 0]])


def test_pbm_truncated(tmp_path):
    p = tmp_path / "t.pbm"
    p.write_bytes(b"P4\n16 4\n\x00\x00")
    with pytest.raises(MaskFormatError, match="byte offset"):
        read_pbm(p)


def test_mask_sequence_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    v = SilhouetteVideo.from_frames(rng.random((11, 5, 13)) < 0.3)
    save_mask_sequence(v, str(tmp_path / "x{}.pbm"), start=2)
    assert load_mask_sequence(str(tmp_path / "x{}.pbm"), range(2, 13)) == v


def test_packed_round_trip_large(tmp_path):
    rng = np.random.default_rng(7)
    v = SilhouetteVideo(rng.integers(0, 256, size=(480, 640, 100), dtype=np.uint8), 800)
    save_packed(v, tmp_path / "big.eplm")
    w = load_packed(tmp_path / "big.eplm")
    assert w == v
    assert np.array_equal(w.frame(799), v.frame(799))


@settings(max_examples=60, deadline=None)
@given(
    arrays(
        bool,
        st.tuples(st.integers(1, 20), st.integers(1, 9), st.integers(1, 17)),
    )
)
def test_packed_round_trip_property(tmp_path_factory, frames):
    v = SilhouetteVideo.from_frames(frames)
    path = tmp_path_factory.mktemp("rt") / "v.eplm"
    save_packed(v, path)
    assert load_packed(path) == v
    assert np.array_equal(v.to_array(), frames)


def test_corrupt_magic(tmp_path):
    v = SilhouetteVideo.from_frames(np.zeros((2, 3, 3), bool))
    save_packed(v, tmp_path / "v.eplm")
    data = bytearray((tmp_path / "v.eplm").read_bytes())
    data[:4] = b"XXXX"
    with pytest.raises(MaskFormatError, match="magic"):
        unpack_video(bytes(data))


def test_truncated_container_reports_offset(tmp_path):
    v = SilhouetteVideo.from_frames(np.ones((9, 4, 12), bool))
    save_packed(v, tmp_path / "v.eplm")
    data = (tmp_path / "v.eplm").read_bytes()
    with pytest.raises(MaskFormatError, match=f"byte offset {len(data) - 5}"):
        unpack_video(data[:-5])
    with pytest.raises(MaskFormatError, match="byte offset 6"):
        unpack_video(data[:6])
    with pytest.raises(MaskFormatError, match="trailing"):
        unpack_video(data + b"\0")


def test_missing_packed_file(tmp_path):
    with pytest.raises(MaskIOError):
        load_packed(tmp_path / "nope.eplm")


def test_heat_map_examples():
    assert not compute_heat_map(SilhouetteVideo.from_frames(np.zeros((5, 3, 4), bool))).counts.any()
    full = compute_heat_map(SilhouetteVideo.from_frames(np.ones((5, 3, 4), bool)))
    assert (full.counts == 5).all()
    frames = np.zeros((2, 3, 4), bool)
    frames[0, 1, 2] = True
    h = compute_heat_map(SilhouetteVideo.from_frames(frames)).counts
    assert h[1, 2] == 1 and h.sum() == 1


@settings(max_examples=100, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 30), st.integers(1, 6), st.integers(1, 6))))
def test_heat_map_matches_frame_sum(frames):
    h = compute_heat_map(SilhouetteVideo.from_frames(frames))
    acc = np.zeros(frames.shape[1:], np.int64)
    for f in frames:
        acc += f
    assert np.array_equal(h.counts, acc)
    assert h.counts.sum() == frames.sum()
    assert (h.counts <= len(frames)).all()


def test_from_frames_rejects_non_binary():
    with pytest.raises(MaskFormatError, match="frame 1"):
        SilhouetteVideo.from_frames([np.zeros((2, 2), int), np.full((2, 2), 2)])
    with pytest.raises(MaskFormatError):
        SilhouetteVideo.from_frames([])


def test_video_is_read_only():
    v = SilhouetteVideo.from_frames(np.zeros((3, 2, 2), bool))
    with pytest.raises(ValueError):
        v.packed[0, 0, 0] = 1
