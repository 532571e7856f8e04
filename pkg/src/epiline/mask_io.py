"""Binary silhouette videos: PBM ingestion, packed container, heat maps.

Frames are stored pixel-major: for every pixel the N frame bits are packed
along the last axis (little bit order), so that the motion barcode of a set
of pixels is a bitwise OR over a handful of rows.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import MaskFormatError, MaskIOError

PACKED_MAGIC = b"EPLM"
_HEADER = struct.Struct("<4sIII")


class SilhouetteVideo:
    """A sequence of ``num_frames`` binary masks of identical size.

    Pixel ``(x, y)`` is column ``x`` and row ``y``; ``frame(i)[y, x]`` is True
    for foreground.
    """

    def __init__(self, packed: np.ndarray, num_frames: int):
        packed = np.asarray(packed, dtype=np.uint8)
        if packed.ndim != 3:
            raise MaskFormatError("packed video must have shape (H, W, bytes)")
        if num_frames < 1:
            raise MaskFormatError("a video needs at least one frame")
        if packed.shape[2] != (num_frames + 7) // 8:
            raise MaskFormatError(
                f"packed depth {packed.shape[2]} does not match {num_frames} frames"
            )
        if packed.shape[0] < 1 or packed.shape[1] < 1:
            raise MaskFormatError("empty frame dimensions")
        tail = num_frames % 8
        if tail and np.any(packed[:, :, -1] >> tail):
            packed = packed.copy()
            packed[:, :, -1] &= (1 << tail) - 1
        packed.flags.writeable = False
        self._packed = packed
        self._num_frames = int(num_frames)

    @classmethod
    def from_frames(
        cls, frames: Iterable[np.ndarray], width: int | None = None, height: int | None = None
    ) -> "SilhouetteVideo":
        """Build a video from an iterable of (H, W) masks.

        Frames are consumed eight at a time, so a generator never needs to be
        materialized in full.
        """
        chunks = []
        chunk: list[np.ndarray] = []
        n = 0
        shape = None if width is None else (height, width)
        for i, f in enumerate(frames):
            f = np.asarray(f)
            if f.ndim != 2:
                raise MaskFormatError(f"frame {i} is not two-dimensional")
            if shape is None:
                shape = f.shape
            elif f.shape != shape:
                raise MaskFormatError(
                    f"frame {i} has size {f.shape[1]}x{f.shape[0]}, "
                    f"expected {shape[1]}x{shape[0]}"
                )
            if f.dtype != bool:
                if np.any((f != 0) & (f != 1)):
                    raise MaskFormatError(f"frame {i} has entries outside {{0, 1}}")
                f = f.astype(bool)
            chunk.append(f)
            n += 1
            if len(chunk) == 8:
                chunks.append(np.packbits(np.stack(chunk), axis=0, bitorder="little")[0])
                chunk = []
        if chunk:
            chunks.append(np.packbits(np.stack(chunk), axis=0, bitorder="little")[0])
        if n == 0:
            raise MaskFormatError("a video needs at least one frame")
        return cls(np.stack(chunks, axis=-1), n)

    @property
    def width(self) -> int:
        return self._packed.shape[1]

    @property
    def height(self) -> int:
        return self._packed.shape[0]

    @property
    def num_frames(self) -> int:
        return self._num_frames

    @property
    def packed(self) -> np.ndarray:
        """Read-only (H, W, ceil(N/8)) array of per-pixel time bits."""
        return self._packed

    def __len__(self) -> int:
        return self._num_frames

    def frame(self, i: int) -> np.ndarray:
        if not 0 <= i < self._num_frames:
            raise IndexError(f"frame {i} out of range [0, {self._num_frames})")
        return ((self._packed[:, :, i // 8] >> (i % 8)) & 1).astype(bool)

    def frames(self) -> Iterator[np.ndarray]:
        for i in range(self._num_frames):
            yield self.frame(i)

    def to_array(self) -> np.ndarray:
        """All frames as an (N, H, W) boolean array."""
        bits = np.unpackbits(self._packed, axis=-1, bitorder="little")
        return np.moveaxis(bits[:, :, : self._num_frames], -1, 0).astype(bool)

    def __eq__(self, other):
        if not isinstance(other, SilhouetteVideo):
            return NotImplemented
        return (
            self._num_frames == other._num_frames
            and self._packed.shape == other._packed.shape
            and np.array_equal(self._packed, other._packed)
        )

    def __repr__(self):
        return f"SilhouetteVideo({self.width}x{self.height}, {self.num_frames} frames)"


@dataclass(frozen=True)
class HeatMap:
    counts: np.ndarray  # (H, W) int64, frames in which each pixel is foreground

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def height(self) -> int:
        return self.counts.shape[0]


def compute_heat_map(video: SilhouetteVideo) -> HeatMap:
    counts = np.bitwise_count(video.packed).sum(axis=-1, dtype=np.int64)
    return HeatMap(counts)


# --- PBM (P4) ---------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pbm(data: bytes, what: str) -> np.ndarray:
    if not data.startswith(b"P4"):
        raise MaskFormatError(f"{what}: not a binary PBM (P4) file")
    pos = 2
    vals = []
    for _ in range(2):
        m = _TOKEN.match(data, pos)
        if m is None or not m.group(1).isdigit():
            raise MaskFormatError(f"{what}: bad PBM header")
        vals.append(int(m.group(1)))
        pos = m.end()
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    w, h = vals
    if w < 1 or h < 1:
        raise MaskFormatError(f"{what}: empty PBM")
    row = (w + 7) // 8
    raster = data[pos : pos + row * h]
    if len(raster) < row * h:
        raise MaskFormatError(
            f"{what}: truncated raster at byte offset {pos + len(raster)}"
        )
    bits = np.unpackbits(np.frombuffer(raster, np.uint8).reshape(h, row), axis=1)
    return bits[:, :w].astype(bool)


def read_pbm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return _read_pbm(fh.read(), str(path))


def write_pbm(path: str | os.PathLike, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(b"P4\n%d %d\n" % (w, h))
        fh.write(np.packbits(mask, axis=1).tobytes())


def resolve_frame_path(pattern: str, index: int) -> str:
    """Expand a ``{}``-style or ``%d``-style frame path template."""
    if "{" in pattern:
        return pattern.format(index)
    if "%" in pattern:
        return pattern % index
    raise ValueError(f"path pattern {pattern!r} has no frame index placeholder")


def load_mask_sequence(path_pattern: str, frame_range: range | tuple[int, int]) -> SilhouetteVideo:
    """Load PBM frames ``frame_range`` (a ``range`` or ``(start, stop)``) in index order."""
    if not isinstance(frame_range, range):
        frame_range = range(*frame_range)

    def gen():
        for k, idx in enumerate(frame_range):
            path = resolve_frame_path(path_pattern, idx)
            try:
                with open(path, "rb") as fh:
                    data = fh.read()
            except OSError as exc:
                raise MaskIOError(f"cannot read frame {idx} ({path}): {exc.strerror}") from exc
            mask = _read_pbm(data, f"frame {idx}")
            yield mask

    frames = gen()
    try:
        first = next(frames)
    except StopIteration:
        raise MaskFormatError("empty frame range") from None

    def checked():
        yield first
        for k, mask in enumerate(frames, start=1):
            if mask.shape != first.shape:
                raise MaskFormatError(
                    f"frame {k} (index {frame_range[k]}) is {mask.shape[1]}x{mask.shape[0]}, "
                    f"expected {first.shape[1]}x{first.shape[0]}"
                )
            yield mask

    return SilhouetteVideo.from_frames(checked())


def save_mask_sequence(video: SilhouetteVideo, path_pattern: str, start: int = 0) -> list[str]:
    paths = []
    for i, mask in enumerate(video.frames()):
        path = resolve_frame_path(path_pattern, start + i)
        write_pbm(path, mask)
        paths.append(path)
    return paths


# --- packed container ---------------------------------------------------------


def save_packed(video: SilhouetteVideo, path: str | os.PathLike) -> None:
    """Write ``{magic, width, height, num_frames}`` then row-padded bit planes."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PACKED_MAGIC, video.width, video.height, video.num_frames))
        for i in range(0, video.num_frames, 8):
            n = min(8, video.num_frames - i)
            bits = np.unpackbits(video.packed[:, :, i // 8 : i // 8 + 1], axis=-1, bitorder="little")
            block = np.moveaxis(bits[:, :, :n], -1, 0)
            fh.write(np.packbits(block, axis=2).tobytes())


def load_packed(path: str | os.PathLike) -> SilhouetteVideo:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise MaskIOError(f"cannot read packed video {path}: {exc.strerror}") from exc
    return unpack_video(data)


def unpack_video(data: bytes) -> SilhouetteVideo:
    if len(data) < _HEADER.size:
        raise MaskFormatError(f"truncated header at byte offset {len(data)}")
    magic, w, h, n = _HEADER.unpack_from(data)
    if magic != PACKED_MAGIC:
        raise MaskFormatError(f"bad magic {magic!r} at byte offset 0")
    if w < 1 or h < 1 or n < 1:
        raise MaskFormatError("header declares an empty video at byte offset 4")
    row = (w + 7) // 8
    plane = row * h
    expected = _HEADER.size + plane * n
    if len(data) < expected:
        raise MaskFormatError(
            f"truncated container at byte offset {len(data)} (expected {expected} bytes)"
        )
    if len(data) > expected:
        raise MaskFormatError(f"trailing data at byte offset {expected}")
    planes = np.frombuffer(data, np.uint8, count=plane * n, offset=_HEADER.size)
    planes = planes.reshape(n, h, row)
    chunks = []
    for i in range(0, n, 8):
        block = np.unpackbits(planes[i : i + 8], axis=2)[:, :, :w]
        chunks.append(np.packbits(block, axis=0, bitorder="little")[0])
    return SilhouetteVideo(np.stack(chunks, axis=-1), n)
