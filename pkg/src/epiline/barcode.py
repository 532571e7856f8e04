"""Border-to-border image lines and their motion barcodes."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UndefinedCorrelationError
from .geometry import ImageRect, clip_line_to_rect, unit_line
from .mask_io import SilhouetteVideo

_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class BorderLine:
    p: np.ndarray
    q: np.ndarray
    line: np.ndarray = field(repr=False)
    id: int

    @classmethod
    def from_points(cls, p, q, id: int) -> "BorderLine":
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        line = np.cross([p[0], p[1], 1.0], [q[0], q[1], 1.0])
        return cls(p, q, unit_line(line), id)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p + self.q)


def shares_edge(line: BorderLine, rect: ImageRect) -> bool:
    """True when both endpoints lie on one image side (the line is that side)."""
    p, q = line.p, line.q
    return bool(
        (p[0] == q[0] and p[0] in (0.0, rect.width))
        or (p[1] == q[1] and p[1] in (0.0, rect.height))
    )


def _perimeter_points(s, rect):
    W, H = float(rect.width), float(rect.height)
    x = np.empty_like(s)
    y = np.empty_like(s)
    e = np.searchsorted([W, W + H, 2 * W + H], s, side="right")
    m = e == 0
    x[m], y[m] = s[m], 0.0
    m = e == 1
    x[m], y[m] = W, s[m] - W
    m = e == 2
    x[m], y[m] = W - (s[m] - W - H), H
    m = e == 3
    x[m], y[m] = 0.0, H - (s[m] - 2 * W - H)
    return np.stack([x, y], axis=-1), e


def sample_border_lines(rect: ImageRect, count: int, rng: np.random.Generator) -> list[BorderLine]:
    """``count`` lines through two points drawn uniformly on the image border.

    A pair is redrawn when its points coincide or sit on the same side less
    than one pixel apart.
    """
    if count <= 0:
        return []
    perim = 2.0 * (rect.width + rect.height)
    s = rng.uniform(0.0, perim, size=(count, 2))
    while True:
        P, E = _perimeter_points(s.ravel(), rect)
        P = P.reshape(count, 2, 2)
        E = E.reshape(count, 2)
        dist = np.hypot(*(P[:, 0] - P[:, 1]).T)
        bad = (dist == 0) | ((E[:, 0] == E[:, 1]) & (dist < 1.0))
        if not bad.any():
            break
        s[bad] = rng.uniform(0.0, perim, size=(int(bad.sum()), 2))
    return [BorderLine.from_points(P[i, 0], P[i, 1], i) for i in range(count)]


def supercover(p, q, rect: ImageRect) -> np.ndarray:
    """Pixels ``(x, y)`` whose cell contains a point of segment ``pq``.

    Cells are half-open; points on the right/bottom image border fall in the
    last column/row. Returns a sorted (n, 2) int array without duplicates.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q - p
    pts = [p[None], q[None]]
    ts = [np.array([0.0, 1.0])]
    for ax in (0, 1):
        if d[ax] == 0:
            continue
        lo, hi = sorted((p[ax], q[ax]))
        ks = np.arange(np.floor(lo) + 1, np.ceil(hi))
        if ks.size == 0:
            continue
        t = (ks - p[ax]) / d[ax]
        cross = p[None] + t[:, None] * d[None]
        cross[:, ax] = ks
        other = cross[:, 1 - ax]
        r = np.round(other)
        near = np.abs(other - r) < _SNAP
        other[near] = r[near]
        pts.append(cross)
        ts.append(t)
    t = np.unique(np.concatenate(ts))
    mids = 0.5 * (t[:-1] + t[1:])
    pts.append(p[None] + mids[:, None] * d[None])
    P = np.floor(np.concatenate(pts)).astype(np.int64)
    P[:, 0] = np.clip(P[:, 0], 0, int(np.ceil(rect.width)) - 1)
    P[:, 1] = np.clip(P[:, 1], 0, int(np.ceil(rect.height)) - 1)
    return np.unique(P, axis=0)


def _segment_distance(c, p, q):
    d = q - p
    t = np.clip(((c - p) @ d) / (d @ d), 0.0, 1.0)
    return np.hypot(*(c - (p + t[:, None] * d)).T)


def raster_line_pixels(line, rect: ImageRect, thickness: float = 1) -> np.ndarray:
    """Pixels incident to a line, as an (n, 2) int array of ``(x, y)``.

    ``line`` is a :class:`BorderLine` or a homogeneous line (clipped to
    ``rect`` first). Thickness 1 is the supercover of the segment; larger
    values add every pixel whose center lies within ``thickness / 2``.
    """
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    if isinstance(line, BorderLine):
        p, q = line.p, line.q
    else:
        seg = clip_line_to_rect(line, rect)
        if seg is None:
            return np.empty((0, 2), dtype=np.int64)
        p, q = seg
    cells = supercover(p, q, rect)
    if thickness == 1:
        return cells
    r = int(np.ceil(thickness / 2)) + 1
    off = np.stack(np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1)), -1).reshape(-1, 2)
    cand = np.unique((cells[:, None, :] + off[None]).reshape(-1, 2), axis=0)
    inside = (
        (cand[:, 0] >= 0) & (cand[:, 0] < rect.width) & (cand[:, 1] >= 0) & (cand[:, 1] < rect.height)
    )
    cand = cand[inside]
    near = _segment_distance(cand + 0.5, np.asarray(p, float), np.asarray(q, float)) <= thickness / 2
    return np.unique(np.concatenate([cells, cand[near]]), axis=0)


class MotionBarcode:
    """Per-frame incidence bits of one line, packed into 64-bit words."""

    __slots__ = ("words", "length", "ones_count")

    def __init__(self, words: np.ndarray, length: int):
        self.words = np.asarray(words, dtype=np.uint64)
        self.length = int(length)
        self.ones_count = int(np.bitwise_count(self.words).sum())

    @classmethod
    def from_bytes(cls, packed: np.ndarray, length: int) -> "MotionBarcode":
        """From little-bit-order bytes as stored in :class:`SilhouetteVideo`."""
        packed = np.asarray(packed, dtype=np.uint8)
        pad = (-len(packed)) % 8
        if pad:
            packed = np.concatenate([packed, np.zeros(pad, np.uint8)])
        return cls(packed.view("<u8"), length)

    @classmethod
    def from_bits(cls, bits) -> "MotionBarcode":
        bits = np.asarray(bits, dtype=bool)
        return cls.from_bytes(np.packbits(bits, bitorder="little"), len(bits))

    @property
    def bits(self) -> np.ndarray:
        raw = np.unpackbits(self.words.astype("<u8").view(np.uint8), bitorder="little")
        return raw[: self.length].astype(bool)

    def __len__(self):
        return self.length

    def __eq__(self, other):
        if not isinstance(other, MotionBarcode):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.words, other.words)

    def __repr__(self):
        return f"MotionBarcode({self.ones_count}/{self.length})"

    def to_string(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


def compute_barcode(video: SilhouetteVideo, pixels) -> MotionBarcode:
    """Bit ``i`` is set iff any of ``pixels`` is foreground in frame ``i``."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels) == 0:
        return MotionBarcode.from_bytes(np.zeros(video.packed.shape[2], np.uint8), video.num_frames)
    x, y = pixels[:, 0], pixels[:, 1]
    if x.min() < 0 or y.min() < 0 or x.max() >= video.width or y.max() >= video.height:
        raise DomainError("raster pixel outside the video frame")
    packed = np.bitwise_or.reduce(video.packed[y, x], axis=0)
    return MotionBarcode.from_bytes(packed, video.num_frames)


def _supercover_batch(P: np.ndarray, Q: np.ndarray, rect: ImageRect):
    """Cells of many segments at once, as a padded (m, K, 2) array and validity mask.

    Same cells as :func:`supercover` (possibly repeated), for segments inside ``rect``.
    """
    m = len(P)
    D = Q - P
    W, H = int(np.ceil(rect.width)), int(np.ceil(rect.height))
    parts_t = [np.zeros((m, 1)), np.ones((m, 1))]
    parts_pt = [P[:, None], Q[:, None]]
    parts_ok = [np.ones((m, 1), bool), np.ones((m, 1), bool)]
    for ax, n in ((0, W), (1, H)):
        ks = np.arange(1, n, dtype=float)[None]
        d = D[:, ax : ax + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ks - P[:, ax : ax + 1]) / d
        lo = np.minimum(P[:, ax], Q[:, ax])[:, None]
        hi = np.maximum(P[:, ax], Q[:, ax])[:, None]
        ok = (d != 0) & (ks > lo) & (ks < hi)
        t = np.where(ok, t, np.nan)
        cross = P[:, None] + t[..., None] * D[:, None]
        cross[..., ax] = ks
        other = cross[..., 1 - ax]
        r = np.round(other)
        near = np.abs(other - r) < _SNAP
        cross[..., 1 - ax] = np.where(near, r, other)
        parts_t.append(t)
        parts_pt.append(cross)
        parts_ok.append(ok)
    t = np.sort(np.concatenate(parts_t, axis=1), axis=1)  # NaNs sort last
    mids = 0.5 * (t[:, :-1] + t[:, 1:])
    mid_ok = np.isfinite(mids) & (t[:, 1:] != t[:, :-1])
    mids = np.where(mid_ok, mids, 0.0)
    parts_pt.append(P[:, None] + mids[..., None] * D[:, None])
    parts_ok.append(mid_ok)
    pts = np.concatenate(parts_pt, axis=1)
    ok = np.concatenate(parts_ok, axis=1)
    pts = np.where(ok[..., None], pts, 0.0)
    cells = np.floor(pts).astype(np.int64)
    cells[..., 0] = np.clip(cells[..., 0], 0, W - 1)
    cells[..., 1] = np.clip(cells[..., 1], 0, H - 1)
    return cells, ok


def line_barcodes(
    video: SilhouetteVideo, lines: list[BorderLine], thickness: float = 1, chunk: int = 128
) -> list[MotionBarcode]:
    """Barcodes of many lines; thickness 1 takes a vectorized path."""
    rect = ImageRect(video.width, video.height)
    if thickness != 1:
        return [compute_barcode(video, raster_line_pixels(l, rect, thickness)) for l in lines]
    flat = video.packed.reshape(-1, video.packed.shape[2])
    # extra all-zero row absorbs padded cells
    flat = np.concatenate([flat, np.zeros((1, flat.shape[1]), np.uint8)])
    sentinel = len(flat) - 1
    out = []
    for s in range(0, len(lines), chunk):
        part = lines[s : s + chunk]
        P = np.array([l.p for l in part], dtype=float)
        Q = np.array([l.q for l in part], dtype=float)
        cells, ok = _supercover_batch(P, Q, rect)
        idx = np.where(ok, cells[..., 1] * video.width + cells[..., 0], sentinel)
        packed = np.bitwise_or.reduce(flat[idx], axis=1)
        out.extend(MotionBarcode.from_bytes(row, video.num_frames) for row in packed)
    return out


def is_informative(b: MotionBarcode, q_min: float = 0.05, q_max: float = 0.95) -> bool:
    if not 0 <= q_min < q_max <= 1:
        raise ValueError("need 0 <= q_min < q_max <= 1")
    frac = b.ones_count / b.length
    return q_min <= frac <= q_max


def ncc(b: MotionBarcode, b_prime: MotionBarcode) -> float:
    """Normalized cross correlation of two barcodes.

    For 0/1 vectors the correlation reduces to
    ``(N n11 - n1 n2) / sqrt(n1 (N - n1) n2 (N - n2))``.
    """
    if b.length != b_prime.length:
        raise ValueError("barcodes differ in length")
    N, n1, n2 = b.length, b.ones_count, b_prime.ones_count
    if n1 in (0, N) or n2 in (0, N):
        raise UndefinedCorrelationError("correlation of a constant barcode is undefined")
    n11 = int(np.bitwise_count(b.words & b_prime.words).sum())
    val = (N * n11 - n1 * n2) / np.sqrt(float(n1 * (N - n1)) * float(n2 * (N - n2)))
    return float(min(1.0, max(-1.0, val)))


def barcode_matrix(barcodes: list[MotionBarcode]) -> np.ndarray:
    """(n, N) boolean matrix of barcode bits."""
    if not barcodes:
        return np.zeros((0, 0), dtype=bool)
    return np.stack([b.bits for b in barcodes])


# --- dumps ------------------------------------------------------------------------


def write_barcodes(path: str | os.PathLike, ids, barcodes) -> None:
    with open(path, "w") as fh:
        for i, b in zip(ids, barcodes):
            fh.write(f"{i} {b.to_string()}\n")


def read_barcodes(path: str | os.PathLike):
    ids, out = [], []
    with open(path) as fh:
        for ln in fh:
            if not ln.strip():
                continue
            i, bits = ln.split()
            ids.append(int(i))
            out.append(MotionBarcode.from_bits(np.frombuffer(bits.encode(), np.uint8) == ord("1")))
    return ids, out


def write_lines(path: str | os.PathLike, lines: list[BorderLine]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "px", "py", "qx", "qy"])
        for l in lines:
            w.writerow([l.id, repr(float(l.p[0])), repr(float(l.p[1])), repr(float(l.q[0])), repr(float(l.q[1]))])


def read_lines(path: str | os.PathLike) -> list[BorderLine]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        BorderLine.from_points(
            (float(r["px"]), float(r["py"])), (float(r["qx"]), float(r["qy"])), int(r["id"])
        )
        for r in rows
    ]
