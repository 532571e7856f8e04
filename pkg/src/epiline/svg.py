"""SVG overlays of matched line pairs drawn over a mask frame."""

from __future__ import annotations

import os
from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c"]


def _mask_runs(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Horizontal runs ``(y, x0, length)`` of foreground pixels."""
    runs = []
    for y, row in enumerate(np.asarray(mask, dtype=bool)):
        d = np.diff(np.concatenate([[0], row.astype(np.int8), [0]]))
        starts = np.flatnonzero(d == 1)
        stops = np.flatnonzero(d == -1)
        runs.extend((y, int(a), int(b - a)) for a, b in zip(starts, stops))
    return runs


def overlay_svg(mask: np.ndarray, segments, title: str = "") -> str:
    """SVG text: the mask in grey, each ``(p, q)`` segment in a cycling color."""
    h, w = np.asarray(mask).shape
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f"<title>{escape(title)}</title>",
        f'<rect width="{w}" height="{h}" fill="black"/>',
        '<g fill="#808080">',
    ]
    out += [f'<rect x="{x}" y="{y}" width="{n}" height="1"/>' for y, x, n in _mask_runs(mask)]
    out.append('</g>\n<g stroke-width="1" fill="none">')
    for k, (p, q) in enumerate(segments):
        c = _PALETTE[k % len(_PALETTE)]
        out.append(
            f'<line x1="{p[0]:.3f}" y1="{p[1]:.3f}" x2="{q[0]:.3f}" y2="{q[1]:.3f}" stroke="{c}"/>'
        )
    out.append("</g>\n</svg>\n")
    return "\n".join(out)


def write_pair_overlays(path_a: str | os.PathLike, path_b: str | os.PathLike, mask_a, mask_b, cands, limit=50):
    """Write matching overlays for the first ``limit`` candidates; colors pair up across files."""
    sel = list(cands)[:limit]
    with open(path_a, "w") as fh:
        fh.write(overlay_svg(mask_a, [(c.line_a.p, c.line_a.q) for c in sel], "camera A"))
    with open(path_b, "w") as fh:
        fh.write(overlay_svg(mask_b, [(c.line_b.p, c.line_b.q) for c in sel], "camera B"))
