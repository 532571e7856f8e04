import numpy as np
import pytest
from hypothesis import settings

from epiline.geometry import ImageRect, epipoles_of, unit_line
from epiline.simulator import ground_truth_f, look_at, project_points

settings.register_profile("default", deadline=None)
settings.load_profile("default")

RECT = ImageRect(640, 480)


class Rig:
    """Two cameras looking at the origin, with exact epipolar geometry."""

    def __init__(self, seed=0, baseline_deg=70.0):
        rng = np.random.default_rng(seed)
        az = np.deg2rad([0.0, baseline_deg]) + rng.uniform(-0.2, 0.2, 2)
        self.cams = [
            look_at(
                np.array([9 * np.cos(a), 9 * np.sin(a), rng.uniform(0.5, 2.5)]),
                rng.uniform(-0.3, 0.3, 3),
                600.0,
                RECT,
            )
            for a in az
        ]
        self.rect = RECT
        self.F = ground_truth_f(*self.cams)
        self.e, self.ep = epipoles_of(self.F)
        self.rng = rng

    def points(self, n, half=2.0):
        """Homogeneous projections of ``n`` world points visible in both images."""
        xa_all, xb_all = [], []
        while sum(len(x) for x in xa_all) < n:
            X = self.rng.uniform(-half, half, (4 * n, 3))
            xa, _ = project_points(self.cams[0], X)
            xb, _ = project_points(self.cams[1], X)
            ok = np.all((xa > 5) & (xa < [635, 475]) & (xb > 5) & (xb < [635, 475]), axis=1)
            xa_all.append(xa[ok])
            xb_all.append(xb[ok])
        one = np.ones((n, 1))
        return np.hstack([np.concatenate(xa_all)[:n], one]), np.hstack([np.concatenate(xb_all)[:n], one])

    def epipolar_pairs(self, n):
        """(n, 3) unit line stacks of exactly corresponding epipolar lines."""
        xa, _ = self.points(n)
        La = unit_line(np.cross(self.e, xa))
        Lb = unit_line(xa @ self.F.T)
        return La, Lb


@pytest.fixture
def rig():
    return Rig(0)


def random_lines(rng, n, rect=RECT):
    """Lines through two random points of a slightly enlarged rectangle."""
    lo = [-0.2 * rect.width, -0.2 * rect.height]
    hi = [1.2 * rect.width, 1.2 * rect.height]
    p = np.hstack([rng.uniform(lo, hi, (n, 2)), np.ones((n, 1))])
    q = np.hstack([rng.uniform(lo, hi, (n, 2)), np.ones((n, 1))])
    return np.cross(p, q)


# --- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
