"""Synthetic multi-camera silhouette videos of flying cubes with known geometry."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DegenerateInputError, DomainError, InvariantViolationError
from .geometry import ImageRect, normalize_f, skew
from .mask_io import SilhouetteVideo

NEAR_DEPTH = 1e-3
SCENARIOS = ("generic", "straight_path", "epipolar_plane_degenerate")


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    rotation: np.ndarray  # world -> camera
    center: np.ndarray
    image: ImageRect

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        K = np.asarray(self.intrinsics, dtype=float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-12, rtol=0) or np.linalg.det(R) < 0:
            raise InvariantViolationError("rotation must be orthonormal with det +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or np.any(np.tril(K, -1) != 0):
            raise InvariantViolationError("intrinsics must be upper triangular with positive focal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    @property
    def projection(self) -> np.ndarray:
        """3x4 matrix ``K [R | -R C]``."""
        return self.intrinsics @ np.hstack([self.rotation, -(self.rotation @ self.center)[:, None]])

    def to_camera(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.center) @ self.rotation.T

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "center": self.center.tolist(),
            "width": self.image.width,
            "height": self.image.height,
        }

    @classmethod
    def from_dict(cls, d) -> "CameraModel":
        return cls(
            np.array(d["intrinsics"]),
            np.array(d["rotation"]),
            np.array(d["center"]),
            ImageRect(d["width"], d["height"]),
        )


def look_at(center, target, focal: float, rect: ImageRect, up=(0.0, 0.0, 1.0)) -> CameraModel:
    """Pinhole camera at ``center`` whose optical axis points at ``target``.

    Image x runs right and image y runs down; ``up`` is world up.
    """
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        raise DegenerateInputError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0.0, rect.width / 2], [0.0, focal, rect.height / 2], [0.0, 0.0, 1.0]])
    return CameraModel(K, R, center, rect)


def ring_cameras(
    n: int,
    rng: np.random.Generator,
    radius: float = 8.0,
    focal: float = 600.0,
    rect: ImageRect = ImageRect(640, 480),
    height_range=(1.0, 3.0),
    jitter_deg: float = 10.0,
    spacing_deg: float = 90.0,
) -> list[CameraModel]:
    """``n`` cameras on a horizontal ring, all looking near the origin.

    Neighbours are ``spacing_deg`` apart in azimuth, shrunk to ``360 / n``
    when the ring would otherwise wrap.
    """
    step = min(spacing_deg, 360.0 / n)
    cams = []
    for k in range(n):
        az = np.deg2rad(step * k + rng.uniform(-jitter_deg, jitter_deg))
        h = rng.uniform(*height_range)
        c = np.array([radius * np.cos(az), radius * np.sin(az), h])
        target = rng.uniform(-0.3, 0.3, size=3)
        cams.append(look_at(c, target, focal, rect))
    return cams


def project(cam: CameraModel, x_world) -> np.ndarray:
    """Homogeneous image point ``K R (X - C)``."""
    Xc = cam.to_camera(x_world)
    if np.allclose(Xc, 0.0):
        raise DomainError("cannot project the camera center")
    return cam.intrinsics @ Xc


def project_points(cam: CameraModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (n, 2) and depths (n,) of world points (n, 3)."""
    Xc = cam.to_camera(np.atleast_2d(X))
    h = Xc @ cam.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return h[:, :2] / h[:, 2:3], Xc[:, 2]


def ground_truth_f(cam_a: CameraModel, cam_b: CameraModel) -> np.ndarray:
    """``F`` with ``x_b^T F x_a = 0`` for images of common world points."""
    if np.allclose(cam_a.center, cam_b.center):
        raise DegenerateInputError("cameras share their center")
    Pa, Pb = cam_a.projection, cam_b.projection
    e_b = Pb @ np.append(cam_a.center, 1.0)
    return normalize_f(skew(e_b) @ Pb @ np.linalg.pinv(Pa))


# --- scene ----------------------------------------------------------------------------


def _reflect(u, lo, hi):
    """Triangle wave folding ``u`` into ``[lo, hi]``."""
    span = hi - lo
    if np.any(span <= 0):
        return np.broadcast_to(lo, np.shape(u)).astype(float)
    w = np.mod(u - lo, 2 * span)
    return lo + np.where(w > span, 2 * span - w, w)


@dataclass(frozen=True, eq=False)
class BouncingTrajectory:
    """Straight motion reflected at the faces of an axis-aligned box."""

    start: np.ndarray
    velocity: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def position(self, t):
        return _reflect(self.start + self.velocity * t, self.lo, self.hi)

    def to_dict(self):
        return {"type": "bouncing", **{k: getattr(self, k).tolist() for k in ("start", "velocity", "lo", "hi")}}


@dataclass(frozen=True, eq=False)
class LinePathTrajectory:
    """Back-and-forth motion along the segment ``origin + s * direction``, s in [s_lo, s_hi]."""

    origin: np.ndarray
    direction: np.ndarray
    s0: float
    speed: float
    s_lo: float
    s_hi: float

    def position(self, t):
        s = _reflect(self.s0 + self.speed * t, self.s_lo, self.s_hi)
        return self.origin + s * self.direction

    def to_dict(self):
        return {
            "type": "line_path",
            "origin": self.origin.tolist(),
            "direction": self.direction.tolist(),
            "s0": self.s0,
            "speed": self.speed,
            "s_lo": self.s_lo,
            "s_hi": self.s_hi,
        }


@dataclass(frozen=True, eq=False)
class Cube:
    half_extent: float
    trajectory: BouncingTrajectory | LinePathTrajectory
    orientation: np.ndarray

    def corners(self, t) -> np.ndarray:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
        return self.trajectory.position(t) + (self.half_extent * signs) @ self.orientation.T

    def to_dict(self):
        return {
            "half_extent": self.half_extent,
            "orientation": self.orientation.tolist(),
            "trajectory": self.trajectory.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class CubeScene:
    cubes: list
    num_frames: int
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    path: tuple | None = None  # (point, direction) of the shared straight path, if any

    def to_dict(self):
        return {
            "num_frames": self.num_frames,
            "bounds_lo": self.bounds_lo.tolist(),
            "bounds_hi": self.bounds_hi.tolist(),
            "cubes": [c.to_dict() for c in self.cubes],
            "path": None if self.path is None else [np.asarray(v).tolist() for v in self.path],
        }


# --- rendering -------------------------------------------------------------------------

_CUBE_EDGES = [
    (i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1
]


def convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull (monotone chain) without collinear points."""
    P = np.unique(np.asarray(pts, dtype=float), axis=0)
    if len(P) < 3:
        return P

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2:
                a, b = out[-2], out[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(P)
    upper = half(P[::-1])
    return np.array(lower[:-1] + upper[:-1])


def fill_convex_polygon(poly: np.ndarray, width: int, height: int, out: np.ndarray | None = None) -> np.ndarray:
    """Set pixels whose centers lie inside (or on) a counter-clockwise convex polygon."""
    if out is None:
        out = np.zeros((height, width), dtype=bool)
    if len(poly) < 3:
        return out
    x0 = max(int(np.floor(poly[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(poly[:, 0].max() - 0.5)), width - 1)
    y0 = max(int(np.floor(poly[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(poly[:, 1].max() - 0.5)), height - 1)
    if x0 > x1 or y0 > y1:
        return out
    xs = np.arange(x0, x1 + 1) + 0.5
    ys = np.arange(y0, y1 + 1) + 0.5
    inside = np.ones((len(ys), len(xs)), dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    for a, b in zip(poly, nxt):
        ex, ey = b - a
        inside &= (ex * (ys[:, None] - a[1]) - ey * (xs[None, :] - a[0])) >= 0
    out[y0 : y1 + 1, x0 : x1 + 1] |= inside
    return out


def cube_silhouette_polygon(cam: CameraModel, corners: np.ndarray) -> np.ndarray | None:
    """Projected hull of a cube, clipped in 3D against the near plane."""
    Xc = cam.to_camera(corners)
    z = Xc[:, 2]
    if np.all(z <= 0):
        return None
    if np.all(z >= NEAR_DEPTH):
        V = Xc
    else:
        keep = [Xc[z >= NEAR_DEPTH]]
        for i, j in _CUBE_EDGES:
            if (z[i] - NEAR_DEPTH) * (z[j] - NEAR_DEPTH) < 0:
                t = (NEAR_DEPTH - z[i]) / (z[j] - z[i])
                keep.append((Xc[i] + t * (Xc[j] - Xc[i]))[None])
        V = np.concatenate(keep)
        if len(V) < 3:
            return None
    h = V @ cam.intrinsics.T
    return convex_hull_2d(h[:, :2] / h[:, 2:3])


def render_frame(cam: CameraModel, scene: CubeScene, frame: int) -> np.ndarray:
    if not 0 <= frame < scene.num_frames:
        raise IndexError(f"frame {frame} outside [0, {scene.num_frames})")
    W, H = int(cam.image.width), int(cam.image.height)
    out = np.zeros((H, W), dtype=bool)
    for cube in scene.cubes:
        poly = cube_silhouette_polygon(cam, cube.corners(frame))
        if poly is not None:
            fill_convex_polygon(poly, W, H, out)
    return out


# --- scenarios ---------------------------------------------------------------------------


# per-kind values for fields left as None; a busy walkway of small cubes keeps the
# shared path's heat well above the rest of the map
KIND_DEFAULTS = {
    "generic": {"num_cubes": 8, "thin": False},
    "straight_path": {"num_cubes": 30, "thin": True},
    "epipolar_plane_degenerate": {"num_cubes": 8, "thin": False},
}


@dataclass
class ScenarioConfig:
    kind: str = "generic"
    num_cubes: int | None = None
    size_range: tuple = (0.15, 0.35)
    speed_range: tuple = (0.05, 0.15)
    seed: int = 0
    num_frames: int = 800
    cameras: list | None = None
    num_cameras: int = 2
    width: int = 640
    height: int = 480
    focal: float = 600.0
    ring_radius: float = 8.0
    ring_spacing_deg: float = 90.0
    volume_half: tuple = (3.0, 3.0, 1.5)
    straight_fraction: float = 0.8
    flip_noise: float = 0.0
    thin: bool | None = None

    def resolved(self) -> "ScenarioConfig":
        """Copy with the kind's defaults filled in for fields left as None."""
        if self.kind not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        fill = {k: v for k, v in KIND_DEFAULTS[self.kind].items() if getattr(self, k) is None}
        return replace(self, **fill)

    def validate(self):
        if self.kind not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if self.num_cubes is not None and self.num_cubes < 1:
            raise ConfigError("need at least one cube")
        if self.num_frames < 1:
            raise ConfigError("need at least one frame")
        ncam = len(self.cameras) if self.cameras is not None else self.num_cameras
        if ncam < 2:
            raise ConfigError("need at least two cameras")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ConfigError("invalid cube size range")
        if not 0 <= self.flip_noise < 0.5:
            raise ConfigError("flip noise must be in [0, 0.5)")
        if not 0.8 <= self.straight_fraction <= 1.0:
            raise ConfigError("straight_fraction must be in [0.8, 1]")


@dataclass
class Simulation:
    videos: list
    cameras: list
    scene: CubeScene
    f_truth: dict = field(default_factory=dict)  # (i, j) -> F with x_j^T F x_i = 0
    config: ScenarioConfig | None = None

    def scene_record(self) -> dict:
        cfg = self.config
        return {
            "seed": None if cfg is None else cfg.seed,
            "kind": None if cfg is None else cfg.kind,
            "cameras": [c.to_dict() for c in self.cameras],
            "scene": self.scene.to_dict(),
        }


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _visible_fraction(cams, lo, hi, rng, n=2000):
    X = rng.uniform(lo, hi, size=(n, 3))
    ok = np.ones(n, dtype=bool)
    for c in cams:
        x, z = project_points(c, X)
        ok &= (z > 0) & (x[:, 0] >= 0) & (x[:, 0] < c.image.width) & (x[:, 1] >= 0) & (x[:, 1] < c.image.height)
    return ok.mean()


def _segment_in_box(point, direction, lo, hi):
    """Parameter range of ``point + s * direction`` inside the box."""
    s_lo, s_hi = -np.inf, np.inf
    for k in range(3):
        if abs(direction[k]) < 1e-12:
            if not lo[k] <= point[k] <= hi[k]:
                return None
            continue
        a = (lo[k] - point[k]) / direction[k]
        b = (hi[k] - point[k]) / direction[k]
        s_lo, s_hi = max(s_lo, min(a, b)), min(s_hi, max(a, b))
    return (s_lo, s_hi) if s_hi > s_lo else None


def _epipolar_plane_normal(ca, cb, point):
    n = np.cross(cb - ca, point - ca)
    return n / np.linalg.norm(n)


def _straight_path(kind, cams, lo, hi, rng):
    """Point and unit direction of the shared path through the volume."""
    ca, cb = cams[0].center, cams[1].center
    mid = 0.5 * (lo + hi)
    for _ in range(1000):
        point = mid + rng.uniform(-0.3, 0.3, size=3) * (hi - lo)
        if kind == "epipolar_plane_degenerate":
            n = _epipolar_plane_normal(ca, cb, point)
            base = cb - ca
            base /= np.linalg.norm(base)
            other = np.cross(n, base)
            ang = rng.uniform(-0.6, 0.6)
            d = np.cos(ang) * base + np.sin(ang) * other
        else:
            d = rng.normal(size=3)
            d[2] *= 0.3
            d /= np.linalg.norm(d)
            n = _epipolar_plane_normal(ca, cb, point)
            # keep the generic path well away from the epipolar plane through it
            if abs(d @ n) < 0.5:
                continue
        d /= np.linalg.norm(d)
        seg = _segment_in_box(point, d, lo, hi)
        if seg is not None and seg[1] - seg[0] > 0.5 * np.linalg.norm(hi - lo):
            return point, d, seg
    raise ConfigError("could not place a straight path inside the volume")


def build_scene(config: ScenarioConfig, cams: list, rng: np.random.Generator) -> CubeScene:
    config = config.resolved()
    half = np.asarray(config.volume_half, dtype=float)
    lo, hi = -half, half
    size_lo, size_hi = config.size_range
    if config.thin:
        size_lo, size_hi = size_lo / 2, size_hi / 2
    n_path = 0
    path = None
    if config.kind != "generic":
        if config.kind == "epipolar_plane_degenerate":
            n_path = config.num_cubes
        else:
            n_path = int(np.ceil(config.straight_fraction * config.num_cubes))
        point, d, seg = _straight_path(config.kind, cams, lo, hi, rng)
        path = (point, d)
    cubes = []
    for k in range(config.num_cubes):
        h = rng.uniform(size_lo, size_hi)
        rot = _random_rotation(rng)
        speed = rng.uniform(*config.speed_range)
        if k < n_path:
            s_lo, s_hi = seg
            traj = LinePathTrajectory(
                point, d, float(rng.uniform(s_lo, s_hi)), float(speed * rng.choice([-1, 1])), s_lo, s_hi
            )
        else:
            blo, bhi = lo + h, hi - h
            v = rng.normal(size=3)
            v *= speed / np.linalg.norm(v)
            traj = BouncingTrajectory(rng.uniform(blo, bhi), v, blo, bhi)
        cubes.append(Cube(float(h), traj, rot))
    return CubeScene(cubes, config.num_frames, lo, hi, path)


def simulate(config: ScenarioConfig) -> Simulation:
    """Render every camera's silhouette video and the pairwise ground-truth F."""
    config.validate()
    config = config.resolved()
    rng = np.random.default_rng(config.seed)
    rect = ImageRect(config.width, config.height)
    cams = config.cameras
    if cams is None:
        cams = ring_cameras(
            config.num_cameras,
            rng,
            radius=config.ring_radius,
            focal=config.focal,
            rect=rect,
            spacing_deg=config.ring_spacing_deg,
        )
    half = np.asarray(config.volume_half, dtype=float)
    if _visible_fraction(cams, -half, half, np.random.default_rng(config.seed + 1)) == 0:
        raise ConfigError("cameras share no common viewing volume")
    scene = build_scene(config, cams, rng)
    videos = []
    for ci, cam in enumerate(cams):
        noise_rng = np.random.default_rng([config.seed, 7919, ci])

        def frames(cam=cam, noise_rng=noise_rng):
            for t in range(scene.num_frames):
                f = render_frame(cam, scene, t)
                if config.flip_noise > 0:
                    f ^= noise_rng.random(f.shape) < config.flip_noise
                yield f

        videos.append(SilhouetteVideo.from_frames(frames(), int(cam.image.width), int(cam.image.height)))
    f_truth = {
        (i, j): ground_truth_f(cams[i], cams[j]) for i, j in itertools.combinations(range(len(cams)), 2)
    }
    return Simulation(videos, cams, scene, f_truth, config)


def ground_truth_correspondences(
    cam_a: CameraModel, cam_b: CameraModel, volume, count: int, rng: np.random.Generator, max_batches: int = 200
):
    """``count`` pairs of homogeneous image points of 3D points seen by both cameras.

    ``volume`` is ``(lo, hi)`` corners of the sampling box.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = (np.asarray(v, dtype=float) for v in volume)
    xa_all, xb_all = [], []
    got = 0
    for _ in range(max_batches):
        X = rng.uniform(lo, hi, size=(max(count, 256), 3))
        xa, za = project_points(cam_a, X)
        xb, zb = project_points(cam_b, X)
        ok = (za > 0) & (zb > 0)
        for x, c in ((xa, cam_a), (xb, cam_b)):
            ok &= (x[:, 0] >= 0) & (x[:, 0] <= c.image.width) & (x[:, 1] >= 0) & (x[:, 1] <= c.image.height)
        xa_all.append(xa[ok])
        xb_all.append(xb[ok])
        got += int(ok.sum())
        if got >= count:
            break
    if got < count:
        raise ConfigError("common visibility region is empty or too small")
    xa = np.concatenate(xa_all)[:count]
    xb = np.concatenate(xb_all)[:count]
    one = np.ones((count, 1))
    return np.hstack([xa, one]), np.hstack([xb, one])
