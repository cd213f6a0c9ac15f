"""Synthetic calibration experiments: board and drone targets, ground-truth
distortion, and forward-projected detections.

Image formation is analytic (project each target point through the
ground-truth camera). The only raster produced here is :func:`paint_led`,
used to exercise the LED detector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .camera_model import (
    Intrinsics,
    LensState,
    Pose,
    SensorSpec,
    cfl_mm_to_px,
    fsf_plane,
    project,
    rotation_about,
    thin_lens_cfl,
)

if TYPE_CHECKING:
    from .detections import DetectionSet

log = logging.getLogger(__name__)

BOARD_ROWS = 8
BOARD_COLS = 11
DEFAULT_CAM_HEIGHT_M = 1.44
DEFAULT_MARGIN_M = 0.20
PLACEMENT_BORDER_FRAC = 0.02
DEFAULT_K1_MIN = -0.20


class InfeasibleExperimentError(ValueError):
    """No calibration target can be placed for the requested lens state."""


class DegeneratePathError(ValueError):
    """The flight-path margin swallows the footprint."""


@dataclass(frozen=True, eq=False)
class TargetModel:
    """3D target points normalized into the unit ball.

    ``points_3d * scale_m`` gives metric coordinates relative to the target
    centroid (the normalization removes the centroid and divides by the
    largest radius).
    """

    points_3d: np.ndarray
    planar: bool
    scale_m: float = 1.0

    def __post_init__(self):
        pts = np.array(self.points_3d, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("target has no points")
        if np.max(np.linalg.norm(pts, axis=1)) > 1.0 + 1e-12:
            raise ValueError("target points must lie within the unit sphere")
        if not self.scale_m > 0:
            raise ValueError("target scale must be positive")
        pts.flags.writeable = False
        object.__setattr__(self, "points_3d", pts)
        object.__setattr__(self, "planar", bool(self.planar))

    @classmethod
    def from_points(cls, points_m) -> "TargetModel":
        pts = np.asarray(points_m, dtype=np.float64).reshape(-1, 3)
        centered = pts - pts.mean(axis=0)
        scale = float(np.max(np.linalg.norm(centered, axis=1)))
        if scale == 0.0:
            scale = 1.0
        normalized = centered / scale
        # guard the unit-ball invariant against round-off in the division
        over = np.linalg.norm(normalized, axis=1).max()
        if over > 1.0:
            normalized /= over
        return cls(normalized, planar=is_planar(centered), scale_m=scale)

    @property
    def n_points(self) -> int:
        return self.points_3d.shape[0]

    @property
    def metric_points(self) -> np.ndarray:
        return self.points_3d * self.scale_m


def is_planar(points, rel_tol: float = 1e-9) -> bool:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 4:
        return True
    centered = pts - pts.mean(axis=0)
    extent = np.max(np.linalg.norm(centered, axis=1))
    if extent == 0:
        return True
    sv = np.linalg.svd(centered, compute_uv=False)
    normal_spread = sv[2] / math.sqrt(pts.shape[0])
    return bool(normal_spread <= rel_tol * extent)


@dataclass(frozen=True)
class BoardSpec:
    """AprilGrid-style board; tag geometry scales with width (6 mm tags and
    1.8 mm gaps on the 100 mm board)."""

    width_mm: float
    height_mm: float
    rows: int = BOARD_ROWS
    cols: int = BOARD_COLS
    tag_size_mm: float | None = None
    tag_spacing_mm: float | None = None

    def __post_init__(self):
        if self.tag_size_mm is None:
            object.__setattr__(self, "tag_size_mm", 6.0 * self.width_mm / 100.0)
        if self.tag_spacing_mm is None:
            object.__setattr__(self, "tag_spacing_mm", 1.8 * self.width_mm / 100.0)

    @property
    def n_corners(self) -> int:
        return self.rows * self.cols * 4

    def outline_m(self) -> np.ndarray:
        """Board substrate corners in the board frame (metres, centred)."""
        hw, hh = self.width_mm / 2000.0, self.height_mm / 2000.0
        return np.array([[-hw, -hh, 0.0], [hw, -hh, 0.0], [hw, hh, 0.0], [-hw, hh, 0.0]])


STANDARD_BOARDS = (
    BoardSpec(100.0, 75.0),
    BoardSpec(200.0, 150.0),
    BoardSpec(400.0, 300.0),
    BoardSpec(800.0, 600.0),
)


def board_corner_points_m(spec: BoardSpec) -> np.ndarray:
    """Tag corners in the board frame (metres), centred on the board.

    Tags are row-major; each tag lists its corners top-left, top-right,
    bottom-right, bottom-left (x right, y down).
    """
    pitch = spec.tag_size_mm + spec.tag_spacing_mm
    grid_w = spec.cols * spec.tag_size_mm + (spec.cols - 1) * spec.tag_spacing_mm
    grid_h = spec.rows * spec.tag_size_mm + (spec.rows - 1) * spec.tag_spacing_mm
    s = spec.tag_size_mm
    pts = []
    for r in range(spec.rows):
        for c in range(spec.cols):
            x0 = c * pitch - grid_w / 2.0
            y0 = r * pitch - grid_h / 2.0
            pts.extend([(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)])
    pts = np.asarray(pts) / 1000.0
    return np.column_stack([pts, np.zeros(len(pts))])


def board_corners(spec: BoardSpec) -> TargetModel:
    """352 tag corners of ``spec`` as a normalized planar target."""
    return TargetModel.from_points(board_corner_points_m(spec))


def board_orientations() -> list[np.ndarray]:
    """Frontal pose plus +/-45 degree tilts about the board's x and y axes."""
    q = math.pi / 4.0
    return [
        np.eye(3),
        rotation_about("x", q),
        rotation_about("x", -q),
        rotation_about("y", q),
        rotation_about("y", -q),
    ]


def _pinhole(state: LensState, sensor: SensorSpec) -> Intrinsics:
    return Intrinsics.pinhole(cfl_mm_to_px(thin_lens_cfl(state), sensor), sensor)


def _inside(uv, in_front, sensor: SensorSpec, border_px: float) -> bool:
    if not np.all(in_front):
        return False
    slack = 1e-9 * sensor.width_px
    lo_u, hi_u = border_px - slack, sensor.width_px - border_px + slack
    lo_v, hi_v = border_px - slack, sensor.height_px - border_px + slack
    return bool(
        np.all(uv[:, 0] >= lo_u) and np.all(uv[:, 0] <= hi_u)
        and np.all(uv[:, 1] >= lo_v) and np.all(uv[:, 1] <= hi_v)
    )


def _grid_positions(state: LensState, sensor: SensorSpec, fraction: float) -> np.ndarray:
    corners = fsf_plane(state, sensor)
    hw, hh, z = corners[2]
    xs = np.linspace(-1.0, 1.0, 5) * hw * fraction
    ys = np.linspace(-1.0, 1.0, 4) * hh * fraction
    return np.array([[x, y, z] for y in ys for x in xs])


def _board_fits(board: BoardSpec, state: LensState, sensor: SensorSpec,
                positions: np.ndarray, border_px: float) -> bool:
    intr = _pinhole(state, sensor)
    outline = board.outline_m()
    for R in board_orientations():
        for c in positions:
            uv, front = project(outline, Pose(R, c), intr)
            if not _inside(uv, front, sensor, border_px):
                return False
    return True


def board_placements(state: LensState, sensor: SensorSpec,
                     board: BoardSpec | None = None) -> np.ndarray:
    """Twenty board-centre positions (4 rows x 5 columns, metres, camera frame).

    The grid is centred on the optical axis at depth FD - CFL and shrunk
    until every orientation of ``board`` at every position keeps its outline
    at least 2% of the image width inside the frame.
    """
    if board is None:
        board = choose_board(state, sensor)
    border = PLACEMENT_BORDER_FRAC * sensor.width_px
    if not _board_fits(board, state, sensor, _grid_positions(state, sensor, 0.0), border):
        raise InfeasibleExperimentError(
            f"{board.width_mm:g}x{board.height_mm:g} mm board does not fit at "
            f"LFL={state.lfl_mm} mm, FD={state.fd_m} m"
        )
    lo, hi = 0.0, 1.0
    if _board_fits(board, state, sensor, _grid_positions(state, sensor, hi), border):
        lo = hi
    else:
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            if _board_fits(board, state, sensor, _grid_positions(state, sensor, mid), border):
                lo = mid
            else:
                hi = mid
    return _grid_positions(state, sensor, lo)


def choose_board(state: LensState, sensor: SensorSpec,
                 boards=STANDARD_BOARDS) -> BoardSpec:
    """Largest board that fits the footprint in all five orientations.

    Raises :class:`InfeasibleExperimentError` when none fits, which callers
    treat as a drone-only setting.
    """
    border = PLACEMENT_BORDER_FRAC * sensor.width_px
    centre = _grid_positions(state, sensor, 0.0)[:1]
    fitting = [b for b in boards if _board_fits(b, state, sensor, centre, border)]
    if not fitting:
        raise InfeasibleExperimentError(
            f"no board fits at LFL={state.lfl_mm} mm, FD={state.fd_m} m"
        )
    return max(fitting, key=lambda b: b.width_mm * b.height_mm)


def use_drone_mode(state: LensState, sensor: SensorSpec,
                   cam_height_m: float = DEFAULT_CAM_HEIGHT_M) -> bool:
    """True when the footprint would reach below the ground at this FD."""
    cfl_m = thin_lens_cfl(state) / 1000.0
    h_sensor_m = sensor.height_mm / 1000.0
    return state.fd_m > 2.0 * cam_height_m * cfl_m / h_sensor_m


def distortion_schedule(cfl_px: float, cfl_min_px: float, cfl_max_px: float,
                        k1_min: float = DEFAULT_K1_MIN) -> float:
    """k1 whose pixel displacement (k1 / CFL^2) sweeps linearly from barrel
    at the shortest focal to the mirrored pincushion at the longest."""
    span = cfl_max_px - cfl_min_px
    frac = 0.0 if span == 0 else (cfl_px - cfl_min_px) / span
    visual_factor = (1.0 - 2.0 * frac) * k1_min / cfl_min_px**2
    return cfl_px**2 * visual_factor


def drone_flight_points(state: LensState, sensor: SensorSpec, tuned_cfl_m: float,
                        margin_m: float = DEFAULT_MARGIN_M) -> np.ndarray:
    """The 4 x 3 x 2 hover grid in camera coordinates (metres).

    Order is depth-major, then y, then x: index ``p*12 + y*4 + x``.
    """
    if not tuned_cfl_m > 0:
        raise ValueError("tuned CFL must be positive")
    s = (state.fd_m - tuned_cfl_m) / tuned_cfl_m
    W = sensor.width_mm / 1000.0
    H = sensor.height_mm / 1000.0
    pts = []
    for p in (0.75, 1.25):
        half_w = p * s * W / 2.0 - margin_m
        half_h = p * s * H / 2.0 - margin_m
        if half_w <= 0 or half_h <= 0:
            raise DegeneratePathError(
                f"margin {margin_m} m exceeds footprint half-extent at depth factor {p}"
            )
        for y in range(3):
            for x in range(4):
                pts.append(((x - 1.5) / 1.5 * half_w, (y - 1) * half_h, p * s * tuned_cfl_m))
    return np.asarray(pts)


@dataclass(frozen=True, eq=False)
class SyntheticExperiment:
    """One synthetic calibration experiment.

    ``frames`` are camera-from-target poses acting on ``target.metric_points``.
    """

    lens_state: LensState
    gt_intrinsics: Intrinsics
    target: TargetModel
    frames: list
    mode: str
    sensor: SensorSpec
    board: BoardSpec | None = None
    index: int = 0

    def __post_init__(self):
        if self.mode not in ("board", "drone"):
            raise ValueError("mode must be 'board' or 'drone'")


def grid_cfl_range_px(states, sensor: SensorSpec) -> tuple[float, float]:
    cfls = [cfl_mm_to_px(thin_lens_cfl(s), sensor) for s in states]
    return min(cfls), max(cfls)


def make_experiment(state: LensState, sensor: SensorSpec, cfl_range_px: tuple[float, float],
                    k1_min: float = DEFAULT_K1_MIN, cam_height_m: float = DEFAULT_CAM_HEIGHT_M,
                    principal_offset_px: tuple[float, float] = (0.0, 0.0),
                    extra_distortion: dict | None = None, index: int = 0) -> SyntheticExperiment:
    """Build the ground truth and target motion for one (LFL, FD) cell."""
    cfl_px = cfl_mm_to_px(thin_lens_cfl(state), sensor)
    k1 = distortion_schedule(cfl_px, cfl_range_px[0], cfl_range_px[1], k1_min)
    cx, cy = sensor.center
    dist = {"k1": k1, "k2": 0.0, "p1": 0.0, "p2": 0.0}
    dist.update(extra_distortion or {})
    gt = Intrinsics(cfl_px, cfl_px, cx + principal_offset_px[0], cy + principal_offset_px[1], **dist)

    if use_drone_mode(state, sensor, cam_height_m):
        cam_pts = drone_flight_points(state, sensor, thin_lens_cfl(state) / 1000.0)
        target = TargetModel.from_points(cam_pts)
        centroid = cam_pts.mean(axis=0)
        frames = [Pose(np.eye(3), centroid)]
        return SyntheticExperiment(state, gt, target, frames, "drone", sensor, None, index)

    board = choose_board(state, sensor)
    positions = board_placements(state, sensor, board)
    target = board_corners(board)
    frames = [Pose(R, c) for R in board_orientations() for c in positions]
    return SyntheticExperiment(state, gt, target, frames, "board", sensor, board, index)


def sample_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Points uniform in a 3D ball."""
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return direction * r[:, None]


@dataclass
class SyntheticData:
    """Detections plus the target the calibrator should be given."""

    detections: DetectionSet
    target: TargetModel
    dropped_frames: int = 0
    true_points_m: np.ndarray = field(default=None, repr=False)


def synth_detections(exp: SyntheticExperiment, pixel_noise_px: float = 0.0,
                     rtk_noise_m: float = 0.0, seed: int = 0) -> SyntheticData:
    """Forward-project every target point of every frame.

    Points behind the camera or outside the image are flagged invalid.
    Gaussian pixel noise (per-axis std ``pixel_noise_px``) is added to valid
    points. In drone mode the returned target is rebuilt from the true points
    displaced uniformly within a ball of radius ``rtk_noise_m``.
    """
    from .detections import DetectionSet, Frame

    rng = np.random.default_rng([seed, exp.index])
    metric = exp.target.metric_points
    width, height = exp.sensor.width_px, exp.sensor.height_px
    frames = []
    dropped = 0
    for fid, pose in enumerate(exp.frames):
        uv, front = project(metric, pose, exp.gt_intrinsics)
        valid = front.copy()
        valid &= np.isfinite(uv).all(axis=1)
        valid &= (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)
        if pixel_noise_px > 0:
            uv = uv + rng.normal(scale=pixel_noise_px, size=uv.shape)
        uv = np.where(valid[:, None], uv, np.nan)
        if not valid.any():
            dropped += 1
            continue
        frames.append(Frame(fid, np.arange(metric.shape[0]), uv, valid))
    if dropped:
        log.warning("dropped %d frame(s) with no valid detections", dropped)

    target = exp.target
    true_points = metric
    if exp.mode == "drone":
        world = exp.frames[0].apply(metric)
        noisy = world
        if rtk_noise_m > 0:
            noisy = world + sample_ball(rng, world.shape[0], rtk_noise_m)
        target = TargetModel.from_points(noisy)
        true_points = world
    det = DetectionSet(target, frames)
    return SyntheticData(det, target, dropped, true_points)


def paint_led(width: int, height: int, center, radius: float, halo_width: float = 10.0,
              core: bool = True, core_rgb=(255, 255, 255), halo_rgb=(230, 30, 30),
              background=(0, 0, 0)) -> np.ndarray:
    """Minimal LED raster: a disk (bright core or red blob) with a red ring.

    ``core=False`` paints a uniformly red disk of ``radius`` with no halo.
    """
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = background
    yy, xx = np.mgrid[0:height, 0:width]
    d = np.hypot(xx - center[0], yy - center[1])
    if core:
        img[d <= radius + halo_width] = halo_rgb
        img[d <= radius] = core_rgb
    else:
        img[d <= radius] = halo_rgb
    return img
