"""Camera-space to geodetic conversion and drone mission export.

World space is local east/north/up in metres with its origin on the ground
below the camera; camera space is +x right, +y down the image, +z along the
optical axis.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .camera_model import LensState, SensorSpec
from .synth_targets import DEFAULT_MARGIN_M, drone_flight_points

EARTH_RADIUS_M = 6371008.8
HOVER_SECONDS = 3.0


class PlanningError(ValueError):
    def __init__(self, message: str, offending=()):
        self.offending = list(offending)
        super().__init__(message)


@dataclass(frozen=True)
class CameraSiting:
    """Where the camera stands and how it is aimed.

    ``alpha`` is the compass heading (radians, counterclockwise from north)
    and ``theta`` the angle between the optical axis and the vertical.
    """

    lat0: float
    lon0: float
    height_m: float
    alpha: float
    theta: float

    def __post_init__(self):
        if not abs(self.lat0) <= 90.0:
            raise ValueError("latitude must be within [-90, 90]")
        if not abs(self.lon0) <= 180.0:
            raise ValueError("longitude must be within [-180, 180]")
        if not self.height_m > 0:
            raise ValueError("camera height must be positive")
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError("theta must be within [0, pi]")

    def to_dict(self) -> dict:
        return {"lat0": self.lat0, "lon0": self.lon0, "height_m": self.height_m,
                "alpha_rad": self.alpha, "theta_rad": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSiting":
        """Angles may be given as ``alpha_rad``/``theta_rad`` or ``alpha_deg``/``theta_deg``."""
        known = {"lat0", "lon0", "height_m", "alpha_rad", "theta_rad", "alpha_deg", "theta_deg"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown siting fields: {sorted(extra)}")

        def angle(name):
            if f"{name}_rad" in d:
                return float(d[f"{name}_rad"])
            if f"{name}_deg" in d:
                return math.radians(float(d[f"{name}_deg"]))
            raise ValueError(f"siting needs {name}_rad or {name}_deg")

        return cls(float(d["lat0"]), float(d["lon0"]), float(d["height_m"]),
                   angle("alpha"), angle("theta"))


def cam_to_world_matrix(siting: CameraSiting) -> np.ndarray:
    """4x4 homogeneous transform: tilt by theta with the height lift, then yaw."""
    ca, sa = math.cos(siting.alpha), math.sin(siting.alpha)
    ct, st = math.cos(siting.theta), math.sin(siting.theta)
    yaw = np.array([[ca, sa, 0, 0], [-sa, ca, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=np.float64)
    tilt = np.array([[1, 0, 0, 0], [0, ct, st, 0], [0, -st, ct, siting.height_m], [0, 0, 0, 1]],
                    dtype=np.float64)
    return yaw @ tilt


def cam_to_world(p, siting: CameraSiting) -> np.ndarray:
    """Map camera-space point(s) (m) to world east/north/up (m)."""
    p = np.asarray(p, dtype=np.float64)
    T = cam_to_world_matrix(siting)
    return p @ T[:3, :3].T + T[:3, 3]


def world_to_geodetic(w, siting: CameraSiting):
    """Spherical azimuthal-equidistant placement of world point(s).

    Returns ``(lat, lon, alt)`` in degrees/degrees/metres, as arrays when
    ``w`` is ``(N, 3)``.
    """
    w = np.asarray(w, dtype=np.float64)
    east, north, up = w[..., 0], w[..., 1], w[..., 2]
    phi1 = math.radians(siting.lat0)
    lam1 = math.radians(siting.lon0)
    delta = np.hypot(east, north) / EARTH_RADIUS_M
    beta = np.arctan2(east, north)
    sin_phi2 = math.sin(phi1) * np.cos(delta) + math.cos(phi1) * np.sin(delta) * np.cos(beta)
    phi2 = np.arcsin(np.clip(sin_phi2, -1.0, 1.0))
    lam2 = lam1 + np.arctan2(np.sin(beta) * np.sin(delta) * math.cos(phi1),
                             np.cos(delta) - math.sin(phi1) * sin_phi2)
    lon = (np.degrees(lam2) + 180.0) % 360.0 - 180.0
    return np.degrees(phi2), lon, up.copy() if isinstance(up, np.ndarray) else float(up)


def geodetic_to_world(lat, lon, alt, siting: CameraSiting) -> np.ndarray:
    """Inverse of :func:`world_to_geodetic`."""
    phi1 = math.radians(siting.lat0)
    lam1 = math.radians(siting.lon0)
    phi2 = np.radians(np.asarray(lat, dtype=np.float64))
    dlam = np.radians(np.asarray(lon, dtype=np.float64)) - lam1
    a = np.sin((phi2 - phi1) / 2) ** 2 + math.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2) ** 2
    delta = 2.0 * np.arctan2(np.sqrt(a), np.sqrt(np.maximum(1.0 - a, 0.0)))
    beta = np.arctan2(np.sin(dlam) * np.cos(phi2),
                      math.cos(phi1) * np.sin(phi2) - math.sin(phi1) * np.cos(phi2) * np.cos(dlam))
    rho = delta * EARTH_RADIUS_M
    return np.stack([rho * np.sin(beta), rho * np.cos(beta),
                     np.asarray(alt, dtype=np.float64)], axis=-1)


@dataclass(frozen=True, eq=False)
class FlightPlan:
    camera_points: np.ndarray  # (24, 3), in flight order
    waypoints: np.ndarray      # (24, 3) lat, lon, alt
    siting: CameraSiting

    def __post_init__(self):
        if len(self.camera_points) != len(self.waypoints):
            raise ValueError("camera points and waypoints differ in count")


def lawnmower_order(n_x: int = 4, n_y: int = 3, depths: int = 2) -> list[int]:
    """Indices into the depth/y/x-ordered grid in boustrophedon flight order."""
    order = []
    for p in range(depths):
        for y in range(n_y):
            xs = range(n_x) if y % 2 == 0 else range(n_x - 1, -1, -1)
            order.extend(p * n_x * n_y + y * n_x + x for x in xs)
    return order


def plan_flight(state: LensState, sensor: SensorSpec, tuned_cfl_m: float, siting: CameraSiting,
                margin_m: float = DEFAULT_MARGIN_M) -> FlightPlan:
    """The 24 hover waypoints, near depth first, each depth flown as a lawnmower."""
    pts = drone_flight_points(state, sensor, tuned_cfl_m, margin_m)[lawnmower_order()]
    world = cam_to_world(pts, siting)
    low = [i for i, z in enumerate(world[:, 2]) if z <= 0.0]
    if low:
        raise PlanningError(f"waypoints at or below ground: {low}", low)
    lat, lon, alt = world_to_geodetic(world, siting)
    return FlightPlan(pts, np.column_stack([lat, lon, alt]), siting)


def _mission_item(i: int, lat: float, lon: float, alt: float) -> dict:
    return {
        "type": "SimpleItem",
        "command": 16,  # MAV_CMD_NAV_WAYPOINT
        "frame": 3,     # MAV_FRAME_GLOBAL_RELATIVE_ALT
        "doJumpId": i + 1,
        "autoContinue": True,
        "AMSLAltAboveTerrain": None,
        "Altitude": alt,
        "AltitudeMode": 1,
        "params": [HOVER_SECONDS, 0, 0, None, lat, lon, alt],
    }


def mission_dict(plan: FlightPlan) -> dict:
    items = [_mission_item(i, float(la), float(lo), float(al))
             for i, (la, lo, al) in enumerate(plan.waypoints)]
    return {
        "fileType": "Plan",
        "version": 1,
        "groundStation": "QGroundControl",
        "mission": {
            "version": 2,
            "firmwareType": 12,
            "vehicleType": 2,
            "cruiseSpeed": 15,
            "hoverSpeed": 5,
            "plannedHomePosition": [plan.siting.lat0, plan.siting.lon0, 0],
            "items": items,
        },
        "geoFence": {"circles": [], "polygons": [], "version": 2},
        "rallyPoints": {"points": [], "version": 2},
    }


def export_mission(plan: FlightPlan, path) -> tuple[str, str]:
    """Write ``path`` (.plan JSON) and a ``.csv`` sidecar; returns both paths."""
    path = str(path)
    with open(path, "w") as fh:
        json.dump(mission_dict(plan), fh, indent=2)
    csv_path = (path[:-5] if path.endswith(".plan") else path) + ".csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "lat", "lon", "alt"])
        for i, (la, lo, al) in enumerate(plan.waypoints):
            w.writerow([i, repr(float(la)), repr(float(lo)), repr(float(al))])
    return path, csv_path


def load_waypoints_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["index", "lat", "lon", "alt"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for i, row in enumerate(reader):
            if int(row[0]) != i:
                raise ValueError(f"{path}: waypoint index {row[0]} out of order")
            rows.append([float(v) for v in row[1:4]])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def rtk_to_world(rows, siting: CameraSiting) -> np.ndarray:
    """World coordinates of RTK fixes given as (lat, lon, alt) rows."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return geodetic_to_world(rows[:, 0], rows[:, 1], rows[:, 2], siting)


def world_to_cam(w, siting: CameraSiting) -> np.ndarray:
    T = cam_to_world_matrix(siting)
    w = np.asarray(w, dtype=np.float64)
    return (w - T[:3, 3]) @ T[:3, :3]
