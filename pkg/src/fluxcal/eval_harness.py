"""Scoring intrinsics predictions against table-derived ground truth."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .camera_model import ARRI_ALEXA_MINI, Intrinsics, LensState, Pose, SensorSpec
from .lut import LutQueryError, LutTable, query

log = logging.getLogger(__name__)

EPE_REPORT_THRESHOLD_PX = 300.0


def default_thresholds() -> np.ndarray:
    return np.unique(np.append(np.geomspace(1.0, 2000.0, 64), EPE_REPORT_THRESHOLD_PX))


@dataclass(frozen=True)
class FrameAnnotation:
    video_id: str
    frame_index: int
    lens_state: LensState
    gt: Intrinsics | None
    provenance: str  # exact | interpolated | extrapolated | unavailable

    @property
    def evaluable(self) -> bool:
        return self.gt is not None and self.provenance in ("exact", "interpolated")


@dataclass(frozen=True)
class PredictionRecord:
    video_id: str
    frame_index: int
    predicted: Intrinsics | None


@dataclass
class RowError:
    line: int
    message: str


@dataclass
class EpeSummary:
    thresholds: np.ndarray
    fractions: np.ndarray
    percent_errors: dict
    n_frames: int
    n_pairs: int
    n_missing_pairs: int
    n_missing_frames: int
    report_threshold_px: float = EPE_REPORT_THRESHOLD_PX

    @property
    def fraction_at_report(self) -> float:
        i = int(np.searchsorted(self.thresholds, self.report_threshold_px))
        return float(self.fractions[i])

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "n_pairs": self.n_pairs,
            "n_missing_pairs": self.n_missing_pairs,
            "n_missing_frames": self.n_missing_frames,
            "percent_errors": self.percent_errors,
            "report_threshold_px": self.report_threshold_px,
            "fraction_below_report_threshold": self.fraction_at_report,
            "curve": [[float(t), float(f)] for t, f in zip(self.thresholds, self.fractions)],
        }

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_px", "fraction_below"])
            for t, f in zip(self.thresholds, self.fractions):
                w.writerow([format(float(t), ".17g"), format(float(f), ".17g")])


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


_PROVENANCE = {"exact": "exact", "cell": "interpolated", "triangle": "interpolated",
               "extrapolated": "extrapolated"}


def annotate_rows(rows, lut: LutTable):
    """Ground truth per ``(line, video_id, frame_index, lfl_mm, fd_m)`` row.

    Returns ``(annotations, errors)``; rows that cannot be parsed or whose LFL
    lies outside the table are reported and skipped.
    """
    annotations, errors = [], []
    for line, vid, fidx, lfl, fd in rows:
        try:
            state = LensState(float(lfl), float(fd))
            fidx = int(fidx)
        except ValueError as exc:
            errors.append(RowError(line, str(exc)))
            continue
        lo = min(e.lfl_mm for e in lut.entries)
        hi = max(e.lfl_mm for e in lut.entries)
        if not lo <= state.lfl_mm <= hi:
            errors.append(RowError(line, f"LFL {state.lfl_mm} mm outside lens range [{lo}, {hi}]"))
            continue
        try:
            res = query(lut, state)
            annotations.append(FrameAnnotation(vid, fidx, state, res.intrinsics,
                                               _PROVENANCE[res.provenance]))
        except (LutQueryError, ValueError) as exc:
            errors.append(RowError(line, str(exc)))
            annotations.append(FrameAnnotation(vid, fidx, state, None, "unavailable"))
    return annotations, errors


def annotate(metadata_csv, lut: LutTable):
    """Read ``video_id,frame_index,lfl_mm,fd_m`` and attach table ground truth."""
    rows, errors = [], []
    with open(metadata_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["video_id", "frame_index", "lfl_mm", "fd_m"]
        if header is None or [h.strip() for h in header] != expected:
            raise ValueError(f"{metadata_csv}: header must be {','.join(expected)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                errors.append(RowError(line, f"expected 4 fields, got {len(row)}"))
                continue
            rows.append((line, row[0], row[1], row[2], row[3]))
    annotations, more = annotate_rows(rows, lut)
    return annotations, errors + more


PREDICTION_FIELDS = ["video_id", "frame_index", "fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2"]


def load_predictions(path) -> list[PredictionRecord]:
    """Empty fx..cy fields mark a missing prediction; empty distortion fields
    are read as zero."""
    out = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PREDICTION_FIELDS:
            raise ValueError(f"{path}: header must be {','.join(PREDICTION_FIELDS)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PREDICTION_FIELDS):
                raise ValueError(f"{path}:{line}: expected {len(PREDICTION_FIELDS)} fields")
            key = (row[0], int(row[1]))
            if key in seen:
                raise ValueError(f"{path}:{line}: duplicate prediction for {key}")
            seen.add(key)
            core = row[2:6]
            if any(v.strip() == "" for v in core):
                out.append(PredictionRecord(key[0], key[1], None))
                continue
            vals = [float(v) for v in core] + [float(v) if v.strip() else 0.0 for v in row[6:]]
            out.append(PredictionRecord(key[0], key[1], Intrinsics(*vals)))
    return out


def load_points(path) -> np.ndarray:
    """Whitespace-separated XYZ, one point per line; ``#`` starts a comment."""
    pts = np.loadtxt(path, comments="#", ndmin=2, usecols=(0, 1, 2))
    if pts.size == 0:
        raise ValueError(f"{path}: no points")
    return pts


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _join(annotations, predictions):
    preds = {(p.video_id, p.frame_index): p.predicted for p in predictions}
    return [(a, preds.get((a.video_id, a.frame_index))) for a in annotations if a.evaluable]


def percent_errors(annotations, predictions) -> dict:
    """Mean over frames of 100 |pred - gt| / gt for fx, fy, cx, cy."""
    acc = {n: [] for n in ("fx", "fy", "cx", "cy")}
    missing = 0
    for ann, pred in _join(annotations, predictions):
        if pred is None:
            missing += 1
            continue
        for n in acc:
            g = getattr(ann.gt, n)
            if g == 0:
                log.warning("%s frame %d: zero ground-truth %s skipped", ann.video_id,
                            ann.frame_index, n)
                continue
            acc[n].append(100.0 * abs(getattr(pred, n) - g) / abs(g))
    out = {n: (float(np.mean(v)) if v else float("nan")) for n, v in acc.items()}
    out["n_frames"] = len(acc["fx"])
    out["n_missing"] = missing
    return out


class _Rays:
    """Normalized image coordinates of camera-frame points, computed once and
    reused across intrinsics."""

    def __init__(self, points_cam: np.ndarray):
        z = points_cam[:, 2]
        self.front = z > 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            self.x = np.where(self.front, points_cam[:, 0] / z, 0.0)
            self.y = np.where(self.front, points_cam[:, 1] / z, 0.0)
        self.r2 = self.x * self.x + self.y * self.y

    def subset(self, mask) -> "_Rays":
        out = object.__new__(_Rays)
        out.front, out.x, out.y, out.r2 = self.front[mask], self.x[mask], self.y[mask], self.r2[mask]
        return out

    def distorted(self, intr: Intrinsics):
        x, y, r2 = self.x, self.y, self.r2
        radial = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
        xd = x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
        return xd, yd


def _fov_mask(rays: _Rays, intr: Intrinsics, sensor: SensorSpec) -> np.ndarray:
    xd, yd = rays.distorted(intr)
    u = intr.fx * xd + intr.cx
    v = intr.fy * yd + intr.cy
    return rays.front & (u >= 0) & (u < sensor.width_px) & (v >= 0) & (v < sensor.height_px)


def in_fov(points_cam: np.ndarray, intr: Intrinsics, sensor: SensorSpec) -> np.ndarray:
    """Points in front of the camera that land on the sensor under ``intr``."""
    return _fov_mask(_Rays(np.asarray(points_cam, dtype=np.float64)), intr, sensor)


def _pair_epe(rays: _Rays, gt: Intrinsics, pred: Intrinsics) -> np.ndarray:
    xg, yg = rays.distorted(gt)
    if (pred.k1, pred.k2, pred.p1, pred.p2) == (gt.k1, gt.k2, gt.p1, gt.p2):
        xp, yp = xg, yg
    else:
        xp, yp = rays.distorted(pred)
    # written as differences so that identical terms cancel exactly
    du = (pred.fx * xp - gt.fx * xg) + (pred.cx - gt.cx)
    dv = (pred.fy * yp - gt.fy * yg) + (pred.cy - gt.cy)
    return np.hypot(du, dv)


def pair_epe(points_cam: np.ndarray, gt: Intrinsics, pred: Intrinsics) -> np.ndarray:
    """Pixel distance between the two projections of each point."""
    return _pair_epe(_Rays(np.asarray(points_cam, dtype=np.float64)), gt, pred)


def sample_fov_points(cloud, annotations, n: int, seed: int, pose: Pose | None = None,
                      sensor: SensorSpec = ARRI_ALEXA_MINI) -> np.ndarray:
    """Uniform sample of points visible under at least one ground truth.

    ``pose`` maps cloud coordinates into the camera frame (identity if None).
    Returned points are in camera coordinates.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    cam = cloud if pose is None else pose.apply(cloud)
    rays = _Rays(cam)
    keep = np.zeros(len(cam), dtype=bool)
    seen = set()
    for a in annotations:
        if a.gt is None or a.gt in seen:
            continue
        seen.add(a.gt)
        keep |= _fov_mask(rays, a.gt, sensor)
    survivors = np.flatnonzero(keep)
    if len(survivors) <= n:
        if len(survivors) < n:
            log.warning("only %d points are ever in view (asked for %d)", len(survivors), n)
        return cam[survivors]
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(survivors, size=n, replace=False))
    return cam[pick]


def epe(annotations, predictions, points, thresholds=None,
        sensor: SensorSpec = ARRI_ALEXA_MINI) -> EpeSummary:
    """EPE distribution over all evaluable frame-point pairs.

    Points are camera-frame coordinates shared by both projections. A frame
    without a prediction contributes an infinite EPE for each of its in-view
    points.
    """
    thr = default_thresholds() if thresholds is None else np.sort(np.asarray(thresholds, float))
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    counts = np.zeros(len(thr), dtype=np.int64)
    total = missing_pairs = missing_frames = frames = 0
    rays = _Rays(points)
    for ann, pred in _join(annotations, predictions):
        frames += 1
        mask = _fov_mask(rays, ann.gt, sensor)
        n_vis = int(np.count_nonzero(mask))
        total += n_vis
        if pred is None:
            missing_pairs += n_vis
            missing_frames += 1
            continue
        e = np.sort(_pair_epe(rays.subset(mask), ann.gt, pred))
        counts += np.searchsorted(e, thr, side="left")
    fractions = counts / total if total else np.zeros(len(thr))
    return EpeSummary(thr, fractions, percent_errors(annotations, predictions), frames, total,
                      missing_pairs, missing_frames)


def write_summary(summary: EpeSummary, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, allow_nan=True)
