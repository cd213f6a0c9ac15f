"""Calibrator inputs: detection sets, keyframe selection, LED localisation and
2D-3D matching for drone flights, and the detection/target file formats."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .synth_targets import TargetModel

log = logging.getLogger(__name__)

FULL_BOARD_COUNT = 352


class DetectionParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class MatchCountError(ValueError):
    """Number of LED detections differs from the number of RTK fixes."""

    def __init__(self, n_detections: int, n_rtk: int):
        self.n_detections = n_detections
        self.n_rtk = n_rtk
        super().__init__(
            f"{n_detections} LED detections vs {n_rtk} RTK points; manual review needed"
        )


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: int
    point_ids: np.ndarray
    uv: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.point_ids, dtype=np.intp).ravel()
        uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        valid = np.asarray(self.valid, dtype=bool).ravel()
        if not (ids.shape[0] == uv.shape[0] == valid.shape[0]):
            raise ValueError("frame arrays differ in length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_id}: duplicate point ids")
        if not np.isfinite(uv[valid]).all():
            raise ValueError(f"frame {self.frame_id}: non-finite coordinates on valid points")
        object.__setattr__(self, "point_ids", ids)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "valid", valid)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True, eq=False)
class DetectionSet:
    target: TargetModel
    frames: list

    def __post_init__(self):
        n = self.target.n_points
        for fr in self.frames:
            if fr.point_ids.size and (fr.point_ids.min() < 0 or fr.point_ids.max() >= n):
                raise ValueError(f"frame {fr.frame_id}: point id outside target (n={n})")

    @property
    def n_observations(self) -> int:
        return sum(fr.n_valid for fr in self.frames)

    def strengths(self) -> list["FrameStrength"]:
        return [FrameStrength(fr.frame_id, fr.n_valid) for fr in self.frames]

    def subset(self, frame_ids) -> "DetectionSet":
        keep = set(frame_ids)
        return DetectionSet(self.target, [fr for fr in self.frames if fr.frame_id in keep])


@dataclass(frozen=True)
class FrameStrength:
    frame_index: int
    detection_count: int


@dataclass(frozen=True)
class LedObservation:
    frame_index: int
    center_px: tuple[float, float]
    ellipse_radii_px: tuple[float, float]
    method: int | str

    def __post_init__(self):
        major, minor = self.ellipse_radii_px
        if not (major >= minor > 0):
            raise ValueError("ellipse radii must satisfy major >= minor > 0")


# ---------------------------------------------------------------------------
# keyframes
# ---------------------------------------------------------------------------


def _suppression_radii(idx: np.ndarray, counts: np.ndarray, c_robust: float) -> np.ndarray:
    radii = np.full(len(idx), np.inf)
    for i in range(len(idx)):
        stronger = counts[i] < c_robust * counts
        if stronger.any():
            radii[i] = np.min(np.abs(idx[stronger] - idx[i]))
    return radii


def _elbow_radius(radii: np.ndarray, span: int) -> int:
    rs = np.arange(1, span + 1)
    kept = np.array([(radii >= r).sum() for r in rs], dtype=float)
    if len(kept) < 3:
        return 1
    curvature = kept[:-2] - 2.0 * kept[1:-1] + kept[2:]
    return int(rs[1 + int(np.argmax(curvature))])


def _collapse_full_runs(selected: list[int], full: set[int]) -> list[int]:
    out = []
    run: list[int] = []

    def flush():
        if run:
            out.append(run[(len(run) - 1) // 2])
            run.clear()

    for f in selected:
        if f in full:
            if run and f != run[-1] + 1:
                flush()
            run.append(f)
        else:
            flush()
            out.append(f)
    flush()
    return sorted(out)


def _anms_once(idx, counts, c_robust, radius, full_count):
    radii = _suppression_radii(idx, counts, c_robust)
    span = int(idx.max() - idx.min() + 1)
    r = radius if radius is not None else _elbow_radius(radii, span)
    keep = radii >= r
    keep |= counts >= full_count
    selected = sorted(int(i) for i in idx[keep])
    full = {int(i) for i, c in zip(idx, counts) if c >= full_count}
    return _collapse_full_runs(selected, full)


def anms_keyframes(strengths, c_robust: float = 1.0, radius: int | None = None,
                   full_count: int = FULL_BOARD_COUNT) -> list[int]:
    """Select keyframes by adaptive non-maximal suppression over frame index.

    A frame's suppression radius is the index distance to the nearest frame
    with strictly more detections (scaled by ``c_robust``). Frames with the
    full corner count are always kept, and each run of consecutive full-count
    frames is reduced to its median frame. The radius threshold defaults to
    the elbow of the kept-count-vs-radius curve. The procedure is repeated
    until the selection stops changing, so applying it to its own output is a
    no-op.
    """
    items = [s for s in strengths if s.detection_count > 0]
    if not items:
        return []
    by_index = {s.frame_index: s.detection_count for s in items}
    current = sorted(by_index)
    while True:
        idx = np.array(current)
        counts = np.array([by_index[i] for i in current], dtype=float)
        nxt = _anms_once(idx, counts, c_robust, radius, full_count)
        if nxt == current:
            return current
        current = nxt


# ---------------------------------------------------------------------------
# LED detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedConfig:
    bright_lightness: float = 210.0
    relaxed_lightness: float = 150.0
    bright_min_minor: float = 10.0
    relaxed_min_minor: float = 8.0
    red_min_minor: float = 8.0
    max_axis_ratio: float = 1.5
    min_red_fraction: float = 0.25
    saturation_similarity: float = 0.9


def lightness(rgb: np.ndarray) -> np.ndarray:
    """HSL lightness on a 0..255 scale."""
    rgb = rgb.astype(np.float64)
    return (rgb.max(axis=-1) + rgb.min(axis=-1)) / 2.0


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """HSV in OpenCV's 8-bit convention: H in [0, 180), S and V in [0, 255]."""
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, 255.0 * delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        v == r, 60.0 * (g - b) / safe,
        np.where(v == g, 120.0 + 60.0 * (b - r) / safe, 240.0 + 60.0 * (r - g) / safe),
    )
    h = np.where(delta > 0, h, 0.0) % 360.0
    return np.stack([h / 2.0, s, v], axis=-1)


def red_mask(rgb: np.ndarray) -> np.ndarray:
    hsv = rgb_to_hsv(rgb)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    sv = (s >= 100) & (s <= 255) & (v >= 120) & (v <= 255)
    return sv & (((h >= 0) & (h <= 50)) | ((h >= 130) & (h <= 180)))


@dataclass(frozen=True)
class _Blob:
    center: tuple[float, float]
    major: float
    minor: float


def _fit_blobs(mask: np.ndarray) -> list[_Blob]:
    """Second-moment ellipses of the connected components of ``mask``."""
    labels, n = ndimage.label(mask)
    blobs = []
    for sl_idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = np.nonzero(labels[sl] == sl_idx)
        if len(xs) < 5:
            continue
        xs = xs + sl[1].start
        ys = ys + sl[0].start
        cx, cy = xs.mean(), ys.mean()
        cov = np.cov(np.vstack([xs, ys]))
        evals = np.linalg.eigvalsh(cov)
        # a filled ellipse with semi-axis a has variance a^2/4 along it;
        # the 1/12 term accounts for the unit pixel footprint
        radii = 2.0 * np.sqrt(np.maximum(evals + 1.0 / 12.0, 0.0))
        blobs.append(_Blob((float(cx), float(cy)), float(radii[1]), float(radii[0])))
    return blobs


def _patch(arr: np.ndarray, center, half: float) -> np.ndarray:
    h, w = arr.shape[:2]
    half = max(int(math.ceil(half)), 1)
    x0 = max(int(round(center[0])) - half, 0)
    x1 = min(int(round(center[0])) + half, w)
    y0 = max(int(round(center[1])) - half, 0)
    y1 = min(int(round(center[1])) + half, h)
    return arr[y0:y1, x0:x1]


# The crop sizes below are read as OpenCV fitEllipse axis lengths (full
# diameters), so the patch spans 2 diameters; with true radii the patch of a
# round core could never reach a 25% red fraction.
def _patch_half(blob: _Blob) -> float:
    return 2.0 * blob.major


def _tier_bright(rgb, L, red, cfg: LedConfig, threshold, min_minor, ratio_check):
    best = None
    for blob in _fit_blobs(L > threshold):
        if blob.minor <= min_minor:
            continue
        if ratio_check and blob.major / blob.minor >= cfg.max_axis_ratio:
            continue
        red_patch = _patch(red, blob.center, _patch_half(blob))
        if red_patch.size == 0 or red_patch.mean() < cfg.min_red_fraction:
            continue
        score = _patch(L, blob.center, _patch_half(blob)).mean()
        if best is None or score > best[0]:
            best = (score, blob)
    return None if best is None else best[1]


def _tier_red(rgb, red, cfg: LedConfig):
    sat = rgb_to_hsv(rgb)[..., 1]
    cands = []
    for blob in _fit_blobs(red):
        if blob.minor <= cfg.red_min_minor:
            continue
        cands.append((_patch(sat, blob.center, _patch_half(blob)).mean(), blob))
    if not cands:
        return None
    top = max(c[0] for c in cands)
    close = [c for c in cands if c[0] >= cfg.saturation_similarity * top]
    return min(close, key=lambda c: c[1].major / c[1].minor)[1]


def detect_led(frame_rgb: np.ndarray, config: LedConfig | None = None,
               frame_index: int = 0) -> LedObservation | None:
    """Locate the drone LED in an 8-bit RGB frame, or return None.

    Tries, in order: a bright core with a red halo; the same with a lower
    lightness threshold and no roundness check; and finally a saturated red
    blob, preferring the rounder of similarly saturated candidates.
    """
    cfg = config or LedConfig()
    rgb = np.asarray(frame_rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an HxWx3 RGB raster")
    L = lightness(rgb)
    red = red_mask(rgb)
    tiers = (
        (1, lambda: _tier_bright(rgb, L, red, cfg, cfg.bright_lightness, cfg.bright_min_minor, True)),
        (2, lambda: _tier_bright(rgb, L, red, cfg, cfg.relaxed_lightness, cfg.relaxed_min_minor, False)),
        (3, lambda: _tier_red(rgb, red, cfg)),
    )
    for method, run in tiers:
        blob = run()
        if blob is not None:
            return LedObservation(frame_index, blob.center, (blob.major, blob.minor), method)
    return None


def dedup_consecutive(leds: list[LedObservation]) -> list[LedObservation]:
    """Keep only the first observation of each run of consecutive frames."""
    out = []
    prev = None
    for obs in sorted(leds, key=lambda o: o.frame_index):
        if prev is None or obs.frame_index != prev + 1:
            out.append(obs)
        prev = obs.frame_index
    return out


def match_led_to_rtk(leds: list[LedObservation], rtk_points, dedup: bool = True) -> DetectionSet:
    """Pair LED keypoints with RTK positions in chronological order."""
    if dedup:
        leds = dedup_consecutive(leds)
    else:
        leds = sorted(leds, key=lambda o: o.frame_index)
    rtk = np.asarray(rtk_points, dtype=np.float64).reshape(-1, 3)
    if len(leds) != len(rtk):
        raise MatchCountError(len(leds), len(rtk))
    target = TargetModel.from_points(rtk)
    uv = np.array([o.center_px for o in leds], dtype=np.float64).reshape(-1, 2)
    frame = Frame(0, np.arange(len(leds)), uv, np.ones(len(leds), dtype=bool))
    return DetectionSet(target, [frame])


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_target(target: TargetModel, path) -> None:
    """Write ``id x y z`` lines; scale and planarity go in comment headers."""
    with open(path, "w") as fh:
        fh.write(f"# scale_m {_fmt(target.scale_m)}\n")
        fh.write(f"# planar {int(target.planar)}\n")
        for i, p in enumerate(target.points_3d):
            fh.write(f"{i} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def load_target(path) -> TargetModel:
    from .synth_targets import is_planar

    scale = 1.0
    planar = None
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "scale_m":
                    scale = float(parts[1])
                elif len(parts) == 2 and parts[0] == "planar":
                    planar = bool(int(parts[1]))
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DetectionParseError(path, lineno, "expected 'id x y z'")
            try:
                pid = int(parts[0])
                xyz = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise DetectionParseError(path, lineno, str(exc)) from None
            if pid != len(pts):
                raise DetectionParseError(path, lineno, f"point ids must be 0..N-1 in order, got {pid}")
            pts.append(xyz)
    if not pts:
        raise DetectionParseError(path, None, "no target points")
    pts = np.asarray(pts)
    if planar is None:
        planar = is_planar(pts)
    return TargetModel(pts, planar=planar, scale_m=scale)


DETECTION_HEADER = ["frame_id", "point_id", "u_px", "v_px", "valid"]


def save_detections(det: DetectionSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_HEADER)
        for fr in det.frames:
            for pid, (u, v), ok in zip(fr.point_ids, fr.uv, fr.valid):
                w.writerow([fr.frame_id, int(pid), _fmt(u), _fmt(v), int(ok)])


def load_detections(path, target: TargetModel) -> DetectionSet:
    """Parse a detection CSV against ``target``.

    Raises :class:`DetectionParseError` naming the offending line for
    malformed rows, out-of-range point ids and duplicate (frame, point) pairs.
    """
    frames: dict[int, dict] = {}
    seen = set()
    n = target.n_points
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != DETECTION_HEADER:
            raise DetectionParseError(path, 1, f"header must be {','.join(DETECTION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DetectionParseError(path, lineno, f"expected 5 fields, got {len(row)}")
            try:
                fid, pid = int(row[0]), int(row[1])
                u, v = float(row[2]), float(row[3])
                ok = int(row[4])
            except ValueError as exc:
                raise DetectionParseError(path, lineno, str(exc)) from None
            if ok not in (0, 1):
                raise DetectionParseError(path, lineno, "valid flag must be 0 or 1")
            if not 0 <= pid < n:
                raise DetectionParseError(path, lineno, f"point_id {pid} outside target of {n} points")
            if (fid, pid) in seen:
                raise DetectionParseError(path, lineno, f"duplicate observation (frame {fid}, point {pid})")
            if ok and not (math.isfinite(u) and math.isfinite(v)):
                raise DetectionParseError(path, lineno, "valid observation with non-finite coordinates")
            seen.add((fid, pid))
            fr = frames.setdefault(fid, {"ids": [], "uv": [], "valid": []})
            fr["ids"].append(pid)
            fr["uv"].append((u, v))
            fr["valid"].append(bool(ok))
    if not frames:
        raise DetectionParseError(path, None, "no frames")
    out = [Frame(fid, d["ids"], d["uv"], d["valid"]) for fid, d in sorted(frames.items())]
    return DetectionSet(target, out)


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) 8-bit PPM into an HxWx3 uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    pix = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pix.reshape(height, width, 3).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def load_strengths(path) -> list[FrameStrength]:
    """Read a ``frame_id,count`` CSV (header optional)."""
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                out.append(FrameStrength(int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise DetectionParseError(path, lineno, "expected frame_id,count") from None
    return out
