"""Per-lens lookup tables from (LFL, FD) to intrinsics.

Near-regular grids of board experiments are interpolated bilinearly over
trapezoidal cells; the remaining area of the convex hull is covered by a
Delaunay triangulation of all entries with barycentric weights. Queries with
a focus distance beyond the table use a thin-lens fit per LFL column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .camera_model import (
    PARAM_NAMES,
    Intrinsics,
    LensState,
    SensorSpec,
    cfl_mm_to_px,
    thin_lens_cfl,
)
from .sampling_plan import LensSpec

SCHEMA_VERSION = 1
FD_ROW_TOL = 0.05
_EPS = 1e-12


class LutGeometryError(ValueError):
    pass


class LutQueryError(ValueError):
    pass


@dataclass(frozen=True)
class LutEntry:
    lfl_mm: float
    fd_m: float
    intrinsics: Intrinsics
    source: str = "board"
    quality: float = 0.0

    def __post_init__(self):
        if self.source not in ("board", "drone"):
            raise ValueError("source must be 'board' or 'drone'")

    @property
    def point(self) -> tuple[float, float]:
        return (self.lfl_mm, self.fd_m)

    def to_dict(self) -> dict:
        return {"lfl_mm": self.lfl_mm, "fd_m": self.fd_m, "intrinsics": self.intrinsics.to_dict(),
                "source": self.source, "quality": self.quality}

    @classmethod
    def from_dict(cls, d: dict) -> "LutEntry":
        return cls(float(d["lfl_mm"]), float(d["fd_m"]), Intrinsics.from_dict(d["intrinsics"]),
                   d.get("source", "board"), float(d.get("quality", 0.0)))


@dataclass(frozen=True)
class Cell:
    """Trapezoid with corners A (LFL0, FD0), B (LFL0, FD1), C (LFL1, FD2),
    D (LFL1, FD3); stored as entry indices (a, b, c, d)."""

    a: int
    b: int
    c: int
    d: int


@dataclass(frozen=True)
class Regions:
    cells: tuple
    triangles: tuple  # tuples of three entry indices


@dataclass(frozen=True)
class QueryResult:
    intrinsics: Intrinsics
    provenance: str
    region: tuple = ()

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(), "provenance": self.provenance,
                "region": list(self.region)}


# ---------------------------------------------------------------------------
# interpolation primitives
# ---------------------------------------------------------------------------


def _as_vec(v) -> np.ndarray:
    return v.as_array() if isinstance(v, Intrinsics) else np.asarray(v, dtype=np.float64)


def trapezoid_weights(A, B, C, D, query) -> tuple[float, float, float, float]:
    lfl0, fd0 = A
    _, fd1 = B
    lfl1, fd2 = C
    _, fd3 = D
    lfl, fd = query
    if not lfl1 > lfl0:
        raise LutGeometryError("trapezoid needs LFL0 < LFL1")
    p_lfl = (lfl - lfl0) / (lfl1 - lfl0)
    y1 = (fd3 - fd0) / (lfl1 - lfl0) * (lfl - lfl0) + fd0
    y2 = (fd2 - fd1) / (lfl1 - lfl0) * (lfl - lfl0) + fd1
    if y2 == y1:
        raise LutGeometryError("degenerate trapezoid (zero FD height)")
    p_fd = (fd - y1) / (y2 - y1)
    return ((1 - p_lfl) * (1 - p_fd), (1 - p_lfl) * p_fd, p_lfl * p_fd, p_lfl * (1 - p_fd))


def interp_trapezoid(corners, values, query):
    """Bilinear interpolation over a trapezoid with vertical LFL edges.

    ``corners`` is (A, B, C, D) as (LFL, FD) pairs and ``values`` the matching
    values (Intrinsics or arrays). Returns the same kind as ``values``.
    """
    w = trapezoid_weights(*corners, query)
    out = sum(wi * _as_vec(v) for wi, v in zip(w, values))
    return Intrinsics.from_array(out) if isinstance(values[0], Intrinsics) else out


def barycentric_weights(tri, query) -> np.ndarray:
    (x1, y1), (x2, y2), (x3, y3) = tri
    det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
    scale = max(abs(x1 - x3), abs(x2 - x3), 1e-300) * max(abs(y1 - y3), abs(y2 - y3), 1e-300)
    if abs(det) <= 1e-14 * scale:
        raise LutGeometryError("degenerate triangle")
    x, y = query
    l1 = ((y2 - y3) * (x - x3) + (x3 - x2) * (y - y3)) / det
    l2 = ((y3 - y1) * (x - x3) + (x1 - x3) * (y - y3)) / det
    return np.array([l1, l2, 1.0 - l1 - l2])


def interp_triangle(vertices, values, query):
    w = barycentric_weights(vertices, query)
    out = sum(wi * _as_vec(v) for wi, v in zip(w, values))
    return Intrinsics.from_array(out) if isinstance(values[0], Intrinsics) else out


def _in_trapezoid(corners, query, tol=1e-9) -> bool:
    lfl0, lfl1 = corners[0][0], corners[2][0]
    lfl = query[0]
    span = lfl1 - lfl0
    if lfl < lfl0 - tol * span or lfl > lfl1 + tol * span:
        return False
    w = trapezoid_weights(*corners, query)
    p_lfl = w[2] + w[3]
    p_fd = w[1] + w[2]
    return -tol <= p_lfl <= 1 + tol and -tol <= p_fd <= 1 + tol


def _in_triangle(tri, query, tol=1e-9) -> bool:
    try:
        w = barycentric_weights(tri, query)
    except LutGeometryError:
        return False
    return bool(np.all(w >= -tol))


# ---------------------------------------------------------------------------
# region decomposition
# ---------------------------------------------------------------------------


def _columns(points, idx) -> dict:
    cols: dict[float, list[int]] = {}
    for i in idx:
        cols.setdefault(points[i][0], []).append(i)
    for lfl in cols:
        cols[lfl].sort(key=lambda i: points[i][1])
    return dict(sorted(cols.items()))


def _same_row(fd_a: float, fd_b: float, tol: float) -> bool:
    return abs(fd_a - fd_b) <= tol * max(fd_a, fd_b)


def _grid_cells(points, idx, tol=FD_ROW_TOL) -> list[Cell]:
    """Cells between consecutive columns whose consecutive FD pairs match."""
    cols = _columns(points, idx)
    keys = list(cols)
    cells = []
    for lfl0, lfl1 in zip(keys, keys[1:]):
        left, right = cols[lfl0], cols[lfl1]
        for a, b in zip(left, left[1:]):
            for d, c in zip(right, right[1:]):
                if (_same_row(points[a][1], points[d][1], tol)
                        and _same_row(points[b][1], points[c][1], tol)):
                    cells.append(Cell(a, b, c, d))
    return cells


def _cell_corners(points, cell: Cell):
    return (points[cell.a], points[cell.b], points[cell.c], points[cell.d])


def _triangle_covered(points, tri, cells) -> bool:
    verts = np.array([points[i] for i in tri])
    samples = []
    for w in ((1 / 3, 1 / 3, 1 / 3), (0.6, 0.2, 0.2), (0.2, 0.6, 0.2), (0.2, 0.2, 0.6),
              (0.45, 0.45, 0.1), (0.1, 0.45, 0.45), (0.45, 0.1, 0.45)):
        samples.append(tuple(np.asarray(w) @ verts))
    return all(any(_in_trapezoid(_cell_corners(points, c), s, tol=1e-12) for c in cells)
               for s in samples)


def _check_points(points):
    if len(points) < 3:
        raise LutGeometryError("need at least 3 entries")
    arr = np.asarray(points, dtype=np.float64)
    span = arr.max(axis=0) - arr.min(axis=0)
    if np.any(span == 0):
        raise LutGeometryError("entries are collinear")
    c = (arr - arr.mean(axis=0)) / span
    if np.linalg.matrix_rank(c, tol=1e-12) < 2:
        raise LutGeometryError("entries are collinear")
    return arr


def _delaunay(points) -> list[tuple]:
    arr = _check_points(points)
    try:
        tri = Delaunay(arr)
    except QhullError as exc:
        raise LutGeometryError(f"triangulation failed: {exc}") from None
    return [tuple(int(v) for v in s) for s in tri.simplices]


def build_regions(entries, fd_tol: float = FD_ROW_TOL) -> Regions:
    """Trapezoid cells over board-entry grids plus Delaunay triangles covering
    the rest of the convex hull. Triangles lying entirely inside cells are
    dropped; on any remaining overlap the cell takes precedence at query time.
    """
    points = [e.point for e in entries]
    tris = _delaunay(points)
    board = [i for i, e in enumerate(entries) if e.source == "board"]
    cells = _grid_cells(points, board, fd_tol)
    keep = [t for t in tris if not _triangle_covered(points, t, cells)]
    return Regions(tuple(cells), tuple(keep))


# ---------------------------------------------------------------------------
# table
# ---------------------------------------------------------------------------


@dataclass
class LutTable:
    lens: LensSpec
    sensor: SensorSpec
    entries: list
    fd_tol: float = FD_ROW_TOL
    regions: Regions = field(init=False, repr=False)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            key = (e.lfl_mm, e.fd_m)
            if key in seen:
                raise ValueError(f"duplicate LUT entry at LFL={e.lfl_mm}, FD={e.fd_m}")
            seen.add(key)
        self.regions = build_regions(self.entries, self.fd_tol)

    @property
    def points(self) -> list:
        return [e.point for e in self.entries]

    def values(self, idx) -> list:
        return [self.entries[i].intrinsics for i in idx]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "lens": self.lens.to_dict(),
                "sensor": self.sensor.to_dict(), "fd_row_tol": self.fd_tol,
                "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "LutTable":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported LUT schema version {d.get('schema_version')!r}")
        return cls(LensSpec.from_dict(d["lens"]), SensorSpec.from_dict(d["sensor"]),
                   [LutEntry.from_dict(e) for e in d["entries"]],
                   float(d.get("fd_row_tol", FD_ROW_TOL)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "LutTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _close(a: float, b: float, tol: float = 1e-9) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _interpolate(table: LutTable, q, tol=1e-9):
    """Region interpolation at ``q``; returns (vector, provenance, region) or None."""
    pts = table.points
    for cell in table.regions.cells:
        corners = _cell_corners(pts, cell)
        if _in_trapezoid(corners, q, tol):
            idx = (cell.a, cell.b, cell.c, cell.d)
            vec = interp_trapezoid(corners, [table.entries[i].intrinsics.as_array() for i in idx], q)
            return vec, "cell", idx
    for tri in table.regions.triangles:
        verts = [pts[i] for i in tri]
        if _in_triangle(verts, q, tol):
            vec = interp_triangle(verts, [table.entries[i].intrinsics.as_array() for i in tri], q)
            return vec, "triangle", tri
    return None


def _upper_fd(table: LutTable, lfl: float) -> float:
    """Largest FD of the table's convex hull at ``lfl``."""
    arr = np.asarray(table.points)
    hull = ConvexHull(arr)
    best = -math.inf
    for s in hull.simplices:
        (x1, y1), (x2, y2) = arr[s[0]], arr[s[1]]
        lo, hi = min(x1, x2), max(x1, x2)
        if not (lo - _EPS * max(1.0, abs(lo)) <= lfl <= hi + _EPS * max(1.0, abs(hi))):
            continue
        if x1 == x2:
            best = max(best, y1, y2)
        else:
            best = max(best, y1 + (y2 - y1) * (lfl - x1) / (x2 - x1))
    return best


def lfl_bounds(table: LutTable) -> tuple[float, float]:
    lfls = [e.lfl_mm for e in table.entries]
    return min(lfls), max(lfls)


def query(table: LutTable, state: LensState) -> QueryResult:
    """Intrinsics at ``state`` with the way they were obtained."""
    lfl, fd = state.lfl_mm, state.fd_m
    lo, hi = lfl_bounds(table)
    if not (lo - 1e-9 * lo <= lfl <= hi + 1e-9 * hi):
        raise LutQueryError(f"LFL {lfl} mm outside table range [{lo}, {hi}]")
    for i, e in enumerate(table.entries):
        if _close(e.lfl_mm, lfl) and _close(e.fd_m, fd):
            return QueryResult(e.intrinsics, "exact", (i,))
    hit = _interpolate(table, (lfl, fd))
    if hit is not None:
        vec, prov, region = hit
        return QueryResult(Intrinsics.from_array(vec), prov, tuple(region))
    top = _upper_fd(table, lfl)
    if fd > top:
        return QueryResult(extrapolate(table, state), "extrapolated", ())
    raise LutQueryError(f"(LFL={lfl}, FD={fd}) is outside the table domain")


def _bracketing_columns(table: LutTable, lfl: float) -> tuple[float, float]:
    cols = sorted({e.lfl_mm for e in table.entries})
    below = [c for c in cols if c <= lfl or _close(c, lfl)]
    above = [c for c in cols if c >= lfl or _close(c, lfl)]
    if not below or not above:
        raise LutQueryError(f"no LFL column brackets {lfl}")
    return below[-1], above[0]


def effective_lfl(table: LutTable, column_lfl: float) -> float:
    """Thin-lens LFL (mm) that best explains the CFLs of one LFL column."""
    s = table.sensor
    terms = []
    for e in table.entries:
        if e.lfl_mm != column_lfl:
            continue
        k = e.intrinsics
        # same pitch as cfl_mm_to_px so a thin-lens table round-trips exactly
        cfl = 0.5 * (k.fx + k.fy) * s.pixel_size_mm
        terms.append(1.0 / cfl + 1.0 / (e.fd_m * 1000.0 - cfl))
    if not terms:
        raise LutQueryError(f"no entries at LFL {column_lfl}")
    return len(terms) / sum(terms)


def extrapolate_cfl(table: LutTable, state: LensState) -> float:
    """Thin-lens extrapolated camera focal length (mm) at ``state``."""
    lfl0, lfl1 = _bracketing_columns(table, state.lfl_mm)
    cfl0 = thin_lens_cfl(LensState(effective_lfl(table, lfl0), state.fd_m))
    if lfl1 == lfl0:
        return cfl0
    cfl1 = thin_lens_cfl(LensState(effective_lfl(table, lfl1), state.fd_m))
    p = (state.lfl_mm - lfl0) / (lfl1 - lfl0)
    return (1.0 - p) * cfl0 + p * cfl1


def extrapolate(table: LutTable, state: LensState) -> Intrinsics:
    """Intrinsics beyond the table's FD range.

    fx = fy come from :func:`extrapolate_cfl`; every other parameter is read
    at the table's upper FD boundary for the same LFL.
    """
    cfl_px = cfl_mm_to_px(extrapolate_cfl(table, state), table.sensor)
    top = _upper_fd(table, state.lfl_mm)
    hit = _interpolate(table, (state.lfl_mm, top), tol=1e-7)
    if hit is None:
        exact = [e for e in table.entries if _close(e.lfl_mm, state.lfl_mm) and _close(e.fd_m, top)]
        if not exact:
            raise LutQueryError("could not evaluate the table at its FD boundary")
        vec = exact[0].intrinsics.as_array()
    else:
        vec = hit[0].copy()
    vec[0] = vec[1] = cfl_px
    return Intrinsics.from_array(vec)


# ---------------------------------------------------------------------------
# leave-one-out cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class XvalRecord:
    index: int
    lfl_mm: float
    fd_m: float
    method: str  # trapezoid | triangle | none
    errors: dict

    def row(self) -> dict:
        out = {"index": self.index, "lfl_mm": self.lfl_mm, "fd_m": self.fd_m, "method": self.method}
        for name in PARAM_NAMES:
            out[name] = self.errors.get(name, float("nan"))
        return out


def _errors(pred: np.ndarray, truth: np.ndarray) -> dict:
    out = {}
    for i, name in enumerate(PARAM_NAMES):
        if i < 4:
            out[name] = abs(pred[i] - truth[i]) / abs(truth[i]) * 100.0
        else:
            out[name] = abs(pred[i] - truth[i])
    return out


def _grid_candidates(points, pool, q, tol) -> list:
    cols = _columns(points, pool)
    keys = list(cols)
    found = []
    for i, lfl0 in enumerate(keys):
        if lfl0 > q[0]:
            break
        for lfl1 in keys[i + 1:]:
            if lfl1 < q[0]:
                continue
            for a, b in zip(cols[lfl0], cols[lfl0][1:]):
                for d, c in zip(cols[lfl1], cols[lfl1][1:]):
                    if not (_same_row(points[a][1], points[d][1], tol)
                            and _same_row(points[b][1], points[c][1], tol)):
                        continue
                    cell = Cell(a, b, c, d)
                    if _in_trapezoid(_cell_corners(points, cell), q, 1e-9):
                        found.append(cell)
    return found


def cross_validate(table: LutTable) -> list[XvalRecord]:
    """Leave-one-out interpolation error for every entry.

    Each entry is predicted from the other vertices of the regions it belongs
    to: by the grid cell with the smallest LFL span when one encloses it,
    otherwise by the enclosing triangle of their Delaunay triangulation.
    Entries no region can reach are reported with method ``none``.
    """
    if len(table.entries) < 4:
        raise ValueError("cross-validation needs at least 4 entries")
    pts = table.points
    records = []
    for k, entry in enumerate(table.entries):
        q = entry.point
        neigh = set()
        for cell in table.regions.cells:
            idx = (cell.a, cell.b, cell.c, cell.d)
            if k in idx:
                neigh.update(idx)
        for tri in _delaunay(pts):
            if k in tri:
                neigh.update(tri)
        neigh.discard(k)
        board = [i for i in neigh if table.entries[i].source == "board"]
        truth = entry.intrinsics.as_array()
        cands = _grid_candidates(pts, board, q, table.fd_tol)
        if cands:
            best = min(cands, key=lambda c: (pts[c.c][0] - pts[c.a][0],
                                             pts[c.b][1] - pts[c.a][1]))
            corners = _cell_corners(pts, best)
            vals = [table.entries[i].intrinsics.as_array() for i in (best.a, best.b, best.c, best.d)]
            pred = interp_trapezoid(corners, vals, q)
            records.append(XvalRecord(k, q[0], q[1], "trapezoid", _errors(pred, truth)))
            continue
        pool = sorted(neigh)
        method, errs = "none", {}
        if len(pool) >= 3:
            try:
                local = [pts[i] for i in pool]
                for tri in _delaunay(local):
                    verts = [local[j] for j in tri]
                    if _in_triangle(verts, q, 1e-9):
                        vals = [table.entries[pool[j]].intrinsics.as_array() for j in tri]
                        pred = interp_triangle(verts, vals, q)
                        method, errs = "triangle", _errors(pred, truth)
                        break
            except LutGeometryError:
                pass
        records.append(XvalRecord(k, q[0], q[1], method, errs))
    return records


def xval_summary(records) -> dict:
    ok = [r for r in records if r.method != "none"]
    out = {"n_entries": len(records), "n_validated": len(ok)}
    if not ok:
        return out
    cfl = [0.5 * (r.errors["fx"] + r.errors["fy"]) for r in ok]
    pp = [0.5 * (r.errors["cx"] + r.errors["cy"]) for r in ok]
    out.update(median_cfl_pct=float(np.median(cfl)), max_cfl_pct=float(np.max(cfl)),
               median_pp_pct=float(np.median(pp)), max_pp_pct=float(np.max(pp)))
    for name in PARAM_NAMES[4:]:
        out[f"median_{name}_abs"] = float(np.median([r.errors[name] for r in ok]))
    return out


def table_from_model(lens: LensSpec, sensor: SensorSpec, states, intrinsics_fn,
                     source_fn=None) -> LutTable:
    """Build a table by evaluating ``intrinsics_fn(state)`` at each state."""
    entries = []
    for st in states:
        src = source_fn(st) if source_fn else "board"
        entries.append(LutEntry(st.lfl_mm, st.fd_m, intrinsics_fn(st), src))
    return LutTable(lens, sensor, entries)
