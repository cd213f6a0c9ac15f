import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxcal.camera_model import (ARRI_ALEXA_MINI, Intrinsics, LensState, cfl_mm_to_px,
                                  thin_lens_cfl)
from fluxcal.lut import (LutEntry, LutGeometryError, LutQueryError, LutTable, barycentric_weights,
                         build_regions, cross_validate, effective_lfl, extrapolate,
                         extrapolate_cfl, interp_trapezoid, interp_triangle, query,
                         table_from_model, trapezoid_weights, xval_summary)
from fluxcal.sampling_plan import CANON17, PREMISTA80, build_grid
from fluxcal.synth_targets import distortion_schedule, grid_cfl_range_px

S = ARRI_ALEXA_MINI
TRAP = ((17.0, 1.69), (17.0, 13.5), (18.0, 13.6), (18.0, 1.70))


def grid_states(lens):
    return [LensState(l, f) for l, f in build_grid(lens).cells]


def thin_lens_intrinsics(states, pp_drift=True):
    lo, hi = grid_cfl_range_px(states, S)
    lfl_lo = min(s.lfl_mm for s in states)
    lfl_hi = max(s.lfl_mm for s in states)

    def fn(st):
        f = cfl_mm_to_px(thin_lens_cfl(st), S)
        cx, cy = S.center
        if pp_drift:
            u = (st.lfl_mm - lfl_lo) / (lfl_hi - lfl_lo)
            cx += 4.0 * u + 2.0 / st.fd_m
            cy -= 3.0 * u
        return Intrinsics(f, f, cx, cy, k1=distortion_schedule(f, lo, hi))
    return fn


def thin_lens_table(lens=CANON17, pp_drift=True):
    states = grid_states(lens)
    return table_from_model(lens, S, states, thin_lens_intrinsics(states, pp_drift))


@pytest.fixture(scope="module")
def canon_table():
    return thin_lens_table()


def entry(lfl, fd, vec, source="board"):
    return LutEntry(lfl, fd, Intrinsics.from_array(vec), source)


def toy_table(points, fn, sources=None):
    sources = sources or ["board"] * len(points)
    return LutTable(CANON17, S, [entry(l, f, fn(l, f), s) for (l, f), s in zip(points, sources)])


# ---------------------------------------------------------------------------
# trapezoid and triangle primitives
# ---------------------------------------------------------------------------


def test_trapezoid_worked_example():
    w = trapezoid_weights(*TRAP, (17.5, 7.6))
    p_lfl, p_fd = w[2] + w[3], w[1] + w[2]
    assert p_lfl == pytest.approx(0.5, abs=1e-15)
    assert p_fd == pytest.approx(0.4981, abs=5e-5)
    assert p_fd == pytest.approx((7.6 - 1.695) / 11.855, rel=1e-12)


def test_trapezoid_matches_exact_rational_two_pass_evaluation():
    # interpolate along the bottom and top edges first, then between them
    F = Fraction
    corners = [tuple(F(str(v)) for v in c) for c in TRAP]
    q = (F("17.5"), F("7.6"))
    values = [F(3), F(-1), F(7), F(2)]
    (l0, fa), (_, fb), (l1, fc), (_, fd_) = corners
    p = (q[0] - l0) / (l1 - l0)
    bottom_fd, top_fd = fa + p * (fd_ - fa), fb + p * (fc - fb)
    bottom_v = values[0] + p * (values[3] - values[0])
    top_v = values[1] + p * (values[2] - values[1])
    oracle = bottom_v + (q[1] - bottom_fd) / (top_fd - bottom_fd) * (top_v - bottom_v)
    got = interp_trapezoid(TRAP, [np.array([float(v)]) for v in values], (17.5, 7.6))
    assert got[0] == pytest.approx(float(oracle), rel=1e-13)


def test_trapezoid_corners_are_exact():
    vals = [np.arange(8.0) + 10 * i for i in range(4)]
    for c, v in zip(TRAP, vals):
        assert np.array_equal(interp_trapezoid(TRAP, vals, c), v)


def test_rectangle_centre_is_mean():
    rect = ((1.0, 1.0), (1.0, 3.0), (2.0, 3.0), (2.0, 1.0))
    vals = [np.array([1.0]), np.array([2.0]), np.array([4.0]), np.array([8.0])]
    assert interp_trapezoid(rect, vals, (1.5, 2.0))[0] == pytest.approx(15 / 4, rel=1e-15)


@given(st.floats(1, 100), st.floats(0.1, 50), st.floats(0.1, 10), st.floats(0.1, 10),
       st.floats(0, 1), st.floats(0, 1), st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_rectangle_matches_textbook_bilinear(x0, dx, y0, dy, u, v, vals):
    x1, y1 = x0 + dx, y0 + dy
    rect = ((x0, y0), (x0, y1), (x1, y1), (x1, y0))
    q = (x0 + u * dx, y0 + v * dy)
    # f(x, y) = sum over corners of value * ((x1-x)/dx or (x-x0)/dx) * (...)
    a, b, c, d = vals
    tx, ty = (q[0] - x0) / dx, (q[1] - y0) / dy
    textbook = (a * (1 - tx) * (1 - ty) + b * (1 - tx) * ty + c * tx * ty + d * tx * (1 - ty))
    got = interp_trapezoid(rect, [np.array([x]) for x in vals], q)[0]
    assert got == pytest.approx(textbook, rel=1e-12, abs=1e-12 * max(1.0, *map(abs, vals)))


def test_degenerate_trapezoids_raise():
    with pytest.raises(LutGeometryError):
        trapezoid_weights((1, 1), (1, 1), (2, 1), (2, 1), (1.5, 1))
    with pytest.raises(LutGeometryError):
        trapezoid_weights((1, 1), (1, 2), (1, 2), (1, 1), (1, 1.5))


def test_triangle_examples():
    tri = ((0.0, 0.0), (4.0, 0.0), (0.0, 2.0))
    vals = [np.array([3.0]), np.array([6.0]), np.array([-3.0])]
    for v, val in zip(tri, vals):
        assert interp_triangle(tri, vals, v)[0] == pytest.approx(val[0], abs=1e-15)
    assert interp_triangle(tri, vals, (4 / 3, 2 / 3))[0] == pytest.approx(2.0, rel=1e-14)
    assert interp_triangle(tri, vals, (2.0, 1.0))[0] == pytest.approx(1.5, rel=1e-14)


def test_degenerate_triangle_raises():
    with pytest.raises(LutGeometryError):
        barycentric_weights(((0, 0), (1, 1), (2, 2)), (1, 1))


# ---------------------------------------------------------------------------
# region decomposition
# ---------------------------------------------------------------------------


def test_canon17_grid_needs_no_triangles(canon_table):
    assert len(canon_table.regions.cells) == 63
    assert canon_table.regions.triangles == ()


def test_premista80_grid_cells():
    table = thin_lens_table(PREMISTA80)
    assert len(table.regions.cells) == 8 * 9
    assert table.regions.triangles == ()


def test_three_entries_make_one_triangle():
    r = build_regions([entry(10, 1, np.ones(8) * 1000), entry(20, 1, np.ones(8) * 1000),
                       entry(15, 3, np.ones(8) * 1000)])
    assert r.cells == () and len(r.triangles) == 1


@pytest.mark.parametrize("pts", [[(10, 1), (20, 2)], [(10, 1), (20, 2), (30, 3)],
                                 [(10, 1), (10, 2), (10, 3)]])
def test_degenerate_entry_sets_raise(pts):
    with pytest.raises(LutGeometryError):
        build_regions([entry(l, f, np.ones(8) * 1000) for l, f in pts])


def test_mixed_table_triangles_only_outside_grid():
    pts = [(10, 1), (10, 2), (20, 1), (20, 2), (30, 8)]
    table = toy_table(pts, lambda l, f: np.full(8, 1000.0),
                      ["board"] * 4 + ["drone"])
    assert len(table.regions.cells) == 1
    assert len(table.regions.triangles) >= 1
    for tri in table.regions.triangles:
        assert 4 in tri
    assert query(table, LensState(15, 1.5)).provenance == "cell"
    assert query(table, LensState(25, 4.7)).provenance == "triangle"


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def test_query_exact_at_every_entry(canon_table):
    for e in canon_table.entries:
        res = query(canon_table, LensState(e.lfl_mm, e.fd_m))
        assert res.provenance == "exact"
        got, want = res.intrinsics.as_array(), e.intrinsics.as_array()
        assert np.all(np.abs(got - want) <= 1e-12 * np.maximum(np.abs(want), 1e-300))


def test_interpolation_reproduces_entries_from_cells(canon_table):
    # evaluating a cell at its own corners must reproduce the stored values
    pts = canon_table.points
    for cell in canon_table.regions.cells:
        corners = [pts[i] for i in (cell.a, cell.b, cell.c, cell.d)]
        vals = canon_table.values((cell.a, cell.b, cell.c, cell.d))
        for c, v in zip(corners, vals):
            got = interp_trapezoid(corners, vals, c).as_array()
            assert np.allclose(got, v.as_array(), rtol=1e-12, atol=1e-15)


def test_query_inside_cell_delegates(canon_table):
    cell = canon_table.regions.cells[10]
    pts = canon_table.points
    corners = [pts[i] for i in (cell.a, cell.b, cell.c, cell.d)]
    q = tuple(np.mean(corners, axis=0))
    res = query(canon_table, LensState(*q))
    assert res.provenance == "cell"
    want = interp_trapezoid(corners, canon_table.values((cell.a, cell.b, cell.c, cell.d)), q)
    assert np.array_equal(res.intrinsics.as_array(), want.as_array())


def test_query_errors_and_extrapolation(canon_table):
    lo = min(e.lfl_mm for e in canon_table.entries)
    hi = max(e.lfl_mm for e in canon_table.entries)
    fd_max = max(e.fd_m for e in canon_table.entries)
    with pytest.raises(LutQueryError):
        query(canon_table, LensState(lo - 1, 2.0))
    with pytest.raises(LutQueryError):
        query(canon_table, LensState(hi + 1, 2.0))
    assert query(canon_table, LensState(lo, fd_max * 3)).provenance == "extrapolated"


@given(u=st.floats(0, 1), v=st.floats(0, 1))
def test_query_provenance_and_convex_bound(canon_table, u, v):
    lo = min(e.lfl_mm for e in canon_table.entries)
    hi = max(e.lfl_mm for e in canon_table.entries)
    fds = [e.fd_m for e in canon_table.entries]
    lfl = lo + u * (hi - lo)
    fd = min(fds) + v * (max(fds) * 1.5 - min(fds))
    lfl = min(lfl, hi)
    try:
        res = query(canon_table, LensState(lfl, fd))
    except LutQueryError:
        # only the strip below the lowest FD row is outside the domain
        assert fd < max(fds)
        return
    assert res.provenance in ("exact", "cell", "triangle", "extrapolated")
    if res.provenance in ("cell", "triangle"):
        vals = np.array([v.as_array() for v in canon_table.values(res.region)])
        got = res.intrinsics.as_array()
        span = vals.max(axis=0) - vals.min(axis=0)
        slack = 1e-12 * np.maximum(np.abs(vals).max(axis=0), 1.0) + 1e-12 * span
        assert np.all(got >= vals.min(axis=0) - slack)
        assert np.all(got <= vals.max(axis=0) + slack)


def test_cells_win_over_triangles_on_shared_edges():
    # the drone point sits to the right, so the cell's right edge is shared
    pts = [(10, 1), (10, 2), (20, 1), (20, 2), (30, 1.5)]
    table = toy_table(pts, lambda l, f: np.full(8, l * 100.0 + f), ["board"] * 4 + ["drone"])
    assert query(table, LensState(20, 1.5)).provenance == "cell"


# ---------------------------------------------------------------------------
# extrapolation
# ---------------------------------------------------------------------------


def test_effective_lfl_recovers_thin_lens_column(canon_table):
    for lfl in sorted({e.lfl_mm for e in canon_table.entries}):
        assert effective_lfl(canon_table, lfl) == pytest.approx(lfl, rel=1e-12)


@pytest.mark.parametrize("factor", [1.01, 2.0, 10.0, 1000.0])
def test_extrapolated_cfl_matches_thin_lens_on_columns(canon_table, factor):
    fd_max = max(e.fd_m for e in canon_table.entries)
    for lfl in sorted({e.lfl_mm for e in canon_table.entries}):
        st_ = LensState(lfl, fd_max * factor)
        assert extrapolate_cfl(canon_table, st_) == pytest.approx(thin_lens_cfl(st_), rel=1e-9)


def test_extrapolation_between_columns_is_a_blend(canon_table):
    cols = sorted({e.lfl_mm for e in canon_table.entries})
    fd = 100.0
    lfl = 0.25 * cols[2] + 0.75 * cols[3]
    a = thin_lens_cfl(LensState(cols[2], fd))
    b = thin_lens_cfl(LensState(cols[3], fd))
    assert extrapolate_cfl(canon_table, LensState(lfl, fd)) == pytest.approx(0.25 * a + 0.75 * b,
                                                                             rel=1e-12)


def test_extrapolation_snaps_other_parameters(canon_table):
    fd_max = max(e.fd_m for e in canon_table.entries)
    cols = sorted({e.lfl_mm for e in canon_table.entries})
    for lfl in (cols[0], 0.5 * (cols[3] + cols[4])):
        far = extrapolate(canon_table, LensState(lfl, fd_max * 4))
        edge = query(canon_table, LensState(lfl, fd_max)).intrinsics
        assert far.fx == far.fy
        for name in ("cx", "cy", "k1", "k2", "p1", "p2"):
            assert getattr(far, name) == pytest.approx(getattr(edge, name), rel=1e-12, abs=1e-15)


def test_extrapolation_continuous_at_table_edge():
    table = thin_lens_table(pp_drift=False)
    fd_max = max(e.fd_m for e in table.entries)
    for lfl in sorted({e.lfl_mm for e in table.entries}):
        at = query(table, LensState(lfl, fd_max)).intrinsics.fx
        just = query(table, LensState(lfl, fd_max * (1 + 1e-9))).intrinsics.fx
        assert just == pytest.approx(at, rel=1e-6)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_table_round_trip(tmp_path, canon_table):
    path = tmp_path / "lut.json"
    canon_table.save(path)
    back = LutTable.load(path)
    assert back.to_dict() == canon_table.to_dict()
    q = LensState(30.0, 2.2)
    assert query(back, q) == query(canon_table, q)


def test_table_rejects_bad_schema_and_duplicates(canon_table):
    d = json.loads(json.dumps(canon_table.to_dict()))
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        LutTable.from_dict(d)
    e = canon_table.entries[0]
    with pytest.raises(ValueError):
        LutTable(CANON17, S, [e, e] + canon_table.entries[1:])


def test_query_result_serializes_provenance(canon_table):
    fd_max = max(e.fd_m for e in canon_table.entries)
    d = query(canon_table, LensState(17.0, fd_max * 2)).to_dict()
    assert json.loads(json.dumps(d))["provenance"] == "extrapolated"


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def test_xval_reproduces_bilinear_function_exactly():
    lfls = [10.0, 14.0, 20.0, 27.0, 35.0]
    fds = [1.0, 1.5, 2.5, 4.0, 7.0]
    pts = [(l, f) for l in lfls for f in fds]

    def fn(l, f):
        return np.array([1000 + 3 * l + 20 * f + 0.5 * l * f, 1100 + l * f, 1712 + l - f,
                         1101 + 0.1 * l * f, 0.01 * l - 0.02 * f, 0.0, 1e-4 * l, -1e-4 * f])

    records = cross_validate(toy_table(pts, fn))
    interior = [r for r in records if lfls[0] < r.lfl_mm < lfls[-1] and fds[0] < r.fd_m < fds[-1]]
    assert len(interior) == 9
    for r in interior:
        assert r.method == "trapezoid"
        assert max(r.errors.values()) < 1e-9


def test_xval_marks_hull_corners_not_validatable():
    lfls, fds = [10.0, 20.0, 30.0], [1.0, 2.0, 3.0]
    pts = [(l, f) for l in lfls for f in fds]
    records = cross_validate(toy_table(pts, lambda l, f: np.array([1000 + l, 1000 + l, 1712, 1101,
                                                                    0, 0, 0, 0.0])))
    by_point = {(r.lfl_mm, r.fd_m): r for r in records}
    for corner in [(10.0, 1.0), (10.0, 3.0), (30.0, 1.0), (30.0, 3.0)]:
        assert by_point[corner].method == "none"
    assert by_point[(20.0, 2.0)].method == "trapezoid"
    summary = xval_summary(records)
    assert summary["n_validated"] == len([r for r in records if r.method != "none"])


def test_xval_thin_lens_canon17_medians(canon_table):
    summary = xval_summary(cross_validate(canon_table))
    assert summary["median_cfl_pct"] < 0.5
    assert summary["median_pp_pct"] < 0.2
