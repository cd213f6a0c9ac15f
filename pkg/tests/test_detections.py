import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxcal import detections as D
from fluxcal.detections import (DetectionParseError, DetectionSet, Frame, FrameStrength,
                                LedObservation, MatchCountError, anms_keyframes, dedup_consecutive,
                                detect_led, lightness, load_detections, load_strengths,
                                load_target, match_led_to_rtk, read_ppm, red_mask, rgb_to_hsv,
                                save_detections, save_target, write_ppm)
from fluxcal.synth_targets import board_corners, BoardSpec, paint_led


def fs(counts):
    return [FrameStrength(i, c) for i, c in enumerate(counts)]


# --- keyframes ------------------------------------------------------------


def test_anms_full_runs_collapse_to_median():
    assert anms_keyframes(fs([352, 352, 352, 10, 352])) == [1, 4]


def test_anms_single_frame():
    assert anms_keyframes(fs([120])) == [0]


def brute_anms(counts, radius):
    keep = []
    for i, c in enumerate(counts):
        d = [abs(i - j) for j, cj in enumerate(counts) if c < cj]
        if not d or min(d) >= radius:
            keep.append(i)
    return keep


def test_anms_increasing_counts_keep_global_max():
    counts = [10, 20, 30, 40, 50, 60, 70, 80]
    assert brute_anms(counts, 20) == [7]
    assert anms_keyframes(fs(counts), radius=20) == [7]


@given(st.lists(st.integers(1, 351), min_size=1, max_size=10), st.integers(1, 10))
def test_anms_matches_brute_force_without_full_frames(counts, radius):
    # the library iterates to a fixed point; distances stay frame indices
    cur = list(range(len(counts)))
    while True:
        nxt = [i for i in cur if all(abs(i - j) >= radius for j in cur if counts[i] < counts[j])]
        if nxt == cur:
            break
        cur = nxt
    assert anms_keyframes(fs(counts), radius=radius) == cur


@given(st.lists(st.integers(0, 352), min_size=1, max_size=40))
def test_anms_idempotent_and_skips_empty(counts):
    sel = anms_keyframes(fs(counts))
    assert all(counts[i] > 0 for i in sel)
    again = anms_keyframes([FrameStrength(i, counts[i]) for i in sel])
    assert again == sel


def test_load_strengths(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("frame_id,count\n0,352\n1,10\n")
    assert load_strengths(p) == [FrameStrength(0, 352), FrameStrength(1, 10)]
    p.write_text("0,352\nx,1\n")
    with pytest.raises(DetectionParseError) as exc:
        load_strengths(p)
    assert exc.value.line == 2


# --- colour helpers -------------------------------------------------------


def test_hsv_matches_opencv_convention():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 0, 255], [128, 128, 128]]],
                  dtype=np.uint8)
    hsv = rgb_to_hsv(px)[0]
    assert np.allclose(hsv[:, 0], [0, 60, 120, 150, 0])
    assert np.allclose(hsv[:4, 1], 255) and hsv[4, 1] == 0
    assert list(red_mask(px)[0]) == [True, False, False, True, False]
    assert lightness(px)[0, 4] == 128


# --- LED detection --------------------------------------------------------


def test_black_frame_has_no_led():
    assert detect_led(np.zeros((200, 300, 3), dtype=np.uint8)) is None


def test_bright_core_with_halo_is_tier_1():
    img = paint_led(1000, 800, (500, 400), 15)
    obs = detect_led(img, frame_index=7)
    assert obs.method == 1 and obs.frame_index == 7
    assert np.hypot(obs.center_px[0] - 500, obs.center_px[1] - 400) < 1.0
    assert obs.ellipse_radii_px[1] == pytest.approx(15, abs=1.0)


def test_dim_core_is_tier_2():
    img = paint_led(400, 300, (200, 150), 12, core_rgb=(200, 180, 180))
    obs = detect_led(img)
    assert obs.method == 2
    assert np.hypot(obs.center_px[0] - 200, obs.center_px[1] - 150) < 1.0


def test_red_blob_only_is_tier_3():
    img = paint_led(400, 300, (180.0, 120.0), 12, core=False)
    obs = detect_led(img)
    assert obs.method == 3
    assert np.hypot(obs.center_px[0] - 180, obs.center_px[1] - 120) < 1.0


def test_tiers_are_tried_in_order(monkeypatch):
    calls = []
    orig_bright, orig_red = D._tier_bright, D._tier_red
    monkeypatch.setattr(D, "_tier_bright", lambda *a: calls.append("bright") or orig_bright(*a))
    monkeypatch.setattr(D, "_tier_red", lambda *a: calls.append("red") or orig_red(*a))
    detect_led(paint_led(300, 300, (150, 150), 15))
    assert calls == ["bright"]
    calls.clear()
    detect_led(paint_led(300, 300, (150, 150), 12, core=False))
    assert calls == ["bright", "bright", "red"]


def test_ppm_roundtrip(tmp_path):
    img = paint_led(64, 48, (30, 20), 5)
    write_ppm(tmp_path / "f.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "f.ppm"), img)


def test_led_observation_validates_radii():
    with pytest.raises(ValueError):
        LedObservation(0, (1, 1), (2, 3), 1)


# --- matching -------------------------------------------------------------


def led(i, u=100.0):
    return LedObservation(i, (u + i, 50.0), (12.0, 11.0), 1)


def test_dedup_keeps_first_of_consecutive_run():
    kept = dedup_consecutive([led(10), led(11), led(12), led(20)])
    assert [o.frame_index for o in kept] == [10, 20]


def test_match_24_points():
    rng = np.random.default_rng(0)
    rtk = rng.uniform(-5, 5, size=(24, 3))
    det = match_led_to_rtk([led(3 * i) for i in range(24)], rtk)
    assert len(det.frames) == 1 and det.frames[0].n_valid == 24
    assert np.max(np.linalg.norm(det.target.points_3d, axis=1)) <= 1.0
    assert np.allclose(det.target.metric_points, rtk - rtk.mean(axis=0), atol=1e-12)


def test_match_count_mismatch():
    with pytest.raises(MatchCountError) as exc:
        match_led_to_rtk([led(3 * i) for i in range(23)], np.zeros((24, 3)))
    assert "23" in str(exc.value) and "24" in str(exc.value)


# --- files ----------------------------------------------------------------


def test_frame_validation():
    with pytest.raises(ValueError):
        Frame(0, [0, 0], [[1, 2], [3, 4]], [True, True])
    with pytest.raises(ValueError):
        Frame(0, [0], [[np.nan, 2]], [True])
    Frame(0, [0], [[np.nan, 2]], [False])


def test_detection_file_roundtrip(tmp_path):
    target = board_corners(BoardSpec(100, 75))
    rng = np.random.default_rng(2)
    frames = []
    for f in range(3):
        uv = rng.uniform(0, 3000, size=(352, 2))
        valid = rng.random(352) > 0.2
        uv[~valid] = np.nan
        frames.append(Frame(f * 5, np.arange(352), uv, valid))
    det = DetectionSet(target, frames)
    save_detections(det, tmp_path / "d.csv")
    save_target(target, tmp_path / "t.txt")
    t2 = load_target(tmp_path / "t.txt")
    assert np.array_equal(t2.points_3d, target.points_3d) and t2.scale_m == target.scale_m
    det2 = load_detections(tmp_path / "d.csv", t2)
    for a, b in zip(det.frames, det2.frames):
        assert a.frame_id == b.frame_id
        assert np.array_equal(a.valid, b.valid)
        assert np.array_equal(a.uv[a.valid], b.uv[b.valid])


def test_detection_file_errors(tmp_path):
    target = board_corners(BoardSpec(100, 75))
    p = tmp_path / "d.csv"
    p.write_text("frame_id,point_id,u_px,v_px,valid\n0,351,1,2,1\n0,352,1,2,1\n")
    with pytest.raises(DetectionParseError) as exc:
        load_detections(p, target)
    assert exc.value.line == 3
    p.write_text("frame_id,point_id,u_px,v_px,valid\n0,1,1,2,1\n0,1,1,2,1\n")
    with pytest.raises(DetectionParseError, match="duplicate"):
        load_detections(p, target)
    p.write_text("frame_id,point_id,u_px,v_px,valid\n0,1,abc,2,1\n")
    with pytest.raises(DetectionParseError) as exc:
        load_detections(p, target)
    assert exc.value.line == 2
    p.write_text("frame_id,point_id,u_px,v_px,valid\n")
    with pytest.raises(DetectionParseError, match="no frames"):
        load_detections(p, target)


def test_target_file_errors(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 0 0 0\n2 0.1 0 0\n")
    with pytest.raises(DetectionParseError) as exc:
        load_target(p)
    assert exc.value.line == 2
