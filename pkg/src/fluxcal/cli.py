"""``fluxcal`` command line.

Every subcommand writes its outputs plus a ``*.manifest.json`` recording the
inputs (with content hashes), the resolved options, the seed and library
versions. Options resolve as: command-line flag, then ``--config`` JSON, then
built-in default.

Exit status: 0 success, 2 usage error, 3 invalid input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibrator import CalibrationError, CalibrationResult, LmFailure, calibrate
from .camera_model import ARRI_ALEXA_MINI, LensState, Pose, SensorSpec, UndistortError
from .detections import (anms_keyframes, detect_led, load_detections, load_strengths,
                         load_target, match_led_to_rtk, read_ppm, save_detections, save_target)
from .eval_harness import annotate, epe, load_points, load_predictions, sample_fov_points
from .geodesy import CameraSiting, export_mission, plan_flight, rtk_to_world
from .lut import LutEntry, LutTable, cross_validate, query, xval_summary
from .sampling_plan import build_grid, load_lens
from .synth_targets import (InfeasibleExperimentError, grid_cfl_range_px, make_experiment,
                            synth_detections)

log = logging.getLogger("fluxcal")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _f(x) -> str:
    return format(float(x), ".17g")


def _dump_json(obj, path) -> None:
    # json writes floats with repr, the shortest string that round-trips exactly
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    from . import kernels

    return {"fluxcal": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "kernel_backend": kernels.BACKEND}


def _manifest_path(out) -> Path:
    out = Path(out)
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.stem + ".manifest.json")


def write_manifest(args, inputs, outputs, extra=None) -> Path:
    options = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "command": args.command,
        "options": options,
        "config_file": args.config,
        "seed": getattr(args, "seed", None),
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs if Path(p).is_file()],
        "outputs": [str(p) for p in outputs],
        "versions": _versions(),
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = _manifest_path(outputs[0])
    _dump_json(manifest, path)
    return path


def _sensor(arg) -> SensorSpec:
    if arg in (None, "arri", "alexa-mini"):
        return ARRI_ALEXA_MINI
    with open(arg) as fh:
        return SensorSpec.from_dict(json.load(fh))


def _lens_state(text: str) -> LensState:
    try:
        lfl, fd = (float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"--lens-state expects 'lfl_mm,fd_m', got {text!r}") from None
    return LensState(lfl, fd)


def _ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_sample_grid(args) -> int:
    lens = load_lens(args.lens)
    grid = build_grid(lens)
    rows = [("lfl_mm", "fd_m")] + [(_f(l), _f(f)) for l, f in grid.cells]
    if args.out is None:
        csv.writer(sys.stdout).writerows(rows)
        return 0
    _parent(args.out)
    with open(args.out, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    inputs = [args.lens] if Path(args.lens).is_file() else []
    write_manifest(args, inputs, [args.out], {"lens": lens.to_dict(), "n_cells": len(grid)})
    return 0


def _synth_lens(lens, sensor, out_dir: Path, args, cells=None) -> list[dict]:
    grid = build_grid(lens)
    states = [LensState(l, f) for l, f in grid.cells]
    cfl_range = grid_cfl_range_px(states, sensor)
    records = []
    for i, st in enumerate(states):
        if cells is not None and i not in cells:
            continue
        name = f"exp_{i:03d}"
        try:
            exp = make_experiment(st, sensor, cfl_range, index=i)
        except InfeasibleExperimentError as exc:
            log.warning("%s (LFL=%s, FD=%s) skipped: %s", name, st.lfl_mm, st.fd_m, exc)
            records.append({"name": name, "index": i, "lfl_mm": st.lfl_mm, "fd_m": st.fd_m,
                            "status": "infeasible", "reason": str(exc)})
            continue
        data = synth_detections(exp, args.pixel_noise, args.rtk_noise, args.seed)
        d = _ensure_dir(out_dir / name)
        save_target(data.target, d / "target.txt")
        save_detections(data.detections, d / "detections.csv")
        gt = {"lens_state": {"lfl_mm": st.lfl_mm, "fd_m": st.fd_m}, "mode": exp.mode,
              "intrinsics": exp.gt_intrinsics.to_dict(), "sensor": sensor.to_dict(),
              "pixel_noise_px": args.pixel_noise, "rtk_noise_m": args.rtk_noise,
              "seed": args.seed, "index": i}
        _dump_json(gt, d / "gt.json")
        records.append({"name": name, "index": i, "lfl_mm": st.lfl_mm, "fd_m": st.fd_m,
                        "status": "ok", "mode": exp.mode,
                        "dropped_frames": data.dropped_frames})
    return records


def _cell_list(text):
    if text in (None, "all"):
        return None
    try:
        return {int(v) for v in str(text).split(",") if v.strip()}
    except ValueError:
        raise UsageError(f"--cells expects 'all' or comma-separated indices, got {text!r}") from None


def cmd_synth(args) -> int:
    lens = load_lens(args.lens)
    sensor = _sensor(args.sensor)
    out = _ensure_dir(args.out)
    records = _synth_lens(lens, sensor, out, args, _cell_list(args.cells))
    inputs = [p for p in (args.lens, args.sensor) if p and Path(p).is_file()]
    write_manifest(args, inputs, [out], {"lens": lens.to_dict(), "sensor": sensor.to_dict(),
                                         "experiments": records})
    return 0


def _load_rtk(path, siting_path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty RTK file")
    header = [h.strip().lower() for h in rows[0]]
    body = rows[1:]
    try:
        vals = np.array([[float(v) for v in r[:3]] for r in body], dtype=np.float64).reshape(-1, 3)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if header[:3] == ["lat", "lon", "alt"]:
        if siting_path is None:
            raise ValueError("lat/lon/alt RTK fixes need --siting to reach camera coordinates")
        with open(siting_path) as fh:
            siting = CameraSiting.from_dict(json.load(fh))
        from .geodesy import world_to_cam

        return world_to_cam(rtk_to_world(vals, siting), siting)
    if header[:3] == ["x", "y", "z"]:
        return vals
    raise ValueError(f"{path}: header must start with lat,lon,alt or x,y,z")


def cmd_detect_led(args) -> int:
    frames = sorted(Path(args.frames).glob("*.ppm"))
    if not frames:
        raise ValueError(f"{args.frames}: no .ppm frames")
    leds = []
    for i, p in enumerate(frames):
        obs = detect_led(read_ppm(p), frame_index=i)
        if obs is not None:
            leds.append(obs)
    rtk = _load_rtk(args.rtk, args.siting)
    det = match_led_to_rtk(leds, rtk, dedup=not args.no_dedup)
    _parent(args.out)
    target_out = args.target_out or str(Path(args.out).with_name(Path(args.out).stem + "_target.txt"))
    save_detections(det, args.out)
    save_target(det.target, target_out)
    methods = {str(m): sum(o.method == m for o in leds) for m in (1, 2, 3)}
    write_manifest(args, frames + [Path(args.rtk)], [args.out, target_out],
                   {"n_frames": len(frames), "n_detected": len(leds), "methods": methods})
    return 0


def cmd_keyframes(args) -> int:
    strengths = load_strengths(args.counts)
    keep = anms_keyframes(strengths, c_robust=args.c_robust, radius=args.radius,
                          full_count=args.full_count)
    if args.out is None:
        for fid in keep:
            print(fid)
        return 0
    _parent(args.out)
    with open(args.out, "w") as fh:
        fh.writelines(f"{fid}\n" for fid in keep)
    write_manifest(args, [args.counts], [args.out], {"n_selected": len(keep)})
    return 0


def _calibration_payload(res: CalibrationResult, state: LensState, sensor, mode, args) -> dict:
    out = {"lens_state": {"lfl_mm": state.lfl_mm, "fd_m": state.fd_m}, "mode": mode,
           "sensor": sensor.to_dict(), "seed": args.seed, "rollouts": args.rollouts}
    out.update(res.to_dict())
    return out


def cmd_calibrate(args) -> int:
    sensor = _sensor(args.sensor)
    state = _lens_state(args.lens_state)
    target = load_target(args.target)
    det = load_detections(args.detections, target)
    mode = args.mode or ("board" if target.planar else "drone")
    res = calibrate(det, state, sensor, rollouts=args.rollouts, seed=args.seed, jobs=args.jobs)
    _parent(args.out)
    _dump_json(_calibration_payload(res, state, sensor, mode, args), args.out)
    inputs = [args.detections, args.target] + ([args.sensor] if args.sensor and Path(args.sensor).is_file() else [])
    write_manifest(args, inputs, [args.out])
    return 0


def _result_files(results_dir) -> list[Path]:
    out = []
    for p in sorted(Path(results_dir).glob("*.json")):
        if p.name.endswith(".manifest.json") or p.name == "manifest.json":
            continue
        out.append(p)
    return out


def build_lut(result_paths, lens, sensor) -> LutTable:
    entries = []
    for p in result_paths:
        with open(p) as fh:
            d = json.load(fh)
        if "lens_state" not in d or "intrinsics" not in d:
            raise ValueError(f"{p}: not a calibration result (missing lens_state/intrinsics)")
        res = CalibrationResult.from_dict(d)
        entries.append(LutEntry(float(d["lens_state"]["lfl_mm"]), float(d["lens_state"]["fd_m"]),
                                res.intrinsics, d.get("mode", "board"), res.reproj_rms_px))
    if not entries:
        raise ValueError("no calibration results to build a table from")
    return LutTable(lens, sensor, entries)


def cmd_lut_build(args) -> int:
    lens = load_lens(args.lens)
    sensor = _sensor(args.sensor)
    files = _result_files(args.results)
    table = build_lut(files, lens, sensor)
    _parent(args.out)
    table.save(args.out)
    write_manifest(args, files, [args.out],
                   {"n_entries": len(table.entries), "n_cells": len(table.regions.cells),
                    "n_triangles": len(table.regions.triangles)})
    return 0


def cmd_lut_query(args) -> int:
    table = LutTable.load(args.lut)
    res = query(table, LensState(args.lfl, args.fd))
    payload = res.to_dict()
    text = json.dumps(payload, indent=2)
    if args.out is None:
        print(text)
        return 0
    _parent(args.out)
    _dump_json(payload, args.out)
    write_manifest(args, [args.lut], [args.out])
    return 0


def write_xval(records, path) -> None:
    from .camera_model import PARAM_NAMES

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "lfl_mm", "fd_m", "method", *PARAM_NAMES])
        for r in records:
            row = r.row()
            w.writerow([row["index"], _f(row["lfl_mm"]), _f(row["fd_m"]), row["method"],
                        *(_f(row[n]) for n in PARAM_NAMES)])


def cmd_lut_xval(args) -> int:
    table = LutTable.load(args.lut)
    records = cross_validate(table)
    summary = xval_summary(records)
    if args.out is None:
        write_xval(records, "/dev/stdout")
        return 0
    _parent(args.out)
    write_xval(records, args.out)
    write_manifest(args, [args.lut], [args.out], {"summary": summary})
    return 0


def cmd_plan_flight(args) -> int:
    sensor = _sensor(args.sensor)
    state = _lens_state(args.lens_state)
    with open(args.siting) as fh:
        siting = CameraSiting.from_dict(json.load(fh))
    kw = {} if args.margin is None else {"margin_m": args.margin}
    plan = plan_flight(state, sensor, args.cfl_tuned, siting, **kw)
    _parent(args.out)
    plan_path, csv_path = export_mission(plan, args.out)
    write_manifest(args, [args.siting], [plan_path, csv_path], {"n_waypoints": len(plan.waypoints)})
    return 0


def cmd_evaluate(args) -> int:
    table = LutTable.load(args.lut)
    annotations, row_errors = annotate(args.annotations, table)
    for e in row_errors:
        log.warning("%s:%d: %s", args.annotations, e.line, e.message)
    predictions = load_predictions(args.predictions)
    pose = None
    if args.pose:
        with open(args.pose) as fh:
            pose = Pose.from_dict(json.load(fh))
    sensor = _sensor(args.sensor)
    cloud = load_points(args.points)
    pts = sample_fov_points(cloud, annotations, args.n_points, args.seed, pose, sensor)
    summary = epe(annotations, predictions, pts, sensor=sensor)
    payload = summary.to_dict()
    payload["row_errors"] = [{"line": e.line, "message": e.message} for e in row_errors]
    payload["n_excluded_extrapolated"] = sum(a.provenance == "extrapolated" for a in annotations)
    payload["n_points_sampled"] = int(len(pts))
    _parent(args.out)
    _dump_json(payload, args.out)
    outputs = [args.out]
    if args.curve:
        _parent(args.curve)
        summary.write_curve(args.curve)
        outputs.append(args.curve)
    inputs = [args.lut, args.annotations, args.predictions, args.points] + ([args.pose] if args.pose else [])
    write_manifest(args, inputs, outputs)
    return 0


def cmd_pipeline(args) -> int:
    """synth -> calibrate every feasible cell -> lut-build -> lut-xval."""
    lens = load_lens(args.lens)
    sensor = _sensor(args.sensor)
    out = _ensure_dir(args.out)
    synth_dir = _ensure_dir(out / "synth")
    calib_dir = _ensure_dir(out / "calib")
    records = _synth_lens(lens, sensor, synth_dir, args, _cell_list(args.cells))
    failures = []
    for rec in records:
        if rec["status"] != "ok":
            continue
        d = synth_dir / rec["name"]
        state = LensState(rec["lfl_mm"], rec["fd_m"])
        target = load_target(d / "target.txt")
        det = load_detections(d / "detections.csv", target)
        try:
            res = calibrate(det, state, sensor, rollouts=args.rollouts, seed=args.seed,
                            jobs=args.jobs)
        except (CalibrationError, LmFailure) as exc:
            log.error("%s: calibration failed: %s", rec["name"], exc)
            failures.append({"name": rec["name"], "error": str(exc)})
            rec["status"] = "calibration_failed"
            continue
        _dump_json(_calibration_payload(res, state, sensor, rec["mode"], args),
                   calib_dir / f"{rec['name']}.json")
        rec["reverted"] = res.reverted
        rec["reproj_rms_px"] = res.reproj_rms_px
    files = _result_files(calib_dir)
    table = build_lut(files, lens, sensor)
    lut_path = out / "lut.json"
    table.save(lut_path)
    records_x = cross_validate(table)
    xval_path = out / "xval.csv"
    write_xval(records_x, xval_path)
    inputs = [p for p in (args.lens, args.sensor) if p and Path(p).is_file()]
    write_manifest(args, inputs, [out],
                   {"experiments": records, "failures": failures,
                    "n_results": len(files), "xval_summary": xval_summary(records_x)})
    return EXIT_NUMERIC if failures else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults (flags override it)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = _Parser(prog="fluxcal", description="Zoom-lens intrinsics toolkit.")
    p.add_argument("--version", action="version", version=f"fluxcal {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for rollouts")

    def noise(sp):
        sp.add_argument("--pixel-noise", type=float, default=0.0,
                        help="per-axis Gaussian pixel noise std (px)")
        sp.add_argument("--rtk-noise", type=float, default=0.005,
                        help="drone target position noise ball radius (m)")
        sp.add_argument("--cells", default="all", help="'all' or comma-separated grid indices")

    sp = add("sample-grid", cmd_sample_grid, "Emit the (LFL, FD) experiment grid as CSV.")
    sp.add_argument("--lens", required=True, help="lens JSON file or preset name")
    sp.add_argument("--out", help="output CSV (stdout if omitted)")

    sp = add("synth", cmd_synth, "Generate synthetic calibration experiments for a lens grid.")
    sp.add_argument("--lens", required=True, help="lens JSON file or preset name")
    sp.add_argument("--sensor", help="sensor JSON (default ARRI Alexa Mini)")
    sp.add_argument("--out", required=True, help="output directory")
    noise(sp)
    seeded(sp)

    sp = add("detect-led", cmd_detect_led, "Detect the drone LED in frames and pair with RTK fixes.")
    sp.add_argument("--frames", required=True, help="directory of .ppm frames")
    sp.add_argument("--rtk", required=True, help="CSV with lat,lon,alt or x,y,z header")
    sp.add_argument("--siting", help="camera siting JSON (needed for lat/lon/alt fixes)")
    sp.add_argument("--out", required=True, help="detections CSV")
    sp.add_argument("--target-out", help="target file (default <out>_target.txt)")
    sp.add_argument("--no-dedup", action="store_true", help="keep consecutive-frame detections")

    sp = add("keyframes", cmd_keyframes, "Select keyframes by suppression over detection counts.")
    sp.add_argument("--counts", required=True, help="CSV of frame_id,count")
    sp.add_argument("--c-robust", type=float, default=1.0, help="robustness factor")
    sp.add_argument("--radius", type=int, help="fixed suppression radius (default: elbow)")
    sp.add_argument("--full-count", type=int, default=352, help="count of a fully visible board")
    sp.add_argument("--out", help="output file of frame ids (stdout if omitted)")

    sp = add("calibrate", cmd_calibrate, "Calibrate intrinsics from detections.")
    sp.add_argument("--detections", required=True, help="detections CSV")
    sp.add_argument("--target", required=True, help="target points file")
    sp.add_argument("--lens-state", required=True, help="'lfl_mm,fd_m'")
    sp.add_argument("--sensor", help="sensor JSON (default ARRI Alexa Mini)")
    sp.add_argument("--rollouts", type=int, default=100, help="joint-optimization rollouts")
    sp.add_argument("--mode", choices=("board", "drone"), help="table entry source (default from target)")
    sp.add_argument("--out", required=True, help="result JSON")
    seeded(sp)
    jobs(sp)

    sp = add("lut-build", cmd_lut_build, "Assemble a lookup table from calibration results.")
    sp.add_argument("--results", required=True, help="directory of calibration result JSONs")
    sp.add_argument("--lens", required=True, help="lens JSON file or preset name")
    sp.add_argument("--sensor", help="sensor JSON (default ARRI Alexa Mini)")
    sp.add_argument("--out", required=True, help="table JSON")

    sp = add("lut-query", cmd_lut_query, "Look up intrinsics for one lens state.")
    sp.add_argument("--lut", required=True, help="table JSON")
    sp.add_argument("--lfl", type=float, required=True, help="lens focal length (mm)")
    sp.add_argument("--fd", type=float, required=True, help="focus distance (m)")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("lut-xval", cmd_lut_xval, "Leave-one-out cross-validation of a table.")
    sp.add_argument("--lut", required=True, help="table JSON")
    sp.add_argument("--out", help="per-entry error CSV (stdout if omitted)")

    sp = add("plan-flight", cmd_plan_flight, "Plan a 24-waypoint drone calibration flight.")
    sp.add_argument("--lens-state", required=True, help="'lfl_mm,fd_m'")
    sp.add_argument("--sensor", help="sensor JSON (default ARRI Alexa Mini)")
    sp.add_argument("--cfl-tuned", type=float, required=True, help="tuned CFL (m) for the footprint")
    sp.add_argument("--siting", required=True, help="camera siting JSON")
    sp.add_argument("--margin", type=float, help="safety margin inside the footprint (m)")
    sp.add_argument("--out", required=True, help="mission .plan path (a .csv is written alongside)")

    sp = add("evaluate", cmd_evaluate, "Score predictions with percent error and EPE.")
    sp.add_argument("--lut", required=True, help="table JSON providing ground truth")
    sp.add_argument("--annotations", required=True, help="CSV video_id,frame_index,lfl_mm,fd_m")
    sp.add_argument("--predictions", required=True, help="prediction CSV")
    sp.add_argument("--points", required=True, help="XYZ point cloud")
    sp.add_argument("--pose", help="JSON pose mapping the cloud into the camera frame")
    sp.add_argument("--sensor", help="sensor JSON (default ARRI Alexa Mini)")
    sp.add_argument("--n-points", type=int, default=100_000, help="points to sample")
    sp.add_argument("--out", required=True, help="summary JSON")
    sp.add_argument("--curve", help="cumulative EPE curve CSV")
    seeded(sp)

    sp = add("pipeline", cmd_pipeline, "synth, calibrate every cell, build and cross-validate a table.")
    sp.add_argument("--lens", required=True, help="lens JSON file or preset name")
    sp.add_argument("--sensor", help="sensor JSON (default ARRI Alexa Mini)")
    sp.add_argument("--rollouts", type=int, default=100, help="rollouts per calibration")
    sp.add_argument("--out", required=True, help="output directory")
    noise(sp)
    seeded(sp)
    jobs(sp)
    return p


def _apply_config(parser, argv) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if not known.config or known.command not in subparsers:
        return parser.parse_args(argv)
    try:
        with open(known.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValueError(f"{known.config}: config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    subparser = subparsers[known.command]
    dests = {a.dest for a in subparser._actions} - {"help", "config", "func"}
    unknown = set(cfg) - dests
    if unknown:
        raise UsageError(f"{known.config}: unknown options for {known.command}: {sorted(unknown)}")
    # config values become defaults, so explicit flags still win; options the
    # config supplies are no longer required on the command line
    subparser.set_defaults(**cfg)
    for action in subparser._actions:
        if action.dest in cfg:
            action.required = False
    return parser.parse_args(argv)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, LmFailure, UndistortError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
