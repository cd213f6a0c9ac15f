"""Intrinsics calibration from 2D-3D correspondences.

Stages:

1. per-frame pose initialisation (homography or DLT, then pose-only LM);
2. pinhole focal length from the thin-lens model at the recorded lens state;
3. fixed-point distortion initialisation, which re-ties fx/fy and re-centres
   the principal point after every inner optimisation;
4. sequential joint refinement with outlier rejection, repeated over several
   random frame orders, with a representative rollout chosen by median
   agreement and a principal-point drift guard.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .camera_model import (
    Intrinsics,
    LensState,
    Pose,
    SensorSpec,
    cfl_mm_to_px,
    thin_lens_cfl,
)
from .detections import DetectionSet

log = logging.getLogger(__name__)

PRINCIPAL_DRIFT_FRAC = 0.02
OUTLIER_FLOOR_PX = 2.0
OUTLIER_MAD_MULT = 3.0


class CalibrationError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class LmFailure(RuntimeError):
    pass


class FixedPointInitError(CalibrationError):
    def __init__(self, round_index: int, message: str):
        self.round_index = round_index
        super().__init__("fixed_point_init", f"round {round_index}: {message}")


@dataclass(frozen=True)
class LmConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5
    convergence_tol: float = 1e-10
    huber_delta_px: float = 1.0
    max_damping: float = 1e12
    incremental_iterations: int = 3

    def __post_init__(self):
        if not (self.max_iterations > 0 and self.initial_damping > 0 and self.convergence_tol > 0
                and self.huber_delta_px > 0 and self.max_damping > 0
                and self.incremental_iterations > 0):
            raise ValueError("LmConfig values must be positive")
        if not (self.damping_up > 1.0 > self.damping_down > 0.0):
            raise ValueError("LmConfig requires damping_up > 1 > damping_down > 0")


@dataclass(frozen=True)
class RolloutSummary:
    fx: float
    fy: float
    cx: float
    cy: float
    score: float = 0.0
    outlier: bool = False
    failed: bool = False
    order_seed: int = 0
    reproj_rms_px: float = float("nan")


@dataclass(frozen=True)
class ReprojStats:
    rms_px: float
    n_active: int
    n_rejected: int


@dataclass
class CalibrationResult:
    intrinsics: Intrinsics
    poses: dict
    reproj_rms_px: float
    stage_history: dict
    reverted: bool
    rollout_stats: list
    representative: int = 0
    excluded_frames: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "poses": {str(k): p.to_dict() for k, p in self.poses.items()},
            "reproj_rms_px": self.reproj_rms_px,
            "stage_history": {k: v.to_dict() for k, v in self.stage_history.items()},
            "reverted": self.reverted,
            "rollout_stats": [asdict(r) for r in self.rollout_stats],
            "representative": self.representative,
            "excluded_frames": list(self.excluded_frames),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationResult":
        return cls(
            intrinsics=Intrinsics.from_dict(data["intrinsics"]),
            poses={int(k): Pose.from_dict(v) for k, v in data["poses"].items()},
            reproj_rms_px=float(data["reproj_rms_px"]),
            stage_history={k: Intrinsics.from_dict(v) for k, v in data["stage_history"].items()},
            reverted=bool(data["reverted"]),
            rollout_stats=[RolloutSummary(**r) for r in data["rollout_stats"]],
            representative=int(data.get("representative", 0)),
            excluded_frames=list(data.get("excluded_frames", [])),
        )


# ---------------------------------------------------------------------------
# problem layout and the LM core
# ---------------------------------------------------------------------------


@dataclass
class _Problem:
    """Flattened valid observations of a detection set."""

    frame_ids: list
    points: np.ndarray       # (K, 3) metric target coordinates
    frame_index: np.ndarray  # (K,) index into frame_ids
    observed: np.ndarray     # (K, 2)

    @classmethod
    def from_detections(cls, det: DetectionSet) -> "_Problem":
        metric = det.target.metric_points
        pts, fidx, obs, ids = [], [], [], []
        for fr in det.frames:
            if fr.n_valid == 0:
                continue
            f = len(ids)
            ids.append(fr.frame_id)
            sel = fr.point_ids[fr.valid]
            pts.append(metric[sel])
            obs.append(fr.uv[fr.valid])
            fidx.append(np.full(len(sel), f, dtype=np.intp))
        if not ids:
            raise CalibrationError("input", "no valid observations")
        return cls(ids, np.concatenate(pts), np.concatenate(fidx), np.concatenate(obs))

    @property
    def n_frames(self) -> int:
        return len(self.frame_ids)

    def frame_mask(self, f: int) -> np.ndarray:
        return self.frame_index == f


@dataclass
class LmResult:
    intr: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    cost: float
    iterations: int
    cost_history: list


def _pose_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    R = np.array([p.rotation for p in poses], dtype=np.float64).reshape(-1, 3, 3)
    t = np.array([p.translation for p in poses], dtype=np.float64).reshape(-1, 3)
    return R, t


def _solve_damped(A, B, C, ga, gp, lam, free_intr, optimize_poses):
    """Damped Gauss-Newton step via the Schur complement on the pose blocks."""
    A = A.copy()
    B = B.copy()
    ga = ga.copy()
    fixed = ~free_intr
    A[fixed, :] = 0.0
    A[:, fixed] = 0.0
    B[:, fixed, :] = 0.0
    ga[fixed] = 0.0
    dA = np.diag(A).copy()
    dA[fixed] = 1.0
    dA = np.maximum(dA, 1e-12 * max(dA.max(), 1.0))
    Ad = A + np.diag(lam * dA)
    Ad[fixed, fixed] = 1.0
    if not optimize_poses:
        da = np.linalg.solve(Ad, -ga)
        return da, np.zeros_like(gp)

    dC = np.diagonal(C, axis1=1, axis2=2).copy()
    empty = dC.sum(axis=1) <= 0.0
    scale = np.maximum(dC.max(axis=1, keepdims=True), 1.0)
    dC = np.maximum(dC, 1e-12 * scale)
    Cd = C + lam * dC[:, :, None] * np.eye(6)
    Cd[empty] = np.eye(6)
    Cinv = np.linalg.inv(Cd)
    BCinv = B @ Cinv
    S = Ad - np.einsum("fij,fkj->ik", BCinv, B)
    rhs = -ga + np.einsum("fij,fj->i", BCinv, gp)
    da = np.linalg.solve(S, rhs)
    da[fixed] = 0.0
    dp = -np.einsum("fij,fj->fi", Cinv, gp + np.einsum("fji,j->fi", B, da))
    dp[empty] = 0.0
    return da, dp


def _so3_exp_batch(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=1)
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -w[:, 2], w[:, 1], -w[:, 0]
    K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = w[:, 2], -w[:, 1], w[:, 0]
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(th) / th)
    b = np.where(small, 0.5, (1.0 - np.cos(th)) / th**2)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def _apply_pose_step(R, t, dp):
    return _so3_exp_batch(dp[:, :3]) @ R, t + dp[:, 3:]


def levenberg_marquardt(points, frame_index, observed, weights, intr, rotations, translations,
                        cfg: LmConfig, free_intr=None, optimize_poses: bool = True,
                        huber_delta: float = 0.0, max_iterations: int | None = None) -> LmResult:
    """Minimise the (optionally Huber-robust) reprojection cost.

    Steps that increase the cost, push an active point behind the camera or
    produce non-finite values are rejected, so the accepted cost sequence is
    non-increasing. Raises :class:`LmFailure` when the starting point itself
    is invalid.
    """
    n_frames = rotations.shape[0]
    intr = np.array(intr, dtype=np.float64)
    R = np.array(rotations, dtype=np.float64)
    t = np.array(translations, dtype=np.float64)
    free = np.ones(8, dtype=bool) if free_intr is None else np.asarray(free_intr, dtype=bool)
    act = weights > 0
    pts, fi, obs, w = points[act], frame_index[act], observed[act], weights[act]
    iters_cap = cfg.max_iterations if max_iterations is None else max_iterations
    if pts.shape[0] == 0:
        return LmResult(intr, R, t, 0.0, 0, [0.0])

    cost, A, B, C, ga, gp, n_behind = kernels.normal_equations(
        pts, fi, R, t, intr, obs, w, huber_delta, n_frames)
    if n_behind or not math.isfinite(cost):
        raise LmFailure(f"invalid starting point ({n_behind} points behind camera, cost {cost})")
    history = [cost]
    lam = cfg.initial_damping
    # below 1e-9 px rms there is nothing left to fit
    floor = 1e-18 * len(pts)
    it = 0
    while it < iters_cap and cost > floor:
        it += 1
        try:
            da, dp = _solve_damped(A, B, C, ga, gp, lam, free, optimize_poses)
        except np.linalg.LinAlgError:
            da = None
        accepted = False
        if da is not None and np.all(np.isfinite(da)) and np.all(np.isfinite(dp)):
            intr_n = intr + da
            Rn, tn = _apply_pose_step(R, t, dp) if optimize_poses else (R, t)
            if intr_n[0] > 0 and intr_n[1] > 0:
                c_new, nb = kernels.robust_cost(pts, fi, Rn, tn, intr_n, obs, w, huber_delta)
                if nb == 0 and math.isfinite(c_new) and c_new <= cost:
                    accepted = True
        if accepted:
            rel = (cost - c_new) / cost if cost > 0 else 0.0
            intr, R, t = intr_n, Rn, tn
            lam = max(lam * cfg.damping_down, 1e-15)
            if it >= iters_cap or rel < cfg.convergence_tol:
                cost = c_new
                history.append(cost)
                break
            _, A, B, C, ga, gp, _ = kernels.normal_equations(
                pts, fi, R, t, intr, obs, w, huber_delta, n_frames)
            # keep the cost the acceptance test saw so the history is monotone
            cost = c_new
            history.append(cost)
        else:
            lam *= cfg.damping_up
            if lam > cfg.max_damping:
                break
    return LmResult(intr, R, t, cost, it, history)


def _residual_norms(prob: _Problem, intr, R, t) -> np.ndarray:
    res = kernels.residuals(prob.points, prob.frame_index, R, t, intr, prob.observed)
    return np.sqrt(np.sum(res * res, axis=1))


def _rms(e: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return float("nan")
    return float(np.sqrt(np.mean(e[mask] ** 2)))


# ---------------------------------------------------------------------------
# stage 1: poses
# ---------------------------------------------------------------------------


def _normalize_2d(x):
    c = x.mean(axis=0)
    d = np.sqrt(np.sum((x - c) ** 2, axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return T


def _normalize_3d(X):
    c = X.mean(axis=0)
    d = np.sqrt(np.sum((X - c) ** 2, axis=1)).mean()
    s = math.sqrt(3.0) / d if d > 0 else 1.0
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * c
    return T


def _homography(src, dst) -> np.ndarray:
    Ts, Td = _normalize_2d(src), _normalize_2d(dst)
    s = (Ts @ np.c_[src, np.ones(len(src))].T).T
    d = (Td @ np.c_[dst, np.ones(len(dst))].T).T
    n = len(s)
    M = np.zeros((2 * n, 9))
    M[0::2, 0:3] = -s
    M[1::2, 3:6] = -s
    M[0::2, 6:9] = d[:, :1] * s
    M[1::2, 6:9] = d[:, 1:2] * s
    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    Hn = Vt[-1].reshape(3, 3)
    return np.linalg.inv(Td) @ Hn @ Ts


def _plane_frame(X):
    o = X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X - o)
    E = Vt.T.copy()
    if np.linalg.det(E) < 0:
        E[:, 2] = -E[:, 2]
    return o, E


def _pose_from_homography(X, xn) -> tuple[np.ndarray, np.ndarray]:
    o, E = _plane_frame(X)
    ab = (X - o) @ E[:, :2]
    H = _homography(ab, xn)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2, tr = lam * h1, lam * h2, lam * h3
    M = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(M)
    Rp = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    R = Rp @ E.T
    t = tr - R @ o
    return R, t


def _pose_from_dlt(X, xn) -> tuple[np.ndarray, np.ndarray]:
    T3, T2 = _normalize_3d(X), _normalize_2d(xn)
    Xh = (T3 @ np.c_[X, np.ones(len(X))].T).T
    xh = (T2 @ np.c_[xn, np.ones(len(xn))].T).T
    n = len(Xh)
    M = np.zeros((2 * n, 12))
    M[0::2, 0:4] = Xh
    M[1::2, 4:8] = Xh
    M[0::2, 8:12] = -xh[:, :1] * Xh
    M[1::2, 8:12] = -xh[:, 1:2] * Xh
    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    P = np.linalg.inv(T2) @ Vt[-1].reshape(3, 4) @ T3
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = P[:, :3]
    U, S, Vt = np.linalg.svd(M)
    R = U @ Vt
    t = P[:, 3] / S.mean()
    return R, t


def _rank(points, tol=1e-9) -> int:
    c = points - points.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def init_poses(det: DetectionSet, intr_guess: Intrinsics, lm: LmConfig | None = None):
    """Initial camera-from-target pose for each frame.

    Returns ``(poses, excluded)`` where ``poses`` maps frame id to Pose and
    ``excluded`` lists frames too weakly constrained to initialise.
    """
    from .camera_model import pixels_to_normalized

    lm = lm or LmConfig()
    metric = det.target.metric_points
    planar = det.target.planar
    poses: dict[int, Pose] = {}
    excluded: list[int] = []
    kvec = intr_guess.as_array()
    for fr in det.frames:
        sel = fr.point_ids[fr.valid]
        X = metric[sel]
        uv = fr.uv[fr.valid]
        need = 4 if planar else 6
        rank_ok = _rank(X) >= (2 if planar else 3)
        if len(sel) < need or not rank_ok:
            log.info("frame %s excluded: %d usable points", fr.frame_id, len(sel))
            excluded.append(fr.frame_id)
            continue
        xn = pixels_to_normalized(uv, intr_guess)
        try:
            R, t = (_pose_from_homography if planar else _pose_from_dlt)(X, xn)
            # a per-frame k1 absorbs most of the unmodelled distortion, which
            # would otherwise bias the pose (badly so for tilted boards)
            free = np.zeros(8, dtype=bool)
            free[4] = len(X) >= 8
            res = levenberg_marquardt(
                X, np.zeros(len(X), dtype=np.intp), uv, np.ones(len(X)), kvec,
                R[None], t[None], lm, free_intr=free)
        except (np.linalg.LinAlgError, LmFailure) as exc:
            log.info("frame %s excluded: %s", fr.frame_id, exc)
            excluded.append(fr.frame_id)
            continue
        R, t = res.rotations[0], res.translations[0]
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
        if np.any((X @ R.T + t)[:, 2] <= 0):
            excluded.append(fr.frame_id)
            continue
        poses[fr.frame_id] = Pose(R, t)
    if not poses:
        raise CalibrationError("init_poses", "every frame failed pose initialisation")
    return poses, excluded


# ---------------------------------------------------------------------------
# stage 2: focal length
# ---------------------------------------------------------------------------


def init_cfl(state: LensState, sensor: SensorSpec) -> Intrinsics:
    """Centred zero-distortion pinhole at the thin-lens focal length."""
    f = cfl_mm_to_px(thin_lens_cfl(state), sensor)
    return Intrinsics.pinhole(f, sensor)


# ---------------------------------------------------------------------------
# stage 3: fixed-point distortion initialisation
# ---------------------------------------------------------------------------


def _tie_and_centre(k: np.ndarray, center, zero_distortion: bool) -> np.ndarray:
    k = k.copy()
    f = 0.5 * (k[0] + k[1])
    k[0] = k[1] = f
    k[2], k[3] = center
    if zero_distortion:
        k[4:] = 0.0
    return k


def _fixed_point(prob: _Problem, k0: np.ndarray, R, t, center, extra_lm: bool, lm: LmConfig):
    w = np.ones(len(prob.points))
    k = k0.copy()
    rounds = [("reset", True)] * 3
    if extra_lm:
        rounds.append(("free", False))
    rounds += [("retie", False)] * 4
    for i, (kind, zero_dist) in enumerate(rounds, start=1):
        try:
            res = levenberg_marquardt(prob.points, prob.frame_index, prob.observed, w, k, R, t, lm)
        except LmFailure as exc:
            raise FixedPointInitError(i, str(exc)) from None
        k, R, t = res.intr, res.rotations, res.translations
        if kind != "free":
            k = _tie_and_centre(k, center, zero_dist)
    return k, R, t


def fixed_point_init(det: DetectionSet, intr0: Intrinsics, sensor: SensorSpec,
                     extra_lm: bool = True, lm: LmConfig | None = None, poses=None,
                     return_poses: bool = False):
    """Distortion initialisation by alternating LM and parameter resets.

    Three LM rounds each followed by averaging fx/fy, centring the principal
    point and zeroing distortion; an optional unconstrained round; then four
    LM rounds each followed by the averaging and centring only. The result
    always has ``fx == fy`` and ``(cx, cy)`` at the image centre.
    """
    lm = lm or LmConfig()
    if poses is None:
        poses, _ = init_poses(det, intr0, lm)
    det = det.subset(poses)
    prob = _Problem.from_detections(det)
    R, t = _pose_arrays([poses[f] for f in prob.frame_ids])
    k, R, t = _fixed_point(prob, intr0.as_array(), R, t, sensor.center, extra_lm, lm)
    intr = Intrinsics.from_array(k)
    if return_poses:
        return intr, {f: Pose(R[i], t[i]) for i, f in enumerate(prob.frame_ids)}
    return intr


# ---------------------------------------------------------------------------
# stage 4: sequential joint optimisation
# ---------------------------------------------------------------------------


def _reject_outliers(e: np.ndarray, active: np.ndarray) -> np.ndarray:
    if active.sum() < 2:
        return active
    ea = e[active]
    mad = float(np.median(np.abs(ea - np.median(ea))))
    thresh = max(OUTLIER_FLOOR_PX, OUTLIER_MAD_MULT * mad)
    return active & (e <= thresh)


def _joint(prob: _Problem, k, R, t, order_seed: int, lm: LmConfig):
    rng = np.random.default_rng(order_seed)
    order = rng.permutation(prob.n_frames)
    included = np.zeros(prob.n_frames, dtype=bool)
    alive = np.ones(len(prob.points), dtype=bool)
    delta = lm.huber_delta_px
    for f in order:
        included[f] = True
        active = alive & included[prob.frame_index]
        res = levenberg_marquardt(prob.points, prob.frame_index, prob.observed,
                                  active.astype(np.float64), k, R, t, lm,
                                  huber_delta=delta, max_iterations=lm.incremental_iterations)
        k, R, t = res.intr, res.rotations, res.translations
        e = _residual_norms(prob, k, R, t)
        alive &= ~(active & ~_reject_outliers(e, active))
    res = levenberg_marquardt(prob.points, prob.frame_index, prob.observed,
                              alive.astype(np.float64), k, R, t, lm, huber_delta=delta)
    k, R, t = res.intr, res.rotations, res.translations
    e = _residual_norms(prob, k, R, t)
    stats = ReprojStats(_rms(e, alive), int(alive.sum()), int((~alive).sum()))
    return k, R, t, stats


def joint_optimize(det: DetectionSet, intr_init: Intrinsics, poses: dict, order_seed: int,
                   lm: LmConfig | None = None):
    """Add frames one at a time in a seeded random order, re-optimising all
    parameters and deactivating outlying observations after each addition.

    ``poses`` maps frame id to initial Pose; frames without one are ignored.
    Returns ``(intrinsics, poses, ReprojStats)``.
    """
    lm = lm or LmConfig()
    prob = _Problem.from_detections(det.subset(poses))
    R, t = _pose_arrays([poses[f] for f in prob.frame_ids])
    k, R, t, stats = _joint(prob, intr_init.as_array(), R, t, order_seed, lm)
    out = {f: Pose(_orthonormal(R[i]), t[i]) for i, f in enumerate(prob.frame_ids)}
    return Intrinsics.from_array(k), out, stats


def _orthonormal(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _rollout_job(args):
    prob, k, R, t, order_seed, lm = args
    try:
        k, R, t, stats = _joint(prob, k, R, t, order_seed, lm)
    except (LmFailure, np.linalg.LinAlgError, ValueError) as exc:
        return None, str(exc)
    if not np.all(np.isfinite(k)) or k[0] <= 0 or k[1] <= 0:
        return None, "non-finite intrinsics"
    return (k, R, t, stats), None


# ---------------------------------------------------------------------------
# representative selection
# ---------------------------------------------------------------------------


def _iqr_flags(values: np.ndarray) -> np.ndarray:
    q1, q3 = np.percentile(values, [25, 75])
    iqr = q3 - q1
    # round-off between otherwise identical rollouts must not count as spread
    slack = 1.5 * iqr + 1e-9 * abs(float(np.median(values)))
    return (values < q1 - slack) | (values > q3 + slack)


def _scores(rollouts, idx):
    vals = np.array([[rollouts[i].fx, rollouts[i].fy, rollouts[i].cx, rollouts[i].cy] for i in idx])
    med = np.median(vals, axis=0)
    return (np.abs(vals - med) / np.abs(med)).sum(axis=1) * 100.0


def score_rollouts(rollouts: list[RolloutSummary]) -> list[RolloutSummary]:
    """Fill in outlier flags and scores (failed rollouts are left untouched)."""
    ok = [i for i, r in enumerate(rollouts) if not r.failed]
    if not ok:
        raise CalibrationError("select_representative", "no successful rollouts")
    vals = np.array([[rollouts[i].fx, rollouts[i].fy, rollouts[i].cx, rollouts[i].cy] for i in ok])
    flagged = np.zeros(len(ok), dtype=bool)
    for col in range(4):
        flagged |= _iqr_flags(vals[:, col])
    survivors = [i for i, f in zip(ok, flagged) if not f]
    if not survivors:
        log.warning("every rollout flagged as an outlier; scoring all of them")
        survivors = ok
    scores = dict(zip(survivors, _scores(rollouts, survivors)))
    out = []
    for i, r in enumerate(rollouts):
        if r.failed:
            out.append(r)
            continue
        out.append(RolloutSummary(r.fx, r.fy, r.cx, r.cy, float(scores.get(i, float("inf"))),
                                  i not in scores, False, r.order_seed, r.reproj_rms_px))
    return out


def select_representative(rollouts: list[RolloutSummary]) -> int:
    """Index of the rollout closest to the per-parameter medians."""
    scored = score_rollouts(rollouts)
    best = None
    for i, r in enumerate(scored):
        if r.failed or r.outlier and any(not s.outlier and not s.failed for s in scored):
            continue
        if best is None or r.score < scored[best].score:
            best = i
    return best


def principal_point_drifted(intr: Intrinsics, sensor: SensorSpec) -> bool:
    cx0, cy0 = sensor.center
    return (abs(intr.cx - cx0) > PRINCIPAL_DRIFT_FRAC * cx0
            or abs(intr.cy - cy0) > PRINCIPAL_DRIFT_FRAC * cy0)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


def rollout_seeds(seed: int, n: int) -> list[int]:
    return [int(np.random.default_rng([seed, i]).integers(2**63 - 1)) for i in range(n)]


def calibrate(det: DetectionSet, state: LensState, sensor: SensorSpec, rollouts: int = 100,
              seed: int = 0, lm: LmConfig | None = None, extra_lm: bool = True,
              jobs: int = 1) -> CalibrationResult:
    """Run all four stages and return the representative calibration."""
    if rollouts < 1:
        raise ValueError("rollouts must be >= 1")
    lm = lm or LmConfig()
    try:
        intr2 = init_cfl(state, sensor)
    except ValueError as exc:
        raise CalibrationError("init_cfl", str(exc)) from exc
    poses, excluded = init_poses(det, intr2, lm)
    det = det.subset(poses)
    prob = _Problem.from_detections(det)
    R, t = _pose_arrays([poses[f] for f in prob.frame_ids])
    k3, R3, t3 = _fixed_point(prob, intr2.as_array(), R, t, sensor.center, extra_lm, lm)
    intr3 = Intrinsics.from_array(k3)

    seeds = rollout_seeds(seed, rollouts)
    tasks = [(prob, k3, R3, t3, s, lm) for s in seeds]
    if jobs > 1 and rollouts > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_rollout_job, tasks))
    else:
        outcomes = [_rollout_job(task) for task in tasks]

    summaries = []
    for s, (out, err) in zip(seeds, outcomes):
        if out is None:
            log.warning("rollout with order seed %d failed: %s", s, err)
            summaries.append(RolloutSummary(*(float("nan"),) * 4, failed=True, order_seed=s))
        else:
            k = out[0]
            summaries.append(RolloutSummary(float(k[0]), float(k[1]), float(k[2]), float(k[3]),
                                            order_seed=s, reproj_rms_px=out[3].rms_px))
    if all(r.failed for r in summaries):
        raise CalibrationError("joint_optimize", "every rollout failed")
    best = select_representative(summaries)
    summaries = score_rollouts(summaries)
    k4, R4, t4, stats = outcomes[best][0]
    intr4 = Intrinsics.from_array(k4)

    reverted = principal_point_drifted(intr4, sensor)
    if reverted:
        # keep the stage-3 intrinsics bit-for-bit; only the poses are re-fitted
        w = np.ones(len(prob.points))
        res = levenberg_marquardt(prob.points, prob.frame_index, prob.observed, w, k3, R3, t3,
                                  lm, free_intr=np.zeros(8, dtype=bool))
        final_k, final_R, final_t = k3, res.rotations, res.translations
        e = _residual_norms(prob, final_k, final_R, final_t)
        rms = _rms(e, np.ones(len(e), dtype=bool))
    else:
        final_k, final_R, final_t = k4, R4, t4
        rms = stats.rms_px
    final_poses = {f: Pose(_orthonormal(final_R[i]), final_t[i])
                   for i, f in enumerate(prob.frame_ids)}
    return CalibrationResult(
        intrinsics=Intrinsics.from_array(final_k),
        poses=final_poses,
        reproj_rms_px=rms,
        stage_history={"stage2": intr2, "stage3": intr3, "stage4": intr4},
        reverted=reverted,
        rollout_stats=summaries,
        representative=best,
        excluded_frames=excluded,
    )
