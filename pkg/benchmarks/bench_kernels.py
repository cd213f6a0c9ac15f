"""Time the compiled and numpy kernel backends on a board-sized problem.

    python3 benchmarks/bench_kernels.py [--frames 100] [--repeat 5]
"""

import argparse
import time

import numpy as np

from fluxcal import kernels
from fluxcal.camera_model import so3_exp


def make_problem(n_frames, n_per, seed=0):
    rng = np.random.default_rng(seed)
    R = np.array([so3_exp(rng.normal(scale=0.3, size=3)) for _ in range(n_frames)])
    t = np.column_stack([rng.uniform(-0.2, 0.2, n_frames), rng.uniform(-0.2, 0.2, n_frames),
                         rng.uniform(1.5, 3.0, n_frames)])
    pts = rng.uniform(-0.4, 0.4, size=(n_frames * n_per, 3))
    fidx = np.repeat(np.arange(n_frames), n_per)
    intr = np.array([2100.0, 2090.0, 1700.0, 1110.0, -0.2, 0.04, 1e-3, -2e-3])
    obs = kernels.get_backend("python").residuals(pts, fidx, R, t, intr, np.zeros((len(pts), 2)))
    obs += rng.normal(scale=0.5, size=obs.shape)
    w = np.ones(len(pts))
    return pts, fidx, R, t, intr, obs, w


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--points", type=int, default=88, help="points per frame")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    pts, fidx, R, t, intr, obs, w = make_problem(args.frames, args.points)
    cam = pts + [0.0, 0.0, 2.0]
    calls = {
        "project_points": lambda m: m.project_points(cam, intr),
        "residuals": lambda m: m.residuals(pts, fidx, R, t, intr, obs),
        "jacobians": lambda m: m.jacobians(pts, fidx, R, t, intr),
        "robust_cost": lambda m: m.robust_cost(pts, fidx, R, t, intr, obs, w, 1.0),
        "normal_equations": lambda m: m.normal_equations(pts, fidx, R, t, intr, obs, w, 1.0,
                                                         args.frames),
    }
    backends = kernels.available_backends()
    print(f"{len(pts)} observations over {args.frames} frames, best of {args.repeat}")
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + "     speedup")
    for name, call in calls.items():
        ms = {b: 1e3 * best_of(lambda: call(kernels.get_backend(b)), args.repeat)
              for b in backends}
        row = f"{name:<18}" + "".join(f"{ms[b]:>10.3f}ms" for b in backends)
        if "cython" in ms:
            row += f"  {ms['python'] / ms['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
