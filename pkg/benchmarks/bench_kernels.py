"""Benchmark the compiled geometry kernels against the numpy fallback.

Run from the repository root:

    python benchmarks/bench_kernels.py [--repeats 5]

Workloads mirror the hot paths: batched SDF queries (metric oracles),
batched FK probe points (clearance checks), trajectory clearance matrices
(planner edges, rollout scoring), and one full RRT re-plan.
"""

import argparse
import time

import numpy as np

from safereach import kernels
from safereach import kinematics as kin
from safereach import scenario as sc
from safereach.geometry import ObbObstacle


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not kernels.HAVE_COMPILED:
        print("compiled kernels unavailable; nothing to compare")
        return 1

    chain = kin.default_chain()
    off, axes, is_joint, rep_idx, radii = chain._arrays
    rng = np.random.default_rng(0)
    box = ObbObstacle.from_yaw([0.5, 0.2, 0.0], 0.4, [0.06, 0.05, 0.07])

    pts = rng.normal(size=(1_000_000, 3))
    qs_large = rng.uniform(-3, 3, size=(100_000, 3))
    qs_traj = rng.uniform(-3, 3, size=(80, 3))

    workloads = [
        ("obb_sdf_batch (1e6 pts)",
         lambda k: k.obb_sdf_batch(pts, box.center, box.rotation, box.half_extents)),
        ("fk_points_batch (1e5 cfg)",
         lambda k: k.fk_points_batch(qs_large, off, axes, is_joint, rep_idx)),
        ("clearance_batch (1e5 cfg)",
         lambda k: k.clearance_batch(qs_large, off, axes, is_joint, rep_idx, radii,
                                     box.center, box.rotation, box.half_extents)),
        ("min_clearance (80-step traj x 2000)",
         lambda k: [k.min_clearance(qs_traj, off, axes, is_joint, rep_idx, radii,
                                    box.center, box.rotation, box.half_extents)
                    for _ in range(2000)]),
    ]

    print(f"{'workload':38s} {'numpy':>10s} {'compiled':>10s} {'speedup':>9s}")
    for name, fn in workloads:
        t_py = timeit(lambda: fn(kernels.pure), args.repeats)
        t_c = timeit(lambda: fn(kernels.compiled), args.repeats)
        print(f"{name:38s} {t_py*1e3:9.1f}ms {t_c*1e3:9.1f}ms {t_py/t_c:8.1f}x")

    # end-to-end: one episode generation (planner + clearance dominated)
    def episode(backend):
        prev = (kernels.obb_sdf_batch, kernels.fk_points_batch,
                kernels.clearance_batch, kernels.min_clearance)
        kernels.obb_sdf_batch = backend.obb_sdf_batch
        kernels.fk_points_batch = backend.fk_points_batch
        kernels.clearance_batch = backend.clearance_batch
        kernels.min_clearance = backend.min_clearance
        try:
            for i in range(5):
                sc.generate_episode(chain, sc.derive_seed(42, i, 0))
        finally:
            (kernels.obb_sdf_batch, kernels.fk_points_batch,
             kernels.clearance_batch, kernels.min_clearance) = prev

    t_py = timeit(lambda: episode(kernels.pure), max(1, args.repeats // 2))
    t_c = timeit(lambda: episode(kernels.compiled), max(1, args.repeats // 2))
    print(f"{'generate_episode x5 (end to end)':38s} {t_py*1e3:9.1f}ms "
          f"{t_c*1e3:9.1f}ms {t_py/t_c:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
