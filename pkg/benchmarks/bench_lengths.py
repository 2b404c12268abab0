"""Muscle-length kernel: numba against the numpy fallback.

Run with ``python3 benchmarks/bench_lengths.py [batch] [repeats]``.  Both paths
are timed on the same postures and checked to agree before timing.
"""
import sys
import time

import numpy as np

from mae import model as geo
from mae._accel import HAVE_NUMBA


def numba_lengths(m, theta):
    return geo._lengths_kernel(theta, m.joint_axes, m._link_len, m._pt_link, m._pt_off, m._route_ptr)


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(batch=20000, repeats=5):
    m = geo.default_model()
    rng = np.random.default_rng(0)
    lo, hi = m.joint_limits[:, 0], m.joint_limits[:, 1]
    theta = rng.uniform(lo, hi, size=(batch, m.D))

    ref = geo._lengths_numpy(m, theta)
    print(f"batch {batch}, D={m.D}, M={m.M}, best of {repeats}")
    t_np = best_of(lambda: geo._lengths_numpy(m, theta), repeats)
    print(f"numpy  {1e3 * t_np:9.2f} ms  {batch / t_np:12.0f} postures/s")
    if not HAVE_NUMBA:
        print("numba not installed; numpy only")
        return
    got = numba_lengths(m, theta)  # compile outside the timed region
    err = np.max(np.abs(got - ref))
    assert err < 1e-9, f"numba and numpy disagree by {err}"
    t_nb = best_of(lambda: numba_lengths(m, theta), repeats)
    print(f"numba  {1e3 * t_nb:9.2f} ms  {batch / t_nb:12.0f} postures/s")
    print(f"speedup {t_np / t_nb:.1f}x, max difference {err:.1e} mm")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
