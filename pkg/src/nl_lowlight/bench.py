"""Timing harness for the hot kernels: numpy fallback vs numba jit.

Run as `python -m nl_lowlight.bench`.  Each kernel gets one warm-up call
(amortizes jit compilation) and then the best wall time over --repeat
runs is reported.  With numba unavailable or disabled the numpy column
still runs, so the fallback path stays measurable on its own.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import backend


def _workloads():
    rng = np.random.default_rng(0)
    lam = rng.uniform(0.2, 60.0, size=512 * 512)
    xs = rng.standard_normal((16, 128, 128))
    ws = rng.standard_normal((32, 16, 3, 3)) * 0.1
    bs = rng.standard_normal(32)
    dy = rng.standard_normal((32, 64, 64))
    mask_a = (rng.random((512, 512)) < 0.4).ravel(order="F")
    mask_b = (rng.random((512, 512)) < 0.4).ravel(order="F")

    def one_runs(flat):
        # start/end indices of the one-runs, column-major flattening
        idx = np.flatnonzero(np.diff(np.concatenate(([0], flat.view(np.int8), [0]))))
        return idx[0::2].astype(np.int64), idx[1::2].astype(np.int64)

    sa, ea = one_runs(mask_a)
    sb, eb = one_runs(mask_b)
    angles = np.linspace(0.0, 2.0 * np.pi, 65)[:-1]
    poly_x = 256.0 + 200.0 * np.cos(angles)
    poly_y = 256.0 + 200.0 * np.sin(angles)

    return [
        ("uniform_field", lambda f: f(123, 1 << 20, 0)),
        ("normal_field", lambda f: f(456, 1 << 20)),
        ("poisson_field", lambda f: f(lam, 789)),
        ("conv3x3_s2_forward", lambda f: f(xs, ws, bs)),
        ("conv3x3_s2_input_backward", lambda f: f(dy, ws, 128, 128)),
        ("interval_intersection", lambda f: f(sa, ea, sb, eb)),
        ("rasterize_polygon", lambda f: f(poly_x, poly_y, 512, 512)),
    ]


def _time(fn, call, repeat):
    call(fn)  # warm-up / jit compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        call(fn)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    families = ["numpy"]
    if "numba" in backend.IMPLEMENTATIONS:
        families.append("numba")
    else:
        print("numba unavailable or disabled; timing numpy kernels only")

    rows = []
    for name, call in _workloads():
        cells = [name]
        times = {}
        for fam in families:
            fn = backend.IMPLEMENTATIONS[fam][name]
            times[fam] = _time(fn, call, args.repeat)
            cells.append(f"{times[fam] * 1e3:9.3f} ms")
        if "numba" in times and times["numba"] > 0:
            cells.append(f"{times['numpy'] / times['numba']:6.1f}x")
        rows.append(cells)

    header = ["kernel"] + families + (["speedup"] if "numba" in families else [])
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    print("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    for r in rows:
        print("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
