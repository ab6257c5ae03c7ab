"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both variants are called directly, so the SCOD_DISABLE_NUMBA flag does not
matter here. Each numba kernel is called once before timing to exclude JIT
compilation.
"""

import argparse
import timeit

import numpy as np

from scod import _accel
from scod.multibox import score_order, to_corners


def cases(rng):
    currents = rng.uniform(0.0, 0.6, size=(32, 40_000))
    spikes = (rng.uniform(size=(32, 40_000)) < 0.3).astype(np.uint8)
    centers = np.column_stack([rng.uniform(0, 1, (2000, 2)), rng.uniform(0.05, 0.3, (2000, 2))])
    corners = to_corners(centers)
    order = score_order(rng.uniform(size=2000))
    xp = rng.normal(size=(64, 76, 76))
    return {
        "lif_scan (T=32, n=40k)": ("_lif_scan", (currents, 1.0, np.zeros(40_000))),
        "exp_trace (T=32, n=40k)": ("_trace", (spikes, float(np.exp(-1 / 5)))),
        "nms_greedy (n=2000)": ("_nms", (corners, order, 0.45)),
        "maxpool 2x2 (64x76x76)": ("_maxpool", (xp, 2, 2, 38, 38)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _accel.numba is None:
        raise SystemExit("numba is not installed; only the numpy kernels are available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for label, (stem, call_args) in cases(rng).items():
        np_fn = getattr(_accel, stem + "_np")
        nb_fn = getattr(_accel, stem + "_nb")
        nb_fn(*call_args)
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=1, repeat=args.repeat))
        print(f"{label:<26} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
