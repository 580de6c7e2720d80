"""Compare the numba and numpy im2col/col2im backends.

Run:  python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends are imported directly, so the DLAPLAN_NUMBA flag does not
matter here. Each case also checks that the two agree bit for bit.
"""
import argparse
import time

import numpy as np

from dlaplan import kernels

# (N, C, H, W), kernel, padding, stride: shapes the segmentation model hits
CASES = [
    ((8, 3, 64, 64), (3, 3), (1, 1), 2),
    ((8, 19, 64, 64), (3, 3), (1, 1), 1),
    ((8, 48, 32, 32), (3, 3), (1, 1), 1),
    ((8, 64, 8, 8), (3, 3), (1, 1), 2),
    ((16, 10, 32, 32), (3, 3), (1, 1), 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if kernels.im2col_numba is None:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    print(f"{'shape':<22}{'op':<8}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for shape, (kh, kw), (ph, pw), s in CASES:
        n, c, h, w = shape
        ho, wo = (h + 2 * ph - kh) // s + 1, (w + 2 * pw - kw) // s + 1
        x = rng.random(shape)
        g = rng.random((n, c * kh * kw, ho * wo))
        fwd = (x, kh, kw, ph, pw, s, ho, wo)
        bwd = (g, h, w, kh, kw, ph, pw, s, ho, wo)
        pairs = [("im2col", kernels.im2col_numpy, kernels.im2col_numba, fwd),
                 ("col2im", kernels.col2im_numpy, kernels.col2im_numba, bwd)]
        for name, f_np, f_nb, a in pairs:
            same = np.array_equal(f_np(*a), f_nb(*a))  # also triggers compilation
            t_np = best_of(lambda: f_np(*a), args.repeat)
            t_nb = best_of(lambda: f_nb(*a), args.repeat)
            label = "x".join(map(str, shape)) + f"/s{s}"
            print(f"{label:<22}{name:<8}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.2f}x  {same}")


if __name__ == "__main__":
    main()
