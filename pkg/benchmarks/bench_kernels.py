"""Compare the compiled and numpy LSTM recurrence kernels.

Times one forward plus backward pass through a single layer for a few
shapes, checks both backends agree, and prints a table.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from evforecast.kernels import BACKENDS

SHAPES = [  # (hidden, batch, steps)
    (4, 1, 5),
    (8, 32, 24),
    (64, 32, 24),
    (64, 64, 48),
    (128, 64, 72),
]


def make_inputs(H, B, T, seed=0):
    rng = np.random.default_rng(seed)
    gx = rng.normal(0, 0.5, (T, B, 4 * H))
    wh = rng.uniform(-1 / np.sqrt(H), 1 / np.sqrt(H), (4 * H, H))
    dh = rng.normal(0, 1, (T, B, H))
    return gx, wh, dh


def step(kernel, gx, wh, dh):
    gates, c, h = kernel.layer_forward(gx, np.ascontiguousarray(wh.T))
    return h, kernel.layer_backward(dh, gates, c, wh)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    names = sorted(BACKENDS)
    if "cython" not in BACKENDS:
        print("compiled kernel not built; run `python setup.py build_ext --inplace`")
    print(f"{'H':>4} {'B':>4} {'T':>4}  " + "  ".join(f"{n + ' (s)':>12}" for n in names)
          + ("  speedup   max|diff|" if len(names) > 1 else ""))
    for H, B, T in SHAPES:
        gx, wh, dh = make_inputs(H, B, T)
        times, outs = {}, {}
        for n in names:
            k = BACKENDS[n]
            outs[n] = step(k, gx, wh, dh)
            times[n] = min(timeit.repeat(lambda: step(k, gx, wh, dh), number=1,
                                         repeat=args.repeat))
        line = f"{H:>4} {B:>4} {T:>4}  " + "  ".join(f"{times[n]:12.6f}" for n in names)
        if len(names) > 1:
            diff = max(np.max(np.abs(a - b)) for a, b in zip(outs["python"], outs["cython"]))
            line += f"  {times['python'] / times['cython']:7.2f}x  {diff:.1e}"
        print(line)


if __name__ == "__main__":
    main()
