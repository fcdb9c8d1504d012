"""Time the compiled and numpy kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from eigeniris import kernels


def _inputs(rng):
    mag = rng.random((231, 231))
    ang = rng.uniform(0, 2 * np.pi, (231, 231))
    kp3 = np.column_stack([rng.uniform(10, 220, 300), rng.uniform(10, 220, 300), rng.uniform(1.6, 6, 300)])
    kp4 = np.column_stack([kp3, rng.uniform(0, 2 * np.pi, 300)])
    code = [(rng.random((20, 480)) < 0.5).astype(np.uint8) for _ in range(2)]
    mask = [np.repeat((rng.random((20, 240)) < 0.9).astype(np.uint8), 2, axis=1) for _ in range(2)]
    return {
        "orientation_histograms (300 kps)": lambda m: m.orientation_histograms(mag, ang, kp3),
        "sift_descriptors (300 kps)": lambda m: m.sift_descriptors(mag, ang, kp4),
        "hamming_min x100 (20x480, +-8)": lambda m: [m.hamming_min(code[0], mask[0], code[1], mask[1], 8)
                                                     for _ in range(100)],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    cases = _inputs(np.random.default_rng(0))
    print(f"{'kernel':34s}" + "".join(f"{name:>12s}" for name in backends) + ("    speed-up" if len(backends) > 1 else ""))
    for label, fn in cases.items():
        best = {}
        for name, mod in backends.items():
            fn(mod)  # warm-up
            times = []
            for _ in range(args.repeat):
                t = time.perf_counter()
                fn(mod)
                times.append(time.perf_counter() - t)
            best[name] = min(times)
        line = f"{label:34s}" + "".join(f"{1e3 * best[n]:10.2f}ms" for n in backends)
        if "cython" in best:
            line += f"{best['python'] / best['cython']:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
