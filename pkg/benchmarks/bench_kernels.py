"""Time the numba kernels against the pure-numpy fallback.

Shapes are those of a batch-4, 64x256 training step: back-warping and the
radius-4 correlation at pyramid level 2 (32x128), and the col2im scatter of
a 3x3 convolution there.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from lidarflow.kernels import _numba, _numpy


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    n, c, h, w = 4, 32, 32, 128
    f1 = rng.standard_normal((n, c, h, w)).astype(np.float32)
    f2 = rng.standard_normal((n, c, h, w)).astype(np.float32)
    flow = rng.uniform(-4, 4, (n, 2, h, w)).astype(np.float32)
    g_warp = rng.standard_normal((n, c, h, w)).astype(np.float32)
    g_corr = rng.standard_normal((n, 81, h, w)).astype(np.float32)
    cols = rng.standard_normal((n, c * 9, h * w)).astype(np.float32)
    return {
        "backwarp_forward": ("backwarp_forward", (f2, flow)),
        "backwarp_backward": ("backwarp_backward", (f2, flow, g_warp)),
        "correlation_forward": ("correlation_forward", (f1, f2, 4)),
        "correlation_backward": ("correlation_backward", (f1, f2, g_corr, 4)),
        "col2im": ("col2im", (cols.reshape(n, c, 3, 3, h, w), (n, c, h + 2, w + 2), 1, 1)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, (name, inputs) in cases(rng).items():
        t_np = best_of(getattr(_numpy, name), inputs, args.repeat)
        t_nb = best_of(getattr(_numba, name), inputs, args.repeat)
        print(f"{label:<22}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
