"""Throughput comparison of the compiled and numpy kernel backends.

Runs the shapes the network actually uses and prints GMAC/s per backend.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from polysnap.tensor import kernels_numpy as knp

try:
    from polysnap.tensor import _ckernels as ck
except ImportError:
    ck = None


def timeit(fn, repeat):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(backend, name, repeat):
    rng = np.random.default_rng(0)
    # backbone stage shapes for a 128px crop plus one fusion conv
    cases = [
        ("stage1a", (3, 128, 128), (16, 3, 3, 3), 2, 1),
        ("stage1b", (16, 64, 64), (16, 16, 3, 3), 1, 1),
        ("stage2a", (16, 64, 64), (32, 16, 3, 3), 2, 1),
        ("stage2b", (32, 32, 32), (32, 32, 3, 3), 1, 1),
        ("stage3a", (32, 32, 32), (64, 32, 3, 3), 2, 1),
        ("stage3b", (64, 16, 16), (64, 64, 3, 3), 1, 1),
        ("stage4a", (64, 16, 16), (128, 64, 3, 3), 2, 1),
        ("stage4b", (128, 8, 8), (128, 128, 3, 3), 1, 1),
        ("fuse64", (64, 64, 64), (64, 64, 3, 3), 1, 1),
    ]
    total_macs = 0
    total_time = 0.0
    for label, xs, ws, stride, pad in cases:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        b = rng.standard_normal(ws[0]).astype(np.float32)
        ho = (xs[1] + 2 * pad - ws[2]) // stride + 1
        macs = ws[0] * ws[1] * ws[2] * ws[3] * ho * ho
        t = timeit(lambda: backend.conv2d_fwd(x, w, b, stride, pad), repeat)
        total_macs += macs
        total_time += t
        print(f"  {name} {label:8s} {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")
    print(f"  {name} conv total: {total_macs / total_time / 1e9:7.2f} GMAC/s")
    return total_macs / total_time


def bench_circ(backend, name, repeat):
    rng = np.random.default_rng(1)
    f = rng.standard_normal((128, 128)).astype(np.float32)
    w = rng.standard_normal((128, 128, 9)).astype(np.float32)
    b = rng.standard_normal(128).astype(np.float32)
    macs = 128 * 128 * 9 * 128
    t = timeit(lambda: backend.circ_conv1d_fwd(f, w, b, 2), repeat)
    print(f"  {name} circconv  {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")


def bench_bwd(backend, name, repeat):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((64, 16, 16)).astype(np.float32)
    w = rng.standard_normal((128, 64, 3, 3)).astype(np.float32)
    g = rng.standard_normal((128, 8, 8)).astype(np.float32)
    macs = 128 * 64 * 9 * 64
    t = timeit(lambda: backend.conv2d_bwd_input(g, w, x.shape, 2, 1), repeat)
    print(f"  {name} bwd_in/s2 {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")
    t = timeit(lambda: backend.conv2d_bwd_weight(g, x, w.shape, 2, 1), repeat)
    print(f"  {name} bwd_w/s2  {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")
    # the fusion conv dominates backward cost: stride 1 at 64x64
    x1 = rng.standard_normal((64, 64, 64)).astype(np.float32)
    w1 = rng.standard_normal((64, 64, 3, 3)).astype(np.float32)
    g1 = rng.standard_normal((64, 64, 64)).astype(np.float32)
    macs = 64 * 64 * 9 * 64 * 64
    t = timeit(lambda: backend.conv2d_bwd_input(g1, w1, x1.shape, 1, 1), repeat)
    print(f"  {name} bwd_in/s1 {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")
    t = timeit(lambda: backend.conv2d_bwd_weight(g1, x1, w1.shape, 1, 1), repeat)
    print(f"  {name} bwd_w/s1  {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")
    f = rng.standard_normal((128, 128)).astype(np.float32)
    wc = rng.standard_normal((128, 128, 9)).astype(np.float32)
    gc = rng.standard_normal((128, 128)).astype(np.float32)
    macs = 128 * 128 * 9 * 128
    t = timeit(lambda: backend.circ_conv1d_bwd_input(gc, wc, 2), repeat)
    print(f"  {name} circ_bwdi {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")
    t = timeit(lambda: backend.circ_conv1d_bwd_weight(gc, f, wc.shape, 2), repeat)
    print(f"  {name} circ_bwdw {macs / t / 1e9:7.2f} GMAC/s ({t * 1e3:7.2f} ms)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = [(knp, "numpy ")]
    if ck is not None:
        backends.append((ck, "cython"))
    else:
        print("compiled backend not available; benchmarking numpy only")

    for backend, name in backends:
        print(f"{name} backend:")
        bench_conv(backend, name, args.repeat)
        bench_circ(backend, name, args.repeat)
        bench_bwd(backend, name, args.repeat)


if __name__ == "__main__":
    main()
