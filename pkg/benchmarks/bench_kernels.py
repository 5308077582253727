#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--quick]

Covers the two hot paths (plane encoding/counting and event-pixel dynamics)
plus the bus FIFO, on desk-scale shapes. Both backends produce bit-identical
results; this script also asserts that while timing.
"""

import argparse
import math
import time

import numpy as np

from bvsbench import encoder as enc
from bvsbench._kernels import pure

try:
    from bvsbench._kernels import _core
except ImportError:
    raise SystemExit("compiled backend not built; install with `pip install -e .`")


def timeit(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def row(name, t_pure, t_core):
    print(f"{name:<28} {t_pure * 1e3:>10.2f} ms {t_core * 1e3:>10.2f} ms "
          f"{t_pure / t_core:>8.1f}x")


def bench_encode(repeats, quick):
    h, w = (80, 160) if quick else (160, 320)
    m_planes, k = 42, 4
    lut = enc.build_schedule_lut(m_planes, k)
    rng = np.random.default_rng(0)
    c_map = rng.integers(0, m_planes * k * k + 1, size=(h, w)).astype(np.int64)
    dmd_h, stride = h * k + 32, (w * k + 32 + 7) // 8

    def run(impl):
        out = np.zeros((m_planes, dmd_h, stride), dtype=np.uint8)
        impl.encode_frame(c_map, lut, out, 16, 16, k)
        return out

    t_pure, a = timeit(lambda: run(pure), repeats)
    t_core, b = timeit(lambda: run(_core), repeats)
    assert np.array_equal(a, b)
    row(f"encode_frame {w}x{h}x{m_planes}", t_pure, t_core)
    return a


def bench_count(planes, repeats, quick):
    h, w = (80, 160) if quick else (160, 320)

    def run(impl):
        return impl.count_blocks(planes, 16, 16, 4, w, h, 42)

    t_pure, a = timeit(lambda: run(pure), repeats)
    t_core, b = timeit(lambda: run(_core), repeats)
    assert np.array_equal(a, b)
    row(f"count_blocks {planes.shape[0]} planes", t_pure, t_core)


def bench_evs(repeats, quick):
    h, w = (32, 64) if quick else (64, 128)
    n_base, tiles = 84, 10 if quick else 25
    rng = np.random.default_rng(1)
    base = rng.uniform(10.0, 5000.0, size=(n_base, h, w))
    th = np.full((h, w), 0.2)

    def run(impl):
        return impl.evs_events(base, tiles, 0, 31_250, th, th, 0.0,
                               100.0, 1.0, 1e6, 1e-3)

    t_pure, a = timeit(lambda: run(pure), max(1, repeats // 2))
    t_core, b = timeit(lambda: run(_core), repeats)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    row(f"evs_events {w}x{h}x{n_base * tiles}", t_pure, t_core)
    return a[0]


def bench_fifo(t_gen, repeats):
    def run(impl):
        return impl.fifo_bus(t_gen, 1250.0, 4096)

    t_pure, a = timeit(lambda: run(pure), repeats)
    t_core, b = timeit(lambda: run(_core), repeats)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    row(f"fifo_bus {t_gen.shape[0]} events", t_pure, t_core)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true", help="smaller shapes")
    args = parser.parse_args()
    repeats = 3

    print(f"{'kernel':<28} {'pure':>13} {'compiled':>13} {'speedup':>9}")
    planes = bench_encode(repeats, args.quick)
    bench_count(planes, repeats, args.quick)
    t_sorted = bench_evs(repeats, args.quick)
    if t_sorted.shape[0] == 0:
        t_sorted = np.sort(np.random.default_rng(2).integers(0, 10**8, 200_000)).astype(np.int64)
    bench_fifo(np.sort(t_sorted), repeats)


if __name__ == "__main__":
    main()
