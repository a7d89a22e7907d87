"""Throughput comparison of the compiled kernel extension vs the NumPy
fallback, on sizes representative of training and evaluation.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from uwovis.kernels import _npkernels

try:
    from uwovis.kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(rng: np.random.Generator):
    feat = np.ascontiguousarray(rng.standard_normal((64, 64, 32)))
    ys = rng.uniform(0, 63, 16384)
    xs = rng.uniform(0, 63, 16384)
    gout = np.ascontiguousarray(rng.standard_normal((16384, 32)))
    big_mask = (rng.random((512, 512)) < 0.3).astype(np.uint8)
    counts = _npkernels.rle_encode(big_mask)
    preds = (rng.random((100, 128, 128)) < 0.2).astype(np.uint8)
    gts = (rng.random((20, 128, 128)) < 0.2).astype(np.uint8)
    return {
        "bilinear_forward (64x64x32, 16k pts)": lambda b: b.bilinear_sample_forward(feat, ys, xs),
        "bilinear_backward (same)": lambda b: b.bilinear_sample_backward(feat, ys, xs, gout),
        "rle_encode (512x512)": lambda b: b.rle_encode(big_mask),
        "rle_decode (512x512)": lambda b: b.rle_decode(np.asarray(counts), 512, 512),
        "mask_iou_matrix (100x20 @128x128)": lambda b: b.mask_iou_matrix(preds, gts),
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5, help="best-of-N timing")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = make_cases(rng)

    print(f"{'kernel':<38} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    print("-" * 70)
    for name, call in cases.items():
        t_np = timeit(lambda: call(_npkernels), args.repeats)
        if _ckernels is None:
            print(f"{name:<38} {t_np * 1e3:>8.2f}ms {'n/a':>10} {'n/a':>8}")
            continue
        # cross-check outputs before timing
        ref = call(_npkernels)
        got = call(_ckernels)
        if isinstance(ref, tuple):
            for r, g in zip(ref, got):
                np.testing.assert_allclose(g, r, atol=1e-10)
        else:
            np.testing.assert_allclose(np.asarray(got, dtype=np.float64),
                                       np.asarray(ref, dtype=np.float64), atol=1e-10)
        t_c = timeit(lambda: call(_ckernels), args.repeats)
        print(f"{name:<38} {t_np * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms {t_np / t_c:>7.1f}x")
    if _ckernels is None:
        print("\ncompiled extension not built; run `pip install -e .` to build it")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
