"""Backend equivalence and contract tests for the hot kernels.

Both backends (compiled extension and NumPy fallback) must agree bitwise-ish
on every contract; the parametrization below runs each available backend.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uwovis.kernels import _npkernels

try:
    from uwovis.kernels import _ckernels

    BACKENDS = [_npkernels, _ckernels]
except ImportError:
    BACKENDS = [_npkernels]

from oracles import iou_loop


@pytest.fixture(params=BACKENDS, ids=[b.BACKEND for b in BACKENDS])
def backend(request):
    return request.param


def test_both_backends_present_when_extension_built():
    # the deliverable ships the compiled core; the numpy fallback always works
    names = {b.BACKEND for b in BACKENDS}
    assert "numpy" in names


def test_bilinear_forward_exact_at_lattice(backend):
    rng = np.random.default_rng(0)
    feat = np.ascontiguousarray(rng.standard_normal((4, 5, 3)))
    ys = np.array([0.0, 1.0, 3.0])
    xs = np.array([0.0, 2.0, 4.0])
    out = backend.bilinear_sample_forward(feat, ys, xs)
    np.testing.assert_allclose(out, feat[[0, 1, 3], [0, 2, 4]], atol=1e-14)


def test_bilinear_forward_midpoint_average(backend):
    feat = np.zeros((2, 2, 1))
    feat[0, 0, 0], feat[0, 1, 0], feat[1, 0, 0], feat[1, 1, 0] = 1.0, 2.0, 3.0, 4.0
    out = backend.bilinear_sample_forward(feat, np.array([0.5]), np.array([0.5]))
    np.testing.assert_allclose(out, [[2.5]])


def test_bilinear_backends_agree(backend):
    rng = np.random.default_rng(42)
    feat = np.ascontiguousarray(rng.standard_normal((7, 9, 4)))
    ys = rng.uniform(-1.0, 7.5, 50)
    xs = rng.uniform(-1.0, 9.5, 50)
    gout = np.ascontiguousarray(rng.standard_normal((50, 4)))
    ref_fwd = _npkernels.bilinear_sample_forward(feat, ys, xs)
    ref_bwd = _npkernels.bilinear_sample_backward(feat, ys, xs, gout)
    fwd = backend.bilinear_sample_forward(feat, ys, xs)
    bwd = backend.bilinear_sample_backward(feat, ys, xs, gout)
    np.testing.assert_allclose(fwd, ref_fwd, atol=1e-12)
    for got, ref in zip(bwd, ref_bwd):
        np.testing.assert_allclose(got, ref, atol=1e-12)


def test_rle_round_trip_simple(backend):
    mask = np.zeros((4, 5), dtype=np.uint8)
    mask[1:3, 2:4] = 1
    counts = backend.rle_encode(mask)
    back = backend.rle_decode(np.asarray(counts), 4, 5)
    np.testing.assert_array_equal(back, mask)
    # column-major runs start with the zero count
    assert counts[0] == 9  # two empty columns plus one empty cell


def test_rle_all_ones_starts_with_zero_count(backend):
    mask = np.ones((3, 3), dtype=np.uint8)
    counts = list(backend.rle_encode(mask))
    assert counts == [0, 9]


def test_rle_empty_mask(backend):
    mask = np.zeros((3, 3), dtype=np.uint8)
    counts = list(backend.rle_encode(mask))
    assert counts == [9]


def test_rle_wrong_total_rejected(backend):
    with pytest.raises(ValueError):
        backend.rle_decode(np.array([3, 2], dtype=np.int64), 4, 4)


@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(1, 9))
def test_rle_round_trip_random(seed, h, w):
    rng = np.random.default_rng(seed)
    mask = (rng.random((h, w)) < 0.4).astype(np.uint8)
    for backend in BACKENDS:
        counts = backend.rle_encode(mask)
        np.testing.assert_array_equal(backend.rle_decode(np.asarray(counts), h, w), mask)


def test_backends_agree_on_rle():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(3)
    mask = (rng.random((13, 7)) < 0.5).astype(np.uint8)
    a = list(BACKENDS[0].rle_encode(mask))
    b = list(BACKENDS[1].rle_encode(mask))
    assert a == b


def test_mask_iou_matrix_matches_loop(backend):
    rng = np.random.default_rng(5)
    a = (rng.random((4, 6, 6)) < 0.5).astype(np.uint8)
    b = (rng.random((3, 6, 6)) < 0.5).astype(np.uint8)
    got = backend.mask_iou_matrix(a, b)
    for i in range(4):
        for j in range(3):
            assert got[i, j] == pytest.approx(iou_loop(a[i], b[j]), abs=1e-12)


def test_mask_iou_empty_union_is_zero(backend):
    z = np.zeros((1, 4, 4), dtype=np.uint8)
    assert backend.mask_iou_matrix(z, z)[0, 0] == 0.0
