"""Hot-loop kernels with a compiled core and a NumPy fallback.

The compiled extension (Cython) is preferred when it imports cleanly;
setting ``UWOVIS_PURE_PYTHON=1`` forces the NumPy implementations. Both
backends implement identical contracts and are cross-checked in the test
suite; ``benchmarks/bench_kernels.py`` compares their throughput.
"""

from __future__ import annotations

import os

from . import _npkernels

if os.environ.get("UWOVIS_PURE_PYTHON"):
    _impl = _npkernels
    HAVE_COMPILED = False
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        HAVE_COMPILED = True
    except ImportError:
        _impl = _npkernels
        HAVE_COMPILED = False

ACTIVE_BACKEND: str = _impl.BACKEND

bilinear_sample_forward = _impl.bilinear_sample_forward
bilinear_sample_backward = _impl.bilinear_sample_backward
rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
mask_iou_matrix = _impl.mask_iou_matrix

__all__ = [
    "ACTIVE_BACKEND",
    "HAVE_COMPILED",
    "bilinear_sample_forward",
    "bilinear_sample_backward",
    "rle_encode",
    "rle_decode",
    "mask_iou_matrix",
]
