"""Pure-NumPy implementations of the hot kernels.

Same contracts as the compiled extension in ``_ckernels.pyx``; used as the
fallback when the extension is not built (or is disabled via the
``UWOVIS_PURE_PYTHON`` environment variable).
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def bilinear_sample_forward(feat: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) map at N fractional (y, x) points -> (N, C).

    Corners falling outside the map contribute zero (zero padding).
    """
    h, w, _ = feat.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    out = None
    for dy, dx, wt in (
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = feat[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        term = (wt * valid)[:, None] * vals
        out = term if out is None else out + term
    return out


def bilinear_sample_backward(
    feat: np.ndarray, ys: np.ndarray, xs: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of bilinear sampling w.r.t. the map and both coordinates."""
    h, w, _ = feat.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    grad_feat = np.zeros_like(feat)
    grad_ys = np.zeros_like(ys)
    grad_xs = np.zeros_like(xs)

    # weight, d(weight)/d(fy), d(weight)/d(fx) for each corner
    corners = (
        (0, 0, (1.0 - fy) * (1.0 - fx), -(1.0 - fx), -(1.0 - fy)),
        (0, 1, (1.0 - fy) * fx, -fx, (1.0 - fy)),
        (1, 0, fy * (1.0 - fx), (1.0 - fx), -fy),
        (1, 1, fy * fx, fx, fy),
    )
    for dy, dx, wt, dwt_dy, dwt_dx in corners:
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        np.add.at(grad_feat, (yc, xc), ((wt * valid)[:, None] * grad_out))
        dot = (grad_out * feat[yc, xc]).sum(axis=1) * valid
        grad_ys += dwt_dy * dot
        grad_xs += dwt_dx * dot
    return grad_feat, grad_ys, grad_xs


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Column-major run lengths, starting with the count of zeros."""
    flat = np.ascontiguousarray(mask, dtype=np.uint8).flatten(order="F")
    if flat.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).astype(np.int64)
    if flat[0] == 1:
        counts = np.concatenate(([0], counts))
    return counts


def rle_decode(counts: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`rle_encode`."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total != height * width:
        raise ValueError(
            f"run-length counts sum to {total}, expected {height * width}"
        )
    vals = np.zeros(len(counts), dtype=np.uint8)
    vals[1::2] = 1
    flat = np.repeat(vals, counts)
    return flat.reshape((height, width), order="F")


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two stacks of binary masks -> (N, G)."""
    n = a.shape[0]
    g = b.shape[0]
    af = (np.asarray(a) != 0).reshape(n, -1).astype(np.float64)
    bf = (np.asarray(b) != 0).reshape(g, -1).astype(np.float64)
    inter = af @ bf.T
    union = af.sum(axis=1)[:, None] + bf.sum(axis=1)[None, :] - inter
    out = np.zeros((n, g), dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out
