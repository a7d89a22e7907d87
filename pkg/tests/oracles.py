"""Independent reference implementations used as test oracles.

Everything here is deliberately written as plain scalar loops (or exhaustive
enumeration), separate from the library's vectorized code paths. Oracles
stay independent of what they check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def gelu_scalar(v: float) -> float:
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def sigmoid_scalar(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def central_difference_check(make_loss, params, rtol=1e-4, h=1e-6, atol=1e-7):
    """Compare analytic gradients of a scalar loss against central finite
    differences, elementwise over every parameter array.

    ``make_loss`` rebuilds the loss from the parameters' current data.
    A component fails when |analytic - numeric| > atol + rtol * scale; the
    absolute term absorbs float64 cancellation noise of the difference
    quotient on near-zero gradients, where a pure relative comparison is
    not computable at machine precision.
    Returns a list of (name, flat_index, analytic, numeric, rel_err)
    failures; empty means the check passed.
    """
    for p in params.values():
        p.zero_grad()
    loss = make_loss()
    loss.backward()
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
    failures = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            f_plus = make_loss().item()
            flat[i] = orig - step
            f_minus = make_loss().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = ana_flat[i]
            scale = max(abs(numeric), abs(ana))
            if abs(numeric - ana) > atol + rtol * scale:
                rel = abs(numeric - ana) / max(scale, 1e-300)
                failures.append((name, i, float(ana), float(numeric), float(rel)))
    return failures


# -- fusion / attention oracles ------------------------------------------------


def fusion_oracle(fv_map, fg_map, w_v, w_g, w_alpha, b_alpha, w1, b1, w2, b2,
                  apply_mlp=True):
    """Scalar-loop evaluation of projection + gate + blend + perceptron."""
    h, w, _ = fv_map.shape
    cs = w_v.shape[1]
    out = np.zeros((h, w, cs))
    for y in range(h):
        for x in range(w):
            fv = np.array([
                sum(fv_map[y, x, i] * w_v[i, j] for i in range(fv_map.shape[2]))
                for j in range(cs)
            ])
            fg = np.array([
                sum(fg_map[y, x, i] * w_g[i, j] for i in range(fg_map.shape[2]))
                for j in range(cs)
            ])
            cat = np.concatenate([fv, fg])
            alpha = np.array([
                sigmoid_scalar(sum(cat[i] * w_alpha[i, j] for i in range(2 * cs)) + b_alpha[j])
                for j in range(cs)
            ])
            blend = fv + alpha * fg
            if apply_mlp:
                hidden = np.array([
                    gelu_scalar(sum(blend[i] * w1[i, j] for i in range(cs)) + b1[j])
                    for j in range(cs)
                ])
                blend = np.array([
                    sum(hidden[i] * w2[i, j] for i in range(cs)) + b2[j]
                    for j in range(cs)
                ])
            out[y, x] = blend
    return out


def pointwise_refine_oracle(feat, w_val, b_val, w_out, b_out):
    """Dense evaluation of one-level, one-point, zero-offset refinement:
    residual plus a per-pixel linear map."""
    h, w, c = feat.shape
    out = np.zeros_like(feat)
    for y in range(h):
        for x in range(w):
            val = feat[y, x] @ w_val + b_val
            out[y, x] = feat[y, x] + (val @ w_out + b_out)
    return out


def single_token_bridge_oracle(query, pos, level_feat, p, prefix="bridge.l0"):
    """Closed-form bridge layer for one query and one 1x1 spatial level:
    every softmax is over a single element, hence exactly 1. All vectors
    are flat (dim,) arrays."""
    def mat(name):
        return p[f"{prefix}.{name}"].data

    cross = (level_feat @ mat("cross.w_v")) @ mat("cross.w_o")
    q1 = query + cross
    self_out = (q1 @ mat("self.w_v")) @ mat("self.w_o")
    q2 = q1 + self_out
    hidden = np.array([gelu_scalar(float(v)) for v in (q2 @ mat("ffn_w1") + p[f"{prefix}.ffn_b1"].data)])
    return q2 + hidden @ mat("ffn_w2") + p[f"{prefix}.ffn_b2"].data


# -- selection oracles -----------------------------------------------------------


def top_n_by_sort(scores, n):
    """Exhaustive-sort top-N index set, ties toward the lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:n])


def mixed_selection_oracle(s_bar, embeddings, n, lam):
    """Loop evaluation of top-N interpolation per class."""
    k_count, t_count, d = embeddings.shape
    scores = s_bar.mean(axis=0)
    out = np.zeros((k_count, d))
    for k in range(k_count):
        idx = top_n_by_sort(scores[k], n)
        top = sum(embeddings[k, t] for t in idx) / len(idx)
        all_mean = sum(embeddings[k, t] for t in range(t_count)) / t_count
        v = lam * top + (1.0 - lam) * all_mean
        out[k] = v / np.linalg.norm(v)
    return out


def weighted_selection_oracle(s_bar, embeddings, n, alpha):
    """Loop evaluation of the enhancement-weighted template average."""
    b_count, k_count, t_count = s_bar.shape
    d = embeddings.shape[2]
    out = np.zeros((k_count, d))
    for k in range(k_count):
        acc = np.zeros(d)
        for b in range(b_count):
            idx = set(top_n_by_sort(s_bar[b, k], n))
            weights = np.array([alpha if t in idx else 1.0 for t in range(t_count)])
            weights = weights / weights.sum()
            for t in range(t_count):
                acc += weights[t] * embeddings[k, t]
        v = acc / b_count
        out[k] = v / np.linalg.norm(v)
    return out


def cosine_loop_oracle(pixels, embeddings):
    """Scalar-loop cosine similarity tensor (B,H,W,K,T)."""
    b_n, h, w, d = pixels.shape
    k_n, t_n, _ = embeddings.shape
    out = np.zeros((b_n, h, w, k_n, t_n))
    for b in range(b_n):
        for y in range(h):
            for x in range(w):
                f = pixels[b, y, x]
                nf = math.sqrt(sum(v * v for v in f))
                for k in range(k_n):
                    for t in range(t_n):
                        e = embeddings[k, t]
                        ne = math.sqrt(sum(v * v for v in e))
                        dot = sum(f[i] * e[i] for i in range(d))
                        out[b, y, x, k, t] = dot / (nf * ne)
    return out


# -- matching / loss oracles -------------------------------------------------------


def brute_force_assignment(cost):
    """Minimum total cost over all injective query->target assignments."""
    cost = np.asarray(cost, dtype=np.float64)
    nq, g = cost.shape
    best_cost = math.inf
    best_pairs = None
    for perm in itertools.permutations(range(nq), g):
        total = sum(cost[q, t] for t, q in enumerate(perm))
        if total < best_cost - 1e-15:
            best_cost = total
            best_pairs = [(perm[t], t) for t in range(g)]
    return best_cost, best_pairs


def bce_scalar_oracle(logits, targets):
    """Mean elementwise binary cross-entropy, scalar loops."""
    total = 0.0
    flat_l = np.asarray(logits).reshape(-1)
    flat_t = np.asarray(targets).reshape(-1)
    for x, z in zip(flat_l, flat_t):
        p = sigmoid_scalar(x)
        p = min(max(p, 1e-300), 1.0 - 1e-16)
        total += -(z * math.log(p) + (1.0 - z) * math.log(1.0 - p))
    return total / flat_l.size


def dice_scalar_oracle(logits, gt, eps=1.0):
    """Soft dice for one mask pair, scalar loops."""
    p = [sigmoid_scalar(v) for v in np.asarray(logits).reshape(-1)]
    g = list(np.asarray(gt).reshape(-1))
    inter = sum(pi * gi for pi, gi in zip(p, g))
    return 1.0 - (2.0 * inter + eps) / (sum(p) + sum(g) + eps)


# -- geometry / AP oracles -----------------------------------------------------------


def point_in_polygon(px, py, xs, ys):
    """Even-odd ray cast for a single point."""
    inside = False
    n = len(xs)
    for i in range(n):
        x1, y1 = xs[i], ys[i]
        x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
        if (y1 > py) != (y2 > py):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < x_at:
                inside = not inside
    return inside


def polygon_mask_oracle(ring, height, width):
    mask = np.zeros((height, width), dtype=np.uint8)
    xs = ring[0::2]
    ys = ring[1::2]
    for y in range(height):
        for x in range(width):
            if point_in_polygon(x + 0.5, y + 0.5, xs, ys):
                mask[y, x] = 1
    return mask


def iou_loop(a, b):
    inter = 0
    union = 0
    for x, y in zip(np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)):
        if x and y:
            inter += 1
        if x or y:
            union += 1
    return inter / union if union else 0.0


def ap_oracle(preds, gts_by_image, threshold):
    """Greedy score-ordered matching plus direct 101-point AP, all loops.

    ``preds``: list of (image_id, mask, score); ``gts_by_image``: image ->
    list of masks in annotation order.
    """
    total_gt = sum(len(v) for v in gts_by_image.values())
    if total_gt == 0:
        return None
    order = sorted(range(len(preds)), key=lambda i: -preds[i][2])
    used = {img: [False] * len(v) for img, v in gts_by_image.items()}
    flags = []
    for i in order:
        image_id, mask, _ = preds[i]
        best_iou, best_j = -1.0, -1
        for j, gt in enumerate(gts_by_image.get(image_id, [])):
            if used.get(image_id, [True])[j]:
                continue
            iou = iou_loop(mask, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            used[image_id][best_j] = True
            flags.append(1)
        else:
            flags.append(0)
    tp = fp = 0
    precisions, recalls = [], []
    for f in flags:
        tp += f
        fp += 1 - f
        precisions.append(tp / (tp + fp))
        recalls.append(tp / total_gt)
    acc = 0.0
    for i in range(101):
        r = i / 100.0
        best = 0.0
        for p_val, r_val in zip(precisions, recalls):
            if r_val >= r and p_val > best:
                best = p_val
        acc += best
    return acc / 101.0 * 100.0
