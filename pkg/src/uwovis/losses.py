"""Bipartite matching between queries and ground truth, and the matching-based
classification + mask losses.

Matching runs on detached values (the assignment is a discrete choice); the
losses themselves run on the autodiff substrate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor

Array = np.ndarray

DICE_EPS = 1.0
DEFAULT_WEIGHTS = (2.0, 5.0, 5.0)  # (w_cls, w_dice, w_bce)

# dense matching costs below this pixel count; sampled above it
POINT_SAMPLE_THRESHOLD = 4096
POINT_SAMPLE_COUNT = 112
_POINT_SAMPLE_SEED = 90125


class MatchingError(ValueError):
    """Targets cannot be matched against the available queries."""


@dataclass
class TargetSet:
    """Ground-truth instances for one image at mask-head resolution."""

    class_ids: list[int]
    masks: Array  # (G, H0, W0) in {0, 1}

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        uniq = np.unique(self.masks)
        if not np.all(np.isin(uniq, (0.0, 1.0))):
            raise ValueError("target masks must be binary")
        if len(self.class_ids) != self.masks.shape[0]:
            raise ValueError("class_ids and masks disagree on instance count")

    @property
    def num_instances(self) -> int:
        return self.masks.shape[0]


@dataclass
class Assignment:
    """Injective query-target pairing; unmatched queries are no-object."""

    pairs: list[tuple[int, int]]
    num_queries: int

    def __post_init__(self):
        qs = [q for q, _ in self.pairs]
        ts = [t for _, t in self.pairs]
        if len(set(qs)) != len(qs) or len(set(ts)) != len(ts):
            raise ValueError("assignment must be injective on both sides")

    @property
    def matched_queries(self) -> list[int]:
        return [q for q, _ in self.pairs]


def _as_array(x: Tensor | Array) -> Array:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pair_costs(m_logits: Array, gt_masks: Array) -> tuple[Array, Array]:
    """Dice and BCE costs for every (query, target) pair.

    Large mask grids are subsampled at a fixed seeded point set so the
    matcher stays cheap; below the threshold the cost is exact and dense.
    """
    nq = m_logits.shape[0]
    g = gt_masks.shape[0]
    pred = m_logits.reshape(nq, -1)
    gt = gt_masks.reshape(g, -1)
    npix = pred.shape[1]
    if npix > POINT_SAMPLE_THRESHOLD:
        rng = np.random.default_rng(_POINT_SAMPLE_SEED)
        idx = rng.choice(npix, size=POINT_SAMPLE_COUNT, replace=False)
        pred = pred[:, idx]
        gt = gt[:, idx]
        npix = POINT_SAMPLE_COUNT
    p = expit(pred)
    inter = p @ gt.T
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (
        p.sum(axis=1)[:, None] + gt.sum(axis=1)[None, :] + DICE_EPS
    )
    # per-pixel BCE with logits, averaged over pixels
    softplus_pos = np.logaddexp(0.0, pred)  # -log sigmoid(-x) ... bce for gt=0
    bce = (softplus_pos.sum(axis=1)[:, None] - pred @ gt.T) / npix
    return dice, bce


def matching_costs(
    y_cls: Tensor | Array,
    m_logits: Tensor | Array,
    targets: TargetSet,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> Array:
    """Cost matrix (N_Q, G): weighted class probability + dice + BCE costs."""
    w_cls, w_dice, w_bce = weights
    y = _as_array(y_cls)
    m = _as_array(m_logits)
    probs = expit(y)  # (N_Q, K)
    cls_cost = -probs[:, targets.class_ids]  # (N_Q, G)
    dice_cost, bce_cost = _pair_costs(m, targets.masks)
    return w_cls * cls_cost + w_dice * dice_cost + w_bce * bce_cost


def assign_from_cost(cost: Array) -> Assignment:
    """Exact minimum-cost injective assignment for an (N_Q, G) cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])
    return Assignment(pairs=[(int(q), int(t)) for q, t in pairs], num_queries=cost.shape[0])


def hungarian_match(
    y_cls: Tensor | Array,
    m_logits: Tensor | Array,
    targets: TargetSet,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> Assignment:
    """Exact minimum-cost assignment of queries to ground-truth instances."""
    nq = _as_array(y_cls).shape[0]
    g = targets.num_instances
    if g < 1:
        raise MatchingError("matching requires at least one target")
    if g > nq:
        raise MatchingError(f"{g} targets exceed {nq} queries")
    cost = matching_costs(y_cls, m_logits, targets, weights)
    return assign_from_cost(cost)


def classification_loss(
    y_cls: Tensor, targets: TargetSet, assignment: Assignment, kind: str = "bce"
) -> Tensor:
    """Supervise class logits against the assignment.

    ``bce`` (default): sigmoid BCE toward one-hot target rows; unmatched
    queries are pushed to the all-zero no-object vector; mean over queries
    and classes. ``softmax``: cross-entropy with an implicit zero-logit
    no-object column, mean over queries (comparison switch only).
    """
    nq, k = y_cls.shape
    if kind == "bce":
        onehot = np.zeros((nq, k), dtype=np.float64)
        for q, t in assignment.pairs:
            onehot[q, targets.class_ids[t]] = 1.0
        return ad.bce_with_logits(y_cls, Tensor(onehot)).mean()
    if kind != "softmax":
        raise ValueError(f"unknown classification loss kind {kind!r}")
    extended = ad.concat([y_cls, Tensor(np.zeros((nq, 1)))], axis=1)
    shift = Tensor(extended.data.max(axis=1, keepdims=True))
    lse = ad.log(ad.exp(extended - shift).sum(axis=1, keepdims=True)) + shift
    log_probs = extended - lse
    target_col = np.full(nq, k, dtype=np.int64)  # implicit no-object column
    for q, t in assignment.pairs:
        target_col[q] = targets.class_ids[t]
    picked = log_probs[np.arange(nq), target_col]
    return -picked.mean()


def dice_loss_matched(m_logits: Tensor, targets: TargetSet, assignment: Assignment) -> Tensor:
    """Soft dice over matched pairs, averaged; in [0, 1) for eps > 0."""
    terms = []
    for q, t in assignment.pairs:
        p = ad.sigmoid(m_logits[q].reshape(-1))
        g = Tensor(targets.masks[t].reshape(-1))
        inter = (p * g).sum()
        denom = p.sum() + g.sum() + DICE_EPS
        terms.append(1.0 - (2.0 * inter + DICE_EPS) / denom)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def bce_loss_matched(m_logits: Tensor, targets: TargetSet, assignment: Assignment) -> Tensor:
    """Pixel BCE over matched pairs, averaged over pixels then pairs."""
    terms = []
    for q, t in assignment.pairs:
        logits = m_logits[q].reshape(-1)
        g = Tensor(targets.masks[t].reshape(-1))
        terms.append(ad.bce_with_logits(logits, g).mean())
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def mask_loss(m_logits: Tensor, targets: TargetSet, assignment: Assignment) -> Tensor:
    """Dice + BCE over matched pairs (unweighted sum of the two terms)."""
    if not assignment.pairs:
        return Tensor(0.0)
    return dice_loss_matched(m_logits, targets, assignment) + bce_loss_matched(
        m_logits, targets, assignment
    )


def total_loss(
    y_cls: Tensor,
    m_logits: Tensor,
    targets: TargetSet,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
    assignment: Assignment | None = None,
    cls_kind: str = "bce",
) -> tuple[Tensor, Assignment]:
    """Match, then combine: w_cls * L_cls + w_dice * dice + w_bce * BCE_mask.

    The same weight triple drives the matching costs, following the
    mask-transformer convention.
    """
    w_cls, w_dice, w_bce = weights
    if assignment is None:
        if targets.num_instances >= 1:
            assignment = hungarian_match(y_cls, m_logits, targets, weights)
        else:
            assignment = Assignment(pairs=[], num_queries=y_cls.shape[0])
    loss = classification_loss(y_cls, targets, assignment, kind=cls_kind) * w_cls
    if assignment.pairs:
        loss = loss + dice_loss_matched(m_logits, targets, assignment) * w_dice
        loss = loss + bce_loss_matched(m_logits, targets, assignment) * w_bce
    return loss, assignment
