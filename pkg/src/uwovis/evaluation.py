"""Mask-AP evaluation: per-class AP over an IoU grid, grouped reporting for
intersection / open-vocabulary / overall classes, and best-worst rankings.

Conventions: 10-threshold IoU grid {0.50 .. 0.95}, greedy score-ordered
matching (one match per ground-truth instance), 101-point interpolated
precision-recall integration, AP scaled to [0, 100]. The overall group is a
class-weighted mean over the union of classes; classes without ground truth
are excluded from means and disclosed in the report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClassSplit, DatasetIndex, mask_to_rle, rle_to_mask, _dump_canonical
from .kernels import mask_iou_matrix

Array = np.ndarray

IOU_GRID: tuple[float, ...] = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)

OVERALL_MEAN_RULE = "class-weighted mean over the union of intersection and OV classes"


class EvaluationError(ValueError):
    pass


@dataclass
class InstancePrediction:
    image_id: int
    category: str
    mask: Array
    score: float

    def __post_init__(self):
        self.mask = (np.asarray(self.mask) != 0).astype(np.uint8)
        if not np.isfinite(self.score):
            raise EvaluationError(f"non-finite score for image {self.image_id}")


def mask_iou(a: Array, b: Array) -> float:
    """|a n b| / |a u b|; zero when the union is empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise EvaluationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return float(mask_iou_matrix(a[None], b[None])[0, 0])


def save_predictions(predictions: list[InstancePrediction], path: str | Path) -> None:
    records = [
        {
            "image_id": p.image_id,
            "category": p.category,
            "segmentation": mask_to_rle(p.mask),
            "score": round(float(p.score), 8),
        }
        for p in predictions
    ]
    Path(path).write_text(_dump_canonical(records), encoding="utf-8")


def load_predictions(path: str | Path) -> list[InstancePrediction]:
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        InstancePrediction(
            image_id=int(r["image_id"]),
            category=str(r["category"]),
            mask=rle_to_mask(r["segmentation"]),
            score=float(r["score"]),
        )
        for r in records
    ]


# -- AP machinery --------------------------------------------------------------


def _gt_masks_by_image(gts: DatasetIndex, class_name: str) -> dict[int, list[Array]]:
    """Ground-truth masks of one class, grouped by image, annotation-id order."""
    try:
        cid = gts.category_id_by_name(class_name)
    except Exception:
        return {}
    by_image: dict[int, list[Array]] = {}
    for ann in sorted(gts.annotations.values(), key=lambda a: a.id):
        if ann.category_id == cid:
            by_image.setdefault(ann.image_id, []).append(gts.decode_mask(ann.id))
    return by_image


def _match_flags(
    preds: list[InstancePrediction],
    iou_by_pred: list[Array],
    gt_counts: dict[int, int],
    iou_threshold: float,
) -> Array:
    """Greedy TP flags for score-sorted predictions.

    Each prediction takes the highest-IoU unmatched ground truth of its
    image, provided the IoU clears the threshold; IoU ties resolve to the
    earliest annotation.
    """
    used: dict[int, set[int]] = {img: set() for img in gt_counts}
    flags = np.zeros(len(preds), dtype=bool)
    for i, pred in enumerate(preds):
        ious = iou_by_pred[i]
        if ious.size == 0:
            continue
        order = np.argsort(-ious, kind="stable")
        for j in order:
            if ious[j] < iou_threshold:
                break
            if j not in used[pred.image_id]:
                used[pred.image_id].add(int(j))
                flags[i] = True
                break
    return flags


def _ap_from_flags(flags: Array, total_gt: int) -> float:
    """101-point interpolated AP (in percent) from ordered TP flags."""
    if total_gt == 0:
        raise EvaluationError("AP undefined without ground truth")
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / total_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(interp.mean() * 100.0)


def compute_ap(
    predictions: list[InstancePrediction],
    gts: DatasetIndex,
    class_name: str,
    iou_threshold: float,
) -> float | None:
    """AP for one class at one IoU threshold; None when the class has no
    ground truth (undefined, excluded from group means)."""
    gt_by_image = _gt_masks_by_image(gts, class_name)
    total_gt = sum(len(v) for v in gt_by_image.values())
    if total_gt == 0:
        return None
    preds = sorted(
        (p for p in predictions if p.category == class_name),
        key=lambda p: -p.score,
    )
    iou_by_pred = []
    for p in preds:
        gt_masks = gt_by_image.get(p.image_id, [])
        if gt_masks:
            iou_by_pred.append(mask_iou_matrix(p.mask[None], np.stack(gt_masks))[0])
        else:
            iou_by_pred.append(np.zeros(0))
    gt_counts = {img: len(v) for img, v in gt_by_image.items()}
    flags = _match_flags(preds, iou_by_pred, gt_counts, iou_threshold)
    return _ap_from_flags(flags, total_gt)


def per_class_ap_table(
    predictions: list[InstancePrediction],
    gts: DatasetIndex,
    vocabulary: list[str],
    iou_grid: tuple[float, ...] = IOU_GRID,
) -> tuple[dict[str, dict], list[str]]:
    """AP at every grid threshold for every vocabulary class.

    Returns (table, excluded) where excluded lists classes without ground
    truth. Table rows carry AP (grid mean), AP50, AP75 and the full grid.
    """
    table: dict[str, dict] = {}
    excluded: list[str] = []
    for name in vocabulary:
        gt_by_image = _gt_masks_by_image(gts, name)
        total_gt = sum(len(v) for v in gt_by_image.values())
        if total_gt == 0:
            excluded.append(name)
            continue
        preds = sorted(
            (p for p in predictions if p.category == name), key=lambda p: -p.score
        )
        iou_by_pred = []
        for p in preds:
            gt_masks = gt_by_image.get(p.image_id, [])
            iou_by_pred.append(
                mask_iou_matrix(p.mask[None], np.stack(gt_masks))[0]
                if gt_masks
                else np.zeros(0)
            )
        gt_counts = {img: len(v) for img, v in gt_by_image.items()}
        ap_by_iou = {}
        for thr in iou_grid:
            flags = _match_flags(preds, iou_by_pred, gt_counts, thr)
            ap_by_iou[thr] = _ap_from_flags(flags, total_gt)
        table[name] = {
            "AP": float(np.mean(list(ap_by_iou.values()))),
            "AP50": ap_by_iou.get(0.5, 0.0),
            "AP75": ap_by_iou.get(0.75, 0.0),
            "n_gt": total_gt,
            "ap_by_iou": {f"{t:.2f}": v for t, v in ap_by_iou.items()},
        }
    return table, excluded


@dataclass
class EvalReport:
    """Per-class APs plus grouped means for the three reporting groups."""

    per_class: dict[str, dict]
    groups: dict[str, dict | None]
    excluded_classes: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    overall_rule: str = OVERALL_MEAN_RULE

    def to_dict(self) -> dict:
        return {
            "header": {"overall_rule": self.overall_rule, "counts": self.counts},
            "per_class": self.per_class,
            "groups": self.groups,
            "excluded_classes": self.excluded_classes,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(_dump_canonical(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            per_class=raw["per_class"],
            groups=raw["groups"],
            excluded_classes=raw.get("excluded_classes", []),
            counts=raw.get("header", {}).get("counts", {}),
            overall_rule=raw.get("header", {}).get("overall_rule", OVERALL_MEAN_RULE),
        )


def _group_mean(per_class: dict[str, dict], names: list[str]) -> dict | None:
    rows = [per_class[n] for n in names if n in per_class]
    if not rows:
        return None
    return {
        "mAP": float(np.mean([r["AP"] for r in rows])),
        "AP50": float(np.mean([r["AP50"] for r in rows])),
        "AP75": float(np.mean([r["AP75"] for r in rows])),
        "n_classes": len(rows),
    }


def group_metrics(per_class: dict[str, dict], split: ClassSplit) -> EvalReport:
    """Aggregate per-class rows into intersection / OV / overall groups."""
    inter = _group_mean(per_class, split.intersection)
    ov = _group_mean(per_class, split.ov_exclusive)
    overall = _group_mean(per_class, sorted(set(split.intersection) | set(split.ov_exclusive)))
    counts = {
        "intersection": len(split.intersection),
        "ov_exclusive": len(split.ov_exclusive),
        "scored_classes": len(per_class),
    }
    return EvalReport(
        per_class=per_class,
        groups={"intersection": inter, "open_vocabulary": ov, "overall": overall},
        counts=counts,
    )


def evaluate_predictions(
    predictions: list[InstancePrediction],
    gts: DatasetIndex,
    vocabulary: list[str],
    split: ClassSplit,
    iou_grid: tuple[float, ...] = IOU_GRID,
) -> EvalReport:
    table, excluded = per_class_ap_table(predictions, gts, vocabulary, iou_grid)
    report = group_metrics(table, split)
    report.excluded_classes = excluded
    return report


def per_class_report(
    report: EvalReport, top_k: int, second: EvalReport | None = None
) -> dict:
    """Best / worst classes by AP, ties broken lexicographically.

    When a second report is supplied (in-domain vs cross-domain), its AP is
    paired alongside each ranked class.
    """
    items = sorted(report.per_class.items(), key=lambda kv: (-kv[1]["AP"], kv[0]))
    truncated = top_k > len(items)
    k = min(top_k, len(items))

    def row(name: str, stats: dict) -> dict:
        entry = {"class": name, "AP": stats["AP"]}
        if second is not None:
            other = second.per_class.get(name)
            entry["AP_second"] = other["AP"] if other else None
        return entry

    best = [row(n, s) for n, s in items[:k]]
    worst = [row(n, s) for n, s in sorted(items, key=lambda kv: (kv[1]["AP"], kv[0]))[:k]]
    return {
        "top_k": k,
        "requested_top_k": top_k,
        "truncated": truncated,
        "best": best,
        "worst": worst,
    }


def plot_per_class_report(ranked: dict, path: str | Path) -> None:
    """Static horizontal bar chart of the best / worst classes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 0.45 * max(len(ranked["best"]), 4) + 2))
    for ax, key, color in ((axes[0], "best", "#2a7fba"), (axes[1], "worst", "#ba4a2a")):
        rows = ranked[key]
        names = [r["class"] for r in rows][::-1]
        vals = [r["AP"] for r in rows][::-1]
        ax.barh(names, vals, color=color, label="report 1")
        if rows and "AP_second" in rows[0]:
            second = [r["AP_second"] or 0.0 for r in rows][::-1]
            ax.barh(names, second, height=0.4, color="#888888", label="report 2")
            ax.legend(fontsize=8)
        ax.set_title(f"{key} classes by AP")
        ax.set_xlabel("AP")
        ax.set_xlim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
