"""
Detection evaluation with the VOC07 11-point interpolated AP.

Detections of a class are pooled across all images, ranked by score (ties
broken by image id, then box coordinates) and matched greedily against the
ground truth. Per-class AP is the mean, over recall levels 0.0, 0.1, ..., 1.0,
of the best precision reached at or beyond that recall; mAP is the
unweighted mean over classes that have ground truth.

Also provides mask-level diagnostics (pixel accuracy, false-positive pixels)
and the report writers (JSON, CSV, plotly HTML).
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import plotly.express as px

import config
from data_model import Annotation, ClassCatalog, Detection, ScoreMask, detection_sort_key, iou
from errors import EvaluationError, InvalidInputError

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

# k / 10.0 rather than a float range so each level is the exact nearest double
RECALL_LEVELS = tuple(k / 10.0 for k in range(11))

REPORT_JSON = 'eval_report.json'
REPORT_CSV = 'eval_report.csv'
PR_CURVES_CSV = 'pr_curves.csv'
PR_CURVES_HTML = 'pr_curves.html'
MASK_DIAGNOSTICS_CSV = 'mask_diagnostics.csv'
MASK_DIAGNOSTICS_JSON = 'mask_diagnostics.json'


@dataclass
class EvalConfig:
    iou_threshold: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise InvalidInputError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")

    def snapshot(self) -> Dict:
        return {'iou_threshold': self.iou_threshold, 'recall_levels': list(RECALL_LEVELS), 'metric': 'voc07-11pt'}


# ============================================================================
# MATCHING / AP
# ============================================================================

def match_detections(detections: Sequence[Detection],
                     annotations: Sequence[Annotation],
                     iou_threshold: float) -> List[Tuple[Detection, bool]]:
    """
    Greedy VOC matching.

    Detections are visited in rank order; each one claims the still-unmatched
    ground-truth box of its class and image with the highest IoU, provided
    that IoU reaches the threshold (true positive). Otherwise it is a false
    positive.

    Args:
        detections: Detections of any classes and images
        annotations: Ground truth
        iou_threshold: Minimum IoU for a match

    Returns:
        (detection, is_true_positive) pairs in rank order
    """
    gt: Dict[Tuple[str, int], List] = {}
    for a in annotations:
        gt.setdefault((a.image_id, a.class_id), []).append(a.box)
    matched = {key: [False] * len(boxes) for key, boxes in gt.items()}

    flags = []
    for d in sorted(detections, key=detection_sort_key):
        key = (d.image_id, d.class_id)
        best_iou, best_idx = -1.0, -1
        for idx, box in enumerate(gt.get(key, ())):
            if matched[key][idx]:
                continue
            overlap = iou(d.box, box)
            if overlap > best_iou:
                best_iou, best_idx = overlap, idx
        is_tp = best_idx >= 0 and best_iou >= iou_threshold
        if is_tp:
            matched[key][best_idx] = True
        flags.append((d, is_tp))
    return flags


def precision_recall(tp_flags: Sequence[bool], num_ground_truth: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative (precision, recall) after each ranked detection."""
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / float(num_ground_truth) if num_ground_truth > 0 else np.zeros(len(flags))
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall


def average_precision_voc07(tp_flags: Sequence[bool], num_ground_truth: int) -> float:
    """
    11-point interpolated AP of ranked TP/FP flags.

    Returns 0.0 (with a warning) when the class has no ground truth.
    """
    if num_ground_truth <= 0:
        logger.warning("⚠ AP requested for a class without ground truth; returning 0.0")
        return 0.0
    precision, recall = precision_recall(tp_flags, num_ground_truth)
    ap = 0.0
    for level in RECALL_LEVELS:
        reached = recall >= level
        p = float(np.max(precision[reached])) if np.any(reached) else 0.0
        ap += p / 11.0
    return min(1.0, ap)


# ============================================================================
# REPORT
# ============================================================================

@dataclass
class ClassResult:
    label: int
    ap: float
    true_positives: int
    false_positives: int
    num_ground_truth: int
    precision: List[float] = field(default_factory=list)
    recall: List[float] = field(default_factory=list)


@dataclass
class EvalReport:
    """Per-class AP and counts plus the mAP over classes with ground truth."""

    per_class: Dict[int, ClassResult]
    mean_ap: float
    excluded_classes: List[int]
    config: Dict

    @property
    def ap_by_class(self) -> Dict[int, float]:
        return {label: r.ap for label, r in self.per_class.items()}

    def _name(self, label: int, catalog: Optional[ClassCatalog]) -> str:
        return catalog.name_of(label) if catalog else str(label)

    def to_frame(self, catalog: Optional[ClassCatalog] = None) -> pd.DataFrame:
        rows = [{
            'class': self._name(r.label, catalog),
            'label': r.label,
            'ap': r.ap,
            'tp': r.true_positives,
            'fp': r.false_positives,
            'gt': r.num_ground_truth,
        } for r in self.per_class.values()]
        return pd.DataFrame(rows, columns=['class', 'label', 'ap', 'tp', 'fp', 'gt'])

    def pr_frame(self, catalog: Optional[ClassCatalog] = None) -> pd.DataFrame:
        rows = []
        for r in self.per_class.values():
            for rank, (p, rec) in enumerate(zip(r.precision, r.recall), start=1):
                rows.append({'class': self._name(r.label, catalog), 'rank': rank, 'precision': p, 'recall': rec})
        return pd.DataFrame(rows, columns=['class', 'rank', 'precision', 'recall'])

    def to_dict(self, catalog: Optional[ClassCatalog] = None) -> Dict:
        return {
            'mAP': self.mean_ap,
            'classes': self.to_frame(catalog).to_dict(orient='records'),
            'excluded_classes': [self._name(label, catalog) for label in self.excluded_classes],
            'config': self.config,
        }


def mean_ap(detections: Sequence[Detection],
            annotations: Sequence[Annotation],
            cfg: EvalConfig,
            labels: Optional[Iterable[int]] = None) -> EvalReport:
    """
    Per-class VOC07 AP and their unweighted mean.

    Args:
        detections: All detections
        annotations: All ground truth
        cfg: Evaluation settings
        labels: Classes to score (default: every class seen in either input)

    Returns:
        EvalReport

    Raises:
        EvaluationError: No class has ground truth
    """
    if labels is None:
        labels = {d.class_id for d in detections} | {a.class_id for a in annotations}
    labels = sorted(set(labels))

    flags_by_class: Dict[int, List[bool]] = {label: [] for label in labels}
    for d, is_tp in match_detections(detections, annotations, cfg.iou_threshold):
        if d.class_id in flags_by_class:
            flags_by_class[d.class_id].append(is_tp)
    gt_counts: Dict[int, int] = {label: 0 for label in labels}
    for a in annotations:
        if a.class_id in gt_counts:
            gt_counts[a.class_id] += 1

    per_class: Dict[int, ClassResult] = {}
    excluded: List[int] = []
    for label in labels:
        n_gt = gt_counts[label]
        if n_gt == 0:
            excluded.append(label)
            continue
        flags = flags_by_class[label]
        precision, recall = precision_recall(flags, n_gt)
        per_class[label] = ClassResult(
            label=label,
            ap=average_precision_voc07(flags, n_gt),
            true_positives=int(sum(flags)),
            false_positives=int(len(flags) - sum(flags)),
            num_ground_truth=n_gt,
            precision=precision.tolist(),
            recall=recall.tolist(),
        )

    if not per_class:
        raise EvaluationError("No positive class has ground truth; nothing to evaluate")
    if excluded:
        logger.warning(f"⚠ Classes without ground truth excluded from mAP: {excluded}")

    m = float(np.mean([r.ap for r in per_class.values()]))
    logger.info(f"  ✓ mAP@{cfg.iou_threshold} = {m:.4f} over {len(per_class)} classes")
    return EvalReport(per_class=per_class, mean_ap=m, excluded_classes=excluded, config=cfg.snapshot())


def write_report(report: EvalReport,
                 out_dir: Union[str, Path],
                 catalog: Optional[ClassCatalog] = None,
                 plot: bool = True) -> Path:
    """Write eval_report.json, eval_report.csv, pr_curves.csv and optionally pr_curves.html."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / REPORT_JSON, 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(catalog), f, indent=2)
    report.to_frame(catalog).to_csv(out_dir / REPORT_CSV, index=False)
    pr = report.pr_frame(catalog)
    pr.to_csv(out_dir / PR_CURVES_CSV, index=False)

    if plot and not pr.empty:
        fig = px.line(pr, x='recall', y='precision', color='class', markers=True,
                      title=f"Precision / recall (mAP = {report.mean_ap:.4f})")
        fig.update_layout(xaxis_range=[0, 1.02], yaxis_range=[0, 1.02])
        fig.write_html(out_dir / PR_CURVES_HTML, include_plotlyjs='cdn')
    logger.info(f"  ✓ Evaluation report written to {out_dir}")
    return out_dir


# ============================================================================
# MASK DIAGNOSTICS
# ============================================================================

def mask_pixel_accuracy(mask: ScoreMask, gt_labels: np.ndarray) -> float:
    """Share of cells whose argmax label equals the ground-truth label."""
    if gt_labels.shape != mask.shape_hw:
        raise InvalidInputError(f"Label grid {gt_labels.shape} does not match mask {mask.shape_hw}")
    return float(np.mean(mask.argmax_labels() == gt_labels))


def false_positive_pixels(mask: ScoreMask, gt_labels: np.ndarray, threshold: float = 0.5) -> int:
    """Cells where some positive class other than the true one reaches the threshold."""
    if gt_labels.shape != mask.shape_hw:
        raise InvalidInputError(f"Label grid {gt_labels.shape} does not match mask {mask.shape_hw}")
    wrong = np.zeros(mask.shape_hw, dtype=bool)
    for label, grid in mask.positive_channels():
        wrong |= (grid >= threshold) & (gt_labels != label)
    return int(wrong.sum())


def compare_masks(raw: ScoreMask,
                  refined: ScoreMask,
                  gt_labels: np.ndarray,
                  threshold: float = 0.5) -> Dict[str, float]:
    """Pixel accuracy and false-positive cells of a raw and a refined mask on one label grid."""
    return {
        'raw_pixel_accuracy': mask_pixel_accuracy(raw, gt_labels),
        'refined_pixel_accuracy': mask_pixel_accuracy(refined, gt_labels),
        'raw_false_positives': false_positive_pixels(raw, gt_labels, threshold),
        'refined_false_positives': false_positive_pixels(refined, gt_labels, threshold),
    }


def write_mask_diagnostics(rows: Sequence[Dict], out_dir: Union[str, Path]) -> Dict[str, float]:
    """
    Write per-shelf mask comparisons as mask_diagnostics.csv and their totals
    as mask_diagnostics.json.

    Returns:
        Summary: mean pixel accuracies and summed false-positive cells
    """
    if not rows:
        raise EvaluationError("No shelves to diagnose")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows))
    frame.to_csv(out_dir / MASK_DIAGNOSTICS_CSV, index=False)
    summary = {
        'shelves': int(len(frame)),
        'raw_pixel_accuracy': float(frame['raw_pixel_accuracy'].mean()),
        'refined_pixel_accuracy': float(frame['refined_pixel_accuracy'].mean()),
        'raw_false_positives': int(frame['raw_false_positives'].sum()),
        'refined_false_positives': int(frame['refined_false_positives'].sum()),
    }
    with open(out_dir / MASK_DIAGNOSTICS_JSON, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2)
    logger.info(f"  ✓ Mask diagnostics on {summary['shelves']} shelves: pixel accuracy "
                f"{summary['raw_pixel_accuracy']:.4f} -> {summary['refined_pixel_accuracy']:.4f}, "
                f"false positives {summary['raw_false_positives']} -> {summary['refined_false_positives']}")
    return summary


if __name__ == "__main__":
    from data_model import BoundingBox

    logger.info("=" * 80)
    logger.info("VOC07 AP DEMONSTRATION")
    logger.info("=" * 80)
    logger.info(f"  flags (TP, FP, TP), 2 GT -> AP {average_precision_voc07([True, False, True], 2):.4f}")
    demo_gt = [Annotation('img', 1, BoundingBox(0, 0, 10, 10))]
    demo_det = [Detection('img', 1, BoundingBox(0, 0, 10, 10), 0.9)]
    logger.info(f"  perfect detector -> mAP {mean_ap(demo_det, demo_gt, EvalConfig()).mean_ap:.4f}")
