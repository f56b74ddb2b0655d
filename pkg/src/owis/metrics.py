"""Open-world evaluation: greedy instance matching, AP/mAP, U-Recall,
wilderness impact, and absolute open-set error.

Matching protocol: predictions are visited in descending confidence (ties
by input position); each may claim the unmatched ground-truth instance of
its own class with the highest IoU at or above the threshold. Because
ground-truth masks within a scene are disjoint, this greedy matching
attains the maximum TP count, which the exhaustive oracle verifies.

Wilderness impact follows the open-world detection convention: among
known-labeled predictions above the confidence cut, true positives are
matched against known ground truth; of the remainder, those covering an
unknown instance (the A-OSE matches) enlarge only the open-set denominator
while the rest count as ordinary false positives.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .scene import UNKNOWN_LABEL, mask_iou
from .validation import check_binary_mask


@dataclass(frozen=True)
class Detection:
    """One predicted instance at evaluation time."""

    mask: np.ndarray
    label: int
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "mask", check_binary_mask(self.mask, "detection mask"))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "confidence", float(self.confidence))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    map_iou_thresholds: tuple = (0.5,)
    wi_confidence: float = 0.5
    u_recall_iou: float = 0.5
    a_ose_iou: float = 0.5

    def __post_init__(self):
        for t in tuple(self.map_iou_thresholds) + (
            self.u_recall_iou,
            self.a_ose_iou,
        ):
            if not 0.0 < t <= 1.0:
                raise ValidationError("IoU thresholds must lie in (0, 1]")
        object.__setattr__(self, "map_iou_thresholds", tuple(self.map_iou_thresholds))


def _confidence_order(detections):
    return sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))


def match_predictions(detections, gts, iou_threshold: float, class_aware: bool = True):
    """Greedy descending-confidence matching.

    Returns (order, flags, gt_match): detection indices in visit order,
    a TP flag per visited detection, and for each ground-truth instance
    the index of the detection that claimed it (or None).
    """
    order = _confidence_order(detections)
    flags = []
    gt_match = [None] * len(gts)
    for di in order:
        det = detections[di]
        best = None
        for gi, gt in enumerate(gts):
            if gt_match[gi] is not None:
                continue
            if class_aware and gt.label != det.label:
                continue
            iou = mask_iou(det.mask, gt.mask)
            if iou >= iou_threshold and (best is None or iou > best[0]):
                best = (iou, gi)
        if best is None:
            flags.append(False)
        else:
            gt_match[best[1]] = di
            flags.append(True)
    return order, flags, gt_match


def average_precision(flags, n_gt: int):
    """Area under the precision-recall curve with monotone interpolation.

    ``flags`` must be ordered by descending confidence. Undefined (None)
    when there is no ground truth.
    """
    if n_gt == 0:
        return None
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at or beyond each recall level
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p, f in zip(recall, env, flags):
        if f:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def u_recall(detections, gts, iou_threshold: float = 0.5):
    """Fraction of unknown ground truth recovered by unknown-labeled
    predictions; None when no unknown ground truth exists."""
    unknown_gts = [g for g in gts if g.label == UNKNOWN_LABEL]
    if not unknown_gts:
        return None
    unknown_dets = [d for d in detections if d.label == UNKNOWN_LABEL]
    _, flags, _ = match_predictions(unknown_dets, unknown_gts, iou_threshold)
    return float(sum(flags) / len(unknown_gts))


def a_ose(detections, gts, iou_threshold: float = 0.5) -> int:
    """Count of unknown ground-truth instances covered (IoU >= threshold)
    by a prediction carrying a known label."""
    unknown_gts = [g for g in gts if g.label == UNKNOWN_LABEL]
    known_dets = [d for d in detections if d.label != UNKNOWN_LABEL]
    _, flags, _ = match_predictions(known_dets, unknown_gts, iou_threshold, class_aware=False)
    return int(sum(flags))


def _wi_counts(detections, gts, confidence: float, iou_threshold: float):
    """(TP, FP, FP_u) for the wilderness-impact protocol on one scene."""
    known_dets = [
        d for d in detections if d.label != UNKNOWN_LABEL and d.confidence >= confidence
    ]
    known_gts = [g for g in gts if g.label != UNKNOWN_LABEL]
    unknown_gts = [g for g in gts if g.label == UNKNOWN_LABEL]
    order, flags, _ = match_predictions(known_dets, known_gts, iou_threshold)
    tp = sum(flags)
    leftovers = [known_dets[di] for di, f in zip(order, flags) if not f]
    _, uflags, _ = match_predictions(leftovers, unknown_gts, iou_threshold, class_aware=False)
    fp_u = sum(uflags)
    fp = len(leftovers) - fp_u
    return int(tp), int(fp), int(fp_u)


def wilderness_impact(detections, gts, confidence: float = 0.5, iou_threshold: float = 0.5) -> float:
    tp, fp, fp_u = _wi_counts(detections, gts, confidence, iou_threshold)
    return wi_from_counts(tp, fp, fp_u)


def wi_from_counts(tp: int, fp: int, fp_u: int) -> float:
    if tp + fp == 0 or tp == 0:
        return 0.0
    p_k = tp / (tp + fp)
    p_ku = tp / (tp + fp + fp_u)
    return float(p_k / p_ku - 1.0)


@dataclass
class EvalReport:
    """Aggregate open-world results over an evaluation set."""

    task_index: int
    map_prev: float | None
    map_curr: float | None
    map_all: float | None
    u_recall: float | None
    wi: float
    a_ose: int
    per_class: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task_index,
            "map_prev": self.map_prev,
            "map_curr": self.map_curr,
            "map_all": self.map_all,
            "u_recall": self.u_recall,
            "wi": self.wi,
            "a_ose": self.a_ose,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "extra": self.extra,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")


def evaluate(detections_per_scene, gt_scenes, prev_classes, curr_classes,
             cfg: EvalConfig | None = None, task_index: int = 1, extra=None) -> EvalReport:
    """Full open-world report over aligned (detections, scene) pairs.

    Ground-truth scenes must already be relabeled for evaluation (future
    classes as unknown). mAP averages per-class AP over classes that appear
    in the ground truth; scenes are reduced in input order.
    """
    cfg = cfg or EvalConfig()
    if len(detections_per_scene) != len(gt_scenes):
        raise ValidationError("detections and scenes must align")
    prev_classes = frozenset(prev_classes)
    curr_classes = frozenset(curr_classes)
    known = sorted(prev_classes | curr_classes)
    primary_iou = cfg.map_iou_thresholds[0]

    per_class_records = {c: [] for c in known}  # (confidence, is_tp)
    per_class_gt = {c: 0 for c in known}
    unk_matched = 0
    unk_total = 0
    aose_total = 0
    wi_tp = wi_fp = wi_fpu = 0

    for dets, scene in zip(detections_per_scene, gt_scenes):
        gts = list(scene.instances)
        for c in known:
            class_dets = [d for d in dets if d.label == c]
            class_gts = [g for g in gts if g.label == c]
            per_class_gt[c] += len(class_gts)
            order, flags, _ = match_predictions(class_dets, class_gts, primary_iou)
            for di, f in zip(order, flags):
                per_class_records[c].append((class_dets[di].confidence, f))
        ur_gts = [g for g in gts if g.label == UNKNOWN_LABEL]
        unk_total += len(ur_gts)
        if ur_gts:
            unknown_dets = [d for d in dets if d.label == UNKNOWN_LABEL]
            _, uflags, _ = match_predictions(unknown_dets, ur_gts, cfg.u_recall_iou)
            unk_matched += sum(uflags)
        aose_total += a_ose(dets, gts, cfg.a_ose_iou)
        tp, fp, fpu = _wi_counts(dets, gts, cfg.wi_confidence, primary_iou)
        wi_tp, wi_fp, wi_fpu = wi_tp + tp, wi_fp + fp, wi_fpu + fpu

    per_class = {}
    for c in known:
        records = sorted(per_class_records[c], key=lambda r: -r[0])
        flags = [f for _, f in records]
        ap = average_precision(flags, per_class_gt[c])
        per_class[c] = {
            "ap": ap,
            "tp": int(sum(flags)),
            "fp": int(len(flags) - sum(flags)),
            "n_gt": per_class_gt[c],
        }

    def group_map(classes):
        aps = [per_class[c]["ap"] for c in classes if per_class[c]["ap"] is not None]
        return float(np.mean(aps)) if aps else None

    return EvalReport(
        task_index=task_index,
        map_prev=group_map(sorted(prev_classes)),
        map_curr=group_map(sorted(curr_classes)),
        map_all=group_map(known),
        u_recall=(unk_matched / unk_total) if unk_total else None,
        wi=wi_from_counts(wi_tp, wi_fp, wi_fpu),
        a_ose=int(aose_total),
        per_class=per_class,
        extra=extra or {},
    )


def report_to_csv(reports) -> str:
    """CSV with one row per task mirroring the published column layout."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "wi", "a_ose", "u_recall", "map_prev", "map_curr", "map_all"])
    for r in reports:
        writer.writerow(
            [
                r.task_index,
                f"{r.wi:.6f}",
                r.a_ose,
                "" if r.u_recall is None else f"{r.u_recall:.6f}",
                "" if r.map_prev is None else f"{r.map_prev:.6f}",
                "" if r.map_curr is None else f"{r.map_curr:.6f}",
                "" if r.map_all is None else f"{r.map_all:.6f}",
            ]
        )
    return buf.getvalue()
