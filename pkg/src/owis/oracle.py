"""Exhaustive-search evaluation oracle for small scenes.

Re-derives matching by brute force: every prediction-to-ground-truth
matching is enumerated and the one maximizing the TP count is taken,
preferring true positives on higher-confidence predictions among optima.
Metrics are then assembled from those matchings with the same formulas the
main path uses. Intentionally refuses large scenes; this is a test oracle,
not a production path.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .metrics import EvalConfig, EvalReport, _confidence_order, wi_from_counts
from .scene import UNKNOWN_LABEL, mask_iou

MAX_EXHAUSTIVE = 8


def _check_size(dets, gts):
    if len(dets) > MAX_EXHAUSTIVE or len(gts) > MAX_EXHAUSTIVE:
        raise ValidationError(
            f"exhaustive oracle refuses more than {MAX_EXHAUSTIVE} predictions or"
            f" ground-truth instances per scene"
        )


def oracle_match(detections, gts, iou_threshold: float, class_aware: bool = True):
    """Best matching by enumeration: maximize TP count, then prefer TPs on
    higher-confidence detections. Returns (order, flags, gt_match) shaped
    like metrics.match_predictions."""
    _check_size(detections, gts)
    order = _confidence_order(detections)
    eligible = []
    for di in order:
        det = detections[di]
        opts = []
        for gi, gt in enumerate(gts):
            if class_aware and det.label != gt.label:
                continue
            if mask_iou(det.mask, gt.mask) >= iou_threshold:
                opts.append(gi)
        eligible.append(opts)

    best = {"score": None, "flags": None, "assign": None}

    def recurse(pos, used, flags, assign):
        if pos == len(order):
            score = (sum(flags), tuple(flags), tuple(-1 if a is None else -a for a in assign))
            if best["score"] is None or score > best["score"]:
                best["score"] = score
                best["flags"] = list(flags)
                best["assign"] = list(assign)
            return
        recurse(pos + 1, used, flags + [False], assign + [None])
        for gi in eligible[pos]:
            if gi not in used:
                recurse(pos + 1, used | {gi}, flags + [True], assign + [gi])

    recurse(0, frozenset(), [], [])
    gt_match = [None] * len(gts)
    for visit_pos, gi in enumerate(best["assign"]):
        if gi is not None:
            gt_match[gi] = order[visit_pos]
    return order, best["flags"], gt_match


def oracle_average_precision(flags, n_gt: int):
    """AP by direct scan: at each true positive, the best precision at or
    beyond that point times the recall step."""
    if n_gt == 0:
        return None
    flags = list(flags)
    if not flags:
        return 0.0
    precisions = []
    tp = 0
    for i, f in enumerate(flags, start=1):
        tp += int(f)
        precisions.append(tp / i)
    ap = 0.0
    for i, f in enumerate(flags):
        if f:
            ap += max(precisions[i:]) * (1.0 / n_gt)
    return float(ap)


def oracle_evaluate(detections_per_scene, gt_scenes, prev_classes, curr_classes,
                    cfg: EvalConfig | None = None, task_index: int = 1) -> EvalReport:
    """Exhaustive counterpart of metrics.evaluate for tiny scenes."""
    cfg = cfg or EvalConfig()
    if len(detections_per_scene) != len(gt_scenes):
        raise ValidationError("detections and scenes must align")
    prev_classes = frozenset(prev_classes)
    curr_classes = frozenset(curr_classes)
    known = sorted(prev_classes | curr_classes)
    primary_iou = cfg.map_iou_thresholds[0]

    per_class_records = {c: [] for c in known}
    per_class_gt = {c: 0 for c in known}
    unk_matched = 0
    unk_total = 0
    aose_total = 0
    wi_tp = wi_fp = wi_fpu = 0

    for dets, scene in zip(detections_per_scene, gt_scenes):
        gts = list(scene.instances)
        _check_size(dets, gts)
        for c in known:
            class_dets = [d for d in dets if d.label == c]
            class_gts = [g for g in gts if g.label == c]
            per_class_gt[c] += len(class_gts)
            order, flags, _ = oracle_match(class_dets, class_gts, primary_iou)
            for di, f in zip(order, flags):
                per_class_records[c].append((class_dets[di].confidence, f))

        ur_gts = [g for g in gts if g.label == UNKNOWN_LABEL]
        unk_total += len(ur_gts)
        if ur_gts:
            unknown_dets = [d for d in dets if d.label == UNKNOWN_LABEL]
            _, uflags, _ = oracle_match(unknown_dets, ur_gts, cfg.u_recall_iou)
            unk_matched += sum(uflags)

        known_dets_all = [d for d in dets if d.label != UNKNOWN_LABEL]
        _, aflags, _ = oracle_match(known_dets_all, ur_gts, cfg.a_ose_iou, class_aware=False)
        aose_total += sum(aflags)

        conf_dets = [d for d in known_dets_all if d.confidence >= cfg.wi_confidence]
        known_gts = [g for g in gts if g.label != UNKNOWN_LABEL]
        worder, wflags, _ = oracle_match(conf_dets, known_gts, primary_iou)
        tp = sum(wflags)
        leftovers = [conf_dets[di] for di, f in zip(worder, wflags) if not f]
        _, lflags, _ = oracle_match(leftovers, ur_gts, primary_iou, class_aware=False)
        fpu = sum(lflags)
        wi_tp += tp
        wi_fp += len(leftovers) - fpu
        wi_fpu += fpu

    per_class = {}
    for c in known:
        records = sorted(per_class_records[c], key=lambda r: -r[0])
        flags = [f for _, f in records]
        ap = oracle_average_precision(flags, per_class_gt[c])
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
    )
