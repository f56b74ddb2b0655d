"""Pseudo-label generation for the unknown class during training.

A prediction becomes a pseudo-label candidate when its binarized mask has
low IoU with every supervised target; candidates are kept either by an
absolute confidence threshold (ct mode) or by rank (top-k mode). Scores
multiply the classification confidence with the mean in-mask heatmap
value, so an empty binarized mask scores zero.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .scene import Instance, UNKNOWN_LABEL, binarize, mask_iou
from .validation import check_heatmap, check_prob_dist


@dataclass(frozen=True)
class AutoLabelConfig:
    mode: str = "ct"  # "ct" (confidence threshold) or "topk"
    tau: float = 0.7
    k: int = 5
    iou_gate: float = 0.5

    def __post_init__(self):
        if self.mode not in ("ct", "topk"):
            raise ConfigError(f"autolabel mode must be 'ct' or 'topk', got {self.mode!r}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if not 0.0 < self.iou_gate <= 1.0:
            raise ConfigError("iou_gate must lie in (0, 1]")


def objectness_score(class_probs, heatmap) -> float:
    """Confidence score: max foreground class probability times the mean
    heatmap value over voxels above the binarization threshold.

    ``class_probs`` covers unknown + known classes with the no-object entry
    last; no-object is excluded from the max. Returns 0 for an empty
    binarized mask.
    """
    probs = check_prob_dist(class_probs, "class_probs")
    heat = check_heatmap(heatmap)
    s_cls = float(probs[:-1].max()) if probs.size > 1 else float(probs[0])
    mask = binarize(heat)
    n_in = int(mask.sum())
    if n_in == 0:
        return 0.0
    return s_cls * float(heat[mask].sum() / n_in)


def select_pseudo_labels(predictions, known_targets, cfg: AutoLabelConfig, with_scores=False):
    """Pick unknown pseudo-labels from the current predictions.

    Candidates must have a nonempty binarized mask whose IoU with every
    known target mask stays below the gate. ct mode keeps candidates with
    score >= tau (unbounded count); topk keeps the k best. Results follow
    prediction order; ``with_scores`` also returns each pseudo's score.
    """
    candidates = []
    for idx, pred in enumerate(predictions):
        mask = binarize(pred.heatmap)
        if not mask.any():
            continue
        if any(mask_iou(mask, t.mask) >= cfg.iou_gate for t in known_targets):
            continue
        score = objectness_score(pred.class_probs, pred.heatmap)
        candidates.append((score, idx, mask))
    if cfg.mode == "ct":
        keep = [c for c in candidates if c[0] >= cfg.tau]
    else:
        keep = sorted(candidates, key=lambda c: (-c[0], c[1]))[: cfg.k]
        keep.sort(key=lambda c: c[1])
    out = [(Instance(mask=mask, label=UNKNOWN_LABEL), score) for score, _, mask in keep]
    return out if with_scores else [inst for inst, _ in out]
