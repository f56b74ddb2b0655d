"""Prototype bank, query store, contrastive clustering, and the
reachability-based probability correction applied at inference.

Prototypes are one embedding per class id in {0} U known classes, with 0
the unknown class. They are maintained by an exponential moving average of
per-class query-store means on a fixed cadence and are treated as constants
by the contrastive loss (no gradient flows into the bank).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError, ValidationError
from .scene import UNKNOWN_LABEL
from .validation import check_finite, check_prob_dist


@dataclass
class QueryStore:
    """Per-class bounded FIFO queues of labeled refined queries."""

    capacity: int = 256
    queues: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("query store capacity must be positive")

    def push(self, class_id: int, query) -> None:
        q = self.queues.setdefault(int(class_id), deque(maxlen=self.capacity))
        q.append(np.array(query, dtype=np.float64))

    def mean(self, class_id: int):
        q = self.queues.get(int(class_id))
        if not q:
            return None
        return np.mean(q, axis=0)

    def __len__(self):
        return sum(len(q) for q in self.queues.values())


@dataclass
class PrototypeBank:
    """One prototype vector per class id; single-writer, EMA-updated."""

    dim: int
    class_ids: tuple
    momentum: float = 0.9
    update_every: int = 10
    margin: float = 1.0
    prototypes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.update_every < 1:
            raise ConfigError("update cadence must be >= 1")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if UNKNOWN_LABEL not in self.class_ids:
            self.class_ids = (UNKNOWN_LABEL,) + self.class_ids
        for c in self.class_ids:
            self.prototypes.setdefault(c, np.zeros(self.dim))
        for c, p in self.prototypes.items():
            check_finite(p, f"prototype {c}")

    @property
    def known_ids(self) -> tuple:
        return tuple(c for c in self.class_ids if c != UNKNOWN_LABEL)

    def vector(self, class_id: int) -> np.ndarray:
        try:
            return self.prototypes[int(class_id)]
        except KeyError:
            raise ValidationError(f"no prototype for class {class_id}") from None

    def add_classes(self, new_ids) -> None:
        for c in new_ids:
            c = int(c)
            if c not in self.prototypes:
                self.class_ids = self.class_ids + (c,)
                self.prototypes[c] = np.zeros(self.dim)


def store_labeled_queries(store: QueryStore, labeled_queries) -> QueryStore:
    """Append (class_id, refined query) pairs; oldest entries evicted at
    capacity. Class ids outside {0} U knowns are the caller's mistake."""
    for class_id, query in labeled_queries:
        if int(class_id) < 0:
            raise ValidationError(f"cannot store query under label {class_id}")
        store.push(class_id, query)
    return store


def update_prototypes(store: QueryStore, bank: PrototypeBank) -> PrototypeBank:
    """EMA step: prototype <- mu * prototype + (1 - mu) * queue mean."""
    mu = bank.momentum
    for c in bank.class_ids:
        m = store.mean(c)
        if m is None:
            continue
        bank.prototypes[c] = mu * bank.prototypes[c] + (1.0 - mu) * m
    return bank


def contrastive_loss(query, label: int, bank: PrototypeBank):
    """Hinge embedding loss of one labeled query against all prototypes.

    Pulls the query toward its own class prototype (plain L2 distance) and
    pushes it outside the margin of every other prototype. Returns
    (loss, gradient w.r.t. the query); prototypes receive no gradient.
    """
    label = int(label)
    if label not in bank.prototypes:
        raise ValidationError(f"label {label} has no prototype")
    q = np.asarray(query, dtype=np.float64)
    loss = 0.0
    grad = np.zeros_like(q)
    for c in bank.class_ids:
        diff = q - bank.prototypes[c]
        dist = float(np.linalg.norm(diff))
        unit = diff / dist if dist > 0 else np.zeros_like(diff)
        if c == label:
            loss += dist
            grad += unit
        elif dist < bank.margin:
            loss += bank.margin - dist
            grad -= unit
    return loss, grad


@dataclass(frozen=True)
class PCCalibration:
    """Shift/scale of the correction sigmoid, pinned by two constraints:
    probability 0.05 at reachability 0 and 0.95 at half the margin."""

    shift: float
    scale: float


def calibrate_pc(margin: float) -> PCCalibration:
    """Closed form: shift = margin/4, scale = margin / (4 ln 19)."""
    if margin <= 0:
        raise ConfigError("margin must be positive")
    return PCCalibration(shift=margin / 4.0, scale=margin / (4.0 * math.log(19.0)))


def reachability(query, bank: PrototypeBank) -> float:
    """Distance from the query to its nearest known-class prototype
    (the unknown prototype is excluded)."""
    known = bank.known_ids
    if not known:
        raise StateError("reachability needs at least one known-class prototype")
    q = np.asarray(query, dtype=np.float64)
    return min(float(np.linalg.norm(q - bank.prototypes[c])) for c in known)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def correct_probabilities(class_probs, query, bank: PrototypeBank,
                          calibration: PCCalibration, union_mode: str = "noisy_or"):
    """Inference-time unknown-probability correction.

    ``class_probs`` is the head distribution ordered [unknown, knowns...,
    no-object]. The leftover mass 1 - sum(knowns) feeds the correction, the
    reachability sigmoid gates it, and the corrected unknown probability is
    combined with the head's own unknown probability (noisy-OR by default,
    max as the configured alternative). Known-class probabilities are then
    rescaled to keep the output a distribution over {0} U knowns; the
    no-object entry is absorbed.
    """
    probs = check_prob_dist(class_probs, "class_probs")
    known = bank.known_ids
    if probs.size != len(known) + 2:
        raise ValidationError(
            f"expected {len(known) + 2} head entries for {len(known)} known classes, "
            f"got {probs.size}"
        )
    if union_mode not in ("noisy_or", "max"):
        raise ConfigError(f"union_mode must be 'noisy_or' or 'max', got {union_mode!r}")
    p_unknown_head = float(probs[0])
    p_known = probs[1:-1]
    known_sum = float(p_known.sum())

    p_not_known = min(max(1.0 - known_sum, 0.0), 1.0)
    gamma = reachability(query, bank)
    p_far = _sigmoid((gamma - calibration.shift) / calibration.scale)
    p_corr = p_far * p_not_known

    if union_mode == "noisy_or":
        p0 = p_unknown_head + p_corr - p_unknown_head * p_corr
    else:
        p0 = max(p_unknown_head, p_corr)

    out = np.empty(len(known) + 1)
    out[0] = p0
    if known_sum <= 0.0:
        out[0] = 1.0
        out[1:] = 0.0
    else:
        out[1:] = p_known / known_sum * (1.0 - p0)
    return out
