"""Query-based voxel instance segmenter with exact gradients.

Architecture: a two-layer tanh encoder maps each voxel's (x, y, z, r, g, b)
to a D-dim feature; n_Q learnable queries are refined by scaled dot-product
attention over the voxel features; per-voxel heatmaps come from the
query-feature similarity through a sigmoid, and a linear head over the
refined query gives the class distribution. Head layout: index 0 is the
unknown class, 1..K the known classes in ``known_class_order``, and the
last index is no-object.

Training runs momentum gradient descent on the reverse-mode tape from
``autodiff``; finite differences appear only in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autolabel import AutoLabelConfig, objectness_score, select_pseudo_labels
from .errors import ConfigError, NumericError, ValidationError
from .matching import DEFAULT_WEIGHTS, Matching, assign_targets
from .metrics import Detection
from .prototypes import (
    PrototypeBank,
    QueryStore,
    calibrate_pc,
    correct_probabilities,
    store_labeled_queries,
    update_prototypes,
)
from .scene import Scene, UNKNOWN_LABEL, binarize
from .validation import rng_from

PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "queries", "cls_w", "cls_b")


@dataclass
class ModelParams:
    """All learnable tensors plus the head bookkeeping they depend on."""

    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    queries: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray
    known_class_order: tuple
    refine_rounds: int = 2
    color_scale: float = 1.0  # relative weight of color vs position inputs
    seed: int = 0

    def __post_init__(self):
        self.known_class_order = tuple(int(c) for c in self.known_class_order)
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValidationError(f"parameter {name} contains non-finite values")
            setattr(self, name, arr)
        expected = len(self.known_class_order) + 2
        if self.cls_w.shape[0] != expected or self.cls_b.shape[0] != expected:
            raise ValidationError(
                f"class head must have {expected} outputs for "
                f"{len(self.known_class_order)} known classes"
            )

    @property
    def feature_dim(self) -> int:
        return self.enc_w2.shape[1]

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def n_head(self) -> int:
        return self.cls_w.shape[0]

    @property
    def no_object_index(self) -> int:
        return self.n_head - 1

    def head_index(self, class_id: int) -> int:
        if class_id == UNKNOWN_LABEL:
            return 0
        try:
            return 1 + self.known_class_order.index(int(class_id))
        except ValueError:
            raise ValidationError(f"class {class_id} not in the current head") from None

    def class_id_at(self, head_index: int) -> int:
        if head_index == 0:
            return UNKNOWN_LABEL
        if head_index == self.no_object_index:
            raise ValidationError("no-object head index carries no class id")
        return self.known_class_order[head_index - 1]

    def n_parameters(self) -> int:
        return sum(getattr(self, name).size for name in PARAM_NAMES)

    def copy(self) -> "ModelParams":
        return ModelParams(
            **{name: getattr(self, name).copy() for name in PARAM_NAMES},
            known_class_order=self.known_class_order,
            refine_rounds=self.refine_rounds,
            color_scale=self.color_scale,
            seed=self.seed,
        )


def init_params(known_class_order, feature_dim=32, hidden_dim=64, n_queries=20,
                refine_rounds=2, color_scale=1.0, seed=0) -> ModelParams:
    """Seeded initialization; weights are small normals, biases zero."""
    rng = rng_from(seed, 11)
    n_head = len(known_class_order) + 2
    return ModelParams(
        enc_w1=rng.normal(0.0, 1.0 / np.sqrt(6.0), size=(6, hidden_dim)),
        enc_b1=np.zeros(hidden_dim),
        enc_w2=rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, feature_dim)),
        enc_b2=np.zeros(feature_dim),
        queries=rng.normal(0.0, 1.0, size=(n_queries, feature_dim)),
        cls_w=rng.normal(0.0, 0.1, size=(n_head, feature_dim)),
        cls_b=np.zeros(n_head),
        known_class_order=tuple(known_class_order),
        refine_rounds=refine_rounds,
        color_scale=color_scale,
        seed=seed,
    )


def widen_head(params: ModelParams, new_class_ids) -> ModelParams:
    """Grow the class head with zero-initialized rows for new classes,
    keeping the no-object row last. All other parameters are shared."""
    new_class_ids = tuple(int(c) for c in new_class_ids)
    for c in new_class_ids:
        if c in params.known_class_order or c == UNKNOWN_LABEL:
            raise ValidationError(f"class {c} already present in the head")
    n_new = len(new_class_ids)
    d = params.feature_dim
    cls_w = np.concatenate([params.cls_w[:-1], np.zeros((n_new, d)), params.cls_w[-1:]], axis=0)
    cls_b = np.concatenate([params.cls_b[:-1], np.zeros(n_new), params.cls_b[-1:]])
    return replace(
        params.copy(),
        cls_w=cls_w,
        cls_b=cls_b,
        known_class_order=params.known_class_order + new_class_ids,
    )


@dataclass(frozen=True)
class Prediction:
    """One query's output: refined embedding, heatmap, class distribution,
    and the objectness confidence used for ranking."""

    query: np.ndarray
    heatmap: np.ndarray
    class_probs: np.ndarray
    objectness: float


def featurize(scene: Scene, color_scale: float = 1.0) -> np.ndarray:
    """Per-voxel input features: normalized position and color in [-1, 1],
    with color optionally down-weighted so similarity stays position-led."""
    extent = np.maximum(scene.coords.max(axis=0), 1) if scene.n_voxels else np.ones(3)
    pos = scene.coords / extent * 2.0 - 1.0
    col = (scene.colors * 2.0 - 1.0) * color_scale
    return np.concatenate([pos, col], axis=1)


def _forward_graph(leaves: dict, feats: np.ndarray, refine_rounds: int):
    x = ad.Tensor(feats)
    h = ad.tanh(x @ leaves["enc_w1"] + leaves["enc_b1"])
    f = h @ leaves["enc_w2"] + leaves["enc_b2"]
    q = leaves["queries"]
    scale = 1.0 / np.sqrt(q.value.shape[1])
    for _ in range(refine_rounds):
        attn = ad.softmax((q @ f.T) * scale, axis=1)
        q = q + attn @ f
    heat_logits = (q @ f.T) * scale
    cls_logits = q @ leaves["cls_w"].T + leaves["cls_b"]
    return q, heat_logits, cls_logits


def _leaves(params: ModelParams, requires_grad: bool) -> dict:
    make = ad.param if requires_grad else ad.Tensor
    return {name: make(getattr(params, name)) for name in PARAM_NAMES}


def forward(params: ModelParams, scene: Scene):
    """Evaluate the model on one scene; returns one Prediction per query."""
    q, heat_logits, cls_logits = _forward_graph(
        _leaves(params, requires_grad=False), featurize(scene, params.color_scale),
        params.refine_rounds,
    )
    return _predictions_from_values(q.value, heat_logits.value, cls_logits.value)


def _predictions_from_values(q, heat_logits, cls_logits):
    heat = 1.0 / (1.0 + np.exp(-heat_logits))
    shifted = cls_logits - cls_logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    if not (np.isfinite(heat).all() and np.isfinite(probs).all()):
        raise NumericError("non-finite activation in forward pass")
    out = []
    for j in range(q.shape[0]):
        out.append(
            Prediction(
                query=q[j],
                heatmap=heat[j],
                class_probs=probs[j],
                objectness=objectness_score(probs[j], heat[j]),
            )
        )
    return out


def training_loss_graph(heat_logits, cls_logits, queries, matching: Matching,
                        target_masks, target_label_indices, no_object_index: int,
                        weights=None, no_object_weight: float = 1.0,
                        bank: PrototypeBank | None = None, matched_labels=None,
                        lambda_cont: float = 0.0, mask_loss_targets=None):
    """Assemble the scalar training loss on the tape.

    Matched queries: cross-entropy on the target's head index plus weighted
    mean BCE and soft-dice on the heatmap. Unmatched queries: cross-entropy
    on no-object. Optionally adds the prototype contrastive term for matched
    queries (prototypes enter as constants). ``mask_loss_targets`` restricts
    the mask terms to a subset of target indices (class terms always apply).
    """
    w = dict(DEFAULT_WEIGHTS, **(weights or {}))
    logp = ad.log_softmax(cls_logits, axis=1)
    terms = []

    if matching.pairs:
        q_rows = np.array([q for q, _ in matching.pairs])
        t_rows = np.array([t for _, t in matching.pairs])
        label_cols = np.array([target_label_indices[t] for t in t_rows])
        terms.append(-ad.tsum(ad.gather(logp, q_rows, label_cols)))

        if mask_loss_targets is None:
            mask_pairs = list(matching.pairs)
        else:
            allowed = set(mask_loss_targets)
            mask_pairs = [(q, t) for q, t in matching.pairs if t in allowed]
    if matching.pairs and mask_pairs:
        mq_rows = np.array([q for q, _ in mask_pairs])
        mt_rows = np.array([t for _, t in mask_pairs])
        masks = np.stack([np.asarray(target_masks[t], dtype=np.float64) for t in mt_rows])
        z = ad.gather_rows(heat_logits, mq_rows)
        h = ad.sigmoid(z)
        hc = ad.clip(h, 1e-7, 1.0 - 1e-7)
        n = masks.shape[1]
        bce = -ad.tsum(masks * ad.log(hc) + (1.0 - masks) * ad.log(1.0 - hc)) * (1.0 / n)
        terms.append(w["bce"] * bce)

        inter = ad.tsum(h * masks, axis=1)
        denom = ad.tsum(h, axis=1) + masks.sum(axis=1)
        dice = ad.tsum(1.0 - 2.0 * inter / denom)
        terms.append(w["dice"] * dice)

    if matching.unmatched_queries:
        rows = np.array(matching.unmatched_queries)
        cols = np.full(len(rows), no_object_index)
        terms.append(-no_object_weight * ad.tsum(ad.gather(logp, rows, cols)))

    if bank is not None and lambda_cont > 0.0 and matching.pairs:
        q_rows = np.array([q for q, _ in matching.pairs])
        labels = [int(matched_labels[t]) for _, t in matching.pairs]
        protos = np.stack([bank.prototypes[c] for c in bank.class_ids])
        onehot = np.zeros((len(labels), len(bank.class_ids)))
        index_of = {c: i for i, c in enumerate(bank.class_ids)}
        for i, c in enumerate(labels):
            onehot[i, index_of[c]] = 1.0
        qm = ad.gather_rows(queries, q_rows)
        diff = ad.reshape(qm, (len(labels), 1, qm.value.shape[1])) - protos[None, :, :]
        dist = ad.sqrt(ad.tsum(diff * diff, axis=2))
        pull = ad.tsum(dist * onehot)
        push = ad.tsum(ad.relu(bank.margin - dist) * (1.0 - onehot))
        terms.append(lambda_cont * (pull + push))

    total = terms[0] if terms else ad.Tensor(0.0)
    for t in terms[1:]:
        total = total + t
    return total


def training_loss(params: ModelParams, scene: Scene, targets, matching: Matching,
                  weights=None, no_object_weight: float = 1.0):
    """Loss value and exact gradients for one scene under a fixed matching.

    Returns (loss, grads) where grads maps parameter names to arrays shaped
    like the parameters.
    """
    leaves = _leaves(params, requires_grad=True)
    q, heat_logits, cls_logits = _forward_graph(
        leaves, featurize(scene, params.color_scale), params.refine_rounds
    )
    loss = training_loss_graph(
        heat_logits, cls_logits, q, matching,
        [t.mask for t in targets],
        [params.head_index(t.label) for t in targets],
        params.no_object_index, weights, no_object_weight,
    )
    ad.backward(loss)
    grads = {
        name: (leaves[name].grad if leaves[name].grad is not None else np.zeros_like(leaves[name].value))
        for name in PARAM_NAMES
    }
    return float(loss.value), grads


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"  # "sgd" (momentum gradient descent) or "adam"
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    no_object_weight: float = 1.0
    lambda_cont: float = 0.2
    clip_norm: float | None = None  # global gradient-norm cap; None disables
    pseudo_mask_loss: bool = True  # False: pseudo-labels supervise class only
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")


def train_task(params: ModelParams, scenes, cfg: TrainConfig,
               autolabel_cfg: AutoLabelConfig | None = None,
               bank: PrototypeBank | None = None,
               store: QueryStore | None = None):
    """Momentum-SGD training over relabeled scenes for one task phase.

    Per step: forward, regenerate unknown pseudo-labels from the current
    predictions (when an autolabel config is given), Hungarian-match the
    combined target set, take a gradient step, then feed matched queries to
    the store and refresh prototypes on the bank's cadence. Deterministic
    for fixed inputs and seed. Raises NumericError carrying the last
    finite checkpoint if the loss diverges.
    """
    params = params.copy()
    velocity = {name: np.zeros_like(getattr(params, name)) for name in PARAM_NAMES}
    second = {name: np.zeros_like(getattr(params, name)) for name in PARAM_NAMES}
    feats_cache = {s.id: featurize(s, params.color_scale) for s in scenes}
    last_good = params.copy()
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_from(cfg.seed, 3, epoch).permutation(len(scenes))
        epoch_loss = 0.0
        epoch_pseudo = 0
        for scene_pos in order:
            scene = scenes[scene_pos]
            leaves = _leaves(params, requires_grad=True)
            try:
                q, heat_logits, cls_logits = _forward_graph(
                    leaves, feats_cache[scene.id], params.refine_rounds
                )
                preds = _predictions_from_values(q.value, heat_logits.value, cls_logits.value)
            except NumericError as e:
                raise NumericError(
                    f"{e} (epoch {epoch}, step {step})", last_good=last_good
                ) from None

            targets = list(scene.instances)
            n_real = len(targets)
            if autolabel_cfg is not None:
                pseudo = select_pseudo_labels(preds, targets, autolabel_cfg, with_scores=True)
                room = params.n_queries - len(targets)
                if len(pseudo) > room:
                    pseudo = sorted(pseudo, key=lambda p: -p[1])[:room]
                epoch_pseudo += len(pseudo)
                targets = targets + [inst for inst, _ in pseudo]

            label_indices = [params.head_index(t.label) for t in targets]
            matching = assign_targets(preds, targets, label_indices, cfg.weights)
            loss = training_loss_graph(
                heat_logits, cls_logits, q, matching,
                [t.mask for t in targets], label_indices, params.no_object_index,
                cfg.weights, cfg.no_object_weight,
                bank=bank, matched_labels=[t.label for t in targets],
                lambda_cont=cfg.lambda_cont,
                mask_loss_targets=None if cfg.pseudo_mask_loss else range(n_real),
            )
            if not np.isfinite(loss.value):
                raise NumericError(
                    f"loss diverged at epoch {epoch}, step {step}", last_good=last_good
                )
            ad.backward(loss)
            grads = {name: leaves[name].grad for name in PARAM_NAMES}
            if cfg.clip_norm is not None:
                total = np.sqrt(
                    sum(float((g * g).sum()) for g in grads.values() if g is not None)
                )
                if total > cfg.clip_norm:
                    scale = cfg.clip_norm / total
                    grads = {
                        name: (g * scale if g is not None else None)
                        for name, g in grads.items()
                    }
            for name in PARAM_NAMES:
                g = grads[name]
                if g is None:
                    continue
                arr = getattr(params, name)
                if cfg.optimizer == "adam":
                    velocity[name] = 0.9 * velocity[name] + 0.1 * g
                    second[name] = 0.999 * second[name] + 0.001 * g * g
                    m_hat = velocity[name] / (1.0 - 0.9 ** (step + 1))
                    v_hat = second[name] / (1.0 - 0.999 ** (step + 1))
                    arr -= cfg.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
                else:
                    velocity[name] = cfg.momentum * velocity[name] + g
                    arr -= cfg.lr * velocity[name]

            step += 1
            if bank is not None and store is not None:
                labeled = [(targets[t].label, q.value[qi]) for qi, t in matching.pairs]
                store_labeled_queries(store, labeled)
                if step % bank.update_every == 0:
                    update_prototypes(store, bank)
            epoch_loss += float(loss.value)
        log.append(
            {
                "epoch": epoch,
                "mean_loss": epoch_loss / max(len(scenes), 1),
                "pseudo_labels": epoch_pseudo,
            }
        )
        last_good = params.copy()
    return params, log


def detect_scene(params: ModelParams, scene: Scene, bank: PrototypeBank | None = None,
                 use_pc: bool = True, union_mode: str = "noisy_or"):
    """Turn one scene's predictions into ranked detections.

    With probability correction, each query's class distribution is
    corrected over {unknown} U knowns before the argmax, so nothing is
    discarded as no-object; without it, queries whose argmax lands on
    no-object are dropped. Empty binarized masks are always dropped.
    Confidence is the objectness score in both modes.
    """
    preds = forward(params, scene)
    detections = []
    if use_pc:
        if bank is None:
            raise ValidationError("probability correction needs a prototype bank")
        calibration = calibrate_pc(bank.margin)
    for pred in preds:
        mask = binarize(pred.heatmap)
        if not mask.any():
            continue
        if use_pc:
            corrected = correct_probabilities(
                pred.class_probs, pred.query, bank, calibration, union_mode
            )
            head = int(np.argmax(corrected))
            label = UNKNOWN_LABEL if head == 0 else bank.known_ids[head - 1]
        else:
            head = int(np.argmax(pred.class_probs))
            if head == params.no_object_index:
                continue
            label = params.class_id_at(head)
        detections.append(Detection(mask=mask, label=label, confidence=pred.objectness))
    detections.sort(key=lambda d: -d.confidence)
    return detections


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_to_dict(params: ModelParams, bank: PrototypeBank, task_index: int,
                       split_dict: dict, catalog_hash: str, extra=None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "task_index": int(task_index),
        "catalog_hash": catalog_hash,
        "split": split_dict,
        "known_class_order": list(params.known_class_order),
        "refine_rounds": params.refine_rounds,
        "color_scale": params.color_scale,
        "seed": params.seed,
        "params": {name: getattr(params, name).tolist() for name in PARAM_NAMES},
        "prototypes": {str(c): bank.prototypes[c].tolist() for c in bank.class_ids},
        "bank": {
            "momentum": bank.momentum,
            "update_every": bank.update_every,
            "margin": bank.margin,
        },
        "extra": extra or {},
    }


def checkpoint_from_dict(data: dict):
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {data.get('version')!r}")
    params = ModelParams(
        **{name: np.asarray(data["params"][name], dtype=np.float64) for name in PARAM_NAMES},
        known_class_order=tuple(data["known_class_order"]),
        refine_rounds=int(data["refine_rounds"]),
        color_scale=float(data.get("color_scale", 1.0)),
        seed=int(data["seed"]),
    )
    class_ids = tuple(int(c) for c in data["prototypes"])
    bank = PrototypeBank(
        dim=params.feature_dim,
        class_ids=class_ids,
        momentum=float(data["bank"]["momentum"]),
        update_every=int(data["bank"]["update_every"]),
        margin=float(data["bank"]["margin"]),
        prototypes={int(c): np.asarray(v, dtype=np.float64) for c, v in data["prototypes"].items()},
    )
    return params, bank, int(data["task_index"]), data["split"], data["catalog_hash"], data.get("extra", {})


def save_checkpoint(path, params: ModelParams, bank: PrototypeBank, task_index: int,
                    split_dict: dict, catalog_hash: str, extra=None) -> None:
    payload = checkpoint_to_dict(params, bank, task_index, split_dict, catalog_hash, extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path):
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
