"""Scikit-learn style wrapper around the trainable segmenter.

``OpenWorldSegmenter`` exposes the usual estimator surface (constructor
params mirror attributes, ``fit``/``predict``/``score``, ``get_params``)
so the model composes with sklearn tooling. ``X`` is a list of Scene
objects whose instances are the supervision targets; relabeling for a task
phase is the caller's job (see ``tasks``).
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autolabel import AutoLabelConfig
from .errors import ValidationError
from .metrics import EvalConfig, evaluate
from .model import TrainConfig, detect_scene, init_params, train_task, widen_head
from .prototypes import PrototypeBank, QueryStore
from .scene import UNKNOWN_LABEL


class OpenWorldSegmenter(BaseEstimator):
    """Query-based open-world instance segmenter.

    With ``warm_start=True``, ``fit`` continues from the previous
    parameters (used for later tasks and replay fine-tuning); otherwise it
    reinitializes. ``classes`` pins the known-class head order; when None
    it is inferred from the training scenes' labels.
    """

    def __init__(self, n_queries=20, feature_dim=32, hidden_dim=64, refine_rounds=2,
                 color_scale=1.0, epochs=30, lr=0.01, momentum=0.9, optimizer="sgd",
                 clip_norm=None, lambda_cls=2.0, lambda_bce=5.0, lambda_dice=5.0,
                 lambda_cont=0.2, no_object_weight=1.0, pseudo_mask_loss=True,
                 enable_autolabel=True,
                 autolabel_mode="ct", autolabel_tau=0.7, autolabel_k=5,
                 autolabel_iou_gate=0.5,
                 delta=1.0, ema_momentum=0.9, store_capacity=256,
                 proto_update_every=10, union_mode="noisy_or", use_pc=True,
                 classes=None, seed=0, warm_start=False):
        self.n_queries = n_queries
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.refine_rounds = refine_rounds
        self.color_scale = color_scale
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.lambda_cls = lambda_cls
        self.lambda_bce = lambda_bce
        self.lambda_dice = lambda_dice
        self.lambda_cont = lambda_cont
        self.no_object_weight = no_object_weight
        self.pseudo_mask_loss = pseudo_mask_loss
        self.enable_autolabel = enable_autolabel
        self.autolabel_mode = autolabel_mode
        self.autolabel_tau = autolabel_tau
        self.autolabel_k = autolabel_k
        self.autolabel_iou_gate = autolabel_iou_gate
        self.delta = delta
        self.ema_momentum = ema_momentum
        self.store_capacity = store_capacity
        self.proto_update_every = proto_update_every
        self.union_mode = union_mode
        self.use_pc = use_pc
        self.classes = classes
        self.seed = seed
        self.warm_start = warm_start

    # ------------------------------------------------------------------
    def _train_config(self, epochs=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            lr=self.lr,
            momentum=self.momentum,
            optimizer=self.optimizer,
            weights={"cls": self.lambda_cls, "bce": self.lambda_bce, "dice": self.lambda_dice},
            no_object_weight=self.no_object_weight,
            lambda_cont=self.lambda_cont,
            clip_norm=self.clip_norm,
            pseudo_mask_loss=self.pseudo_mask_loss,
            seed=self.seed,
        )

    def _autolabel_config(self):
        if not self.enable_autolabel:
            return None
        return AutoLabelConfig(
            mode=self.autolabel_mode,
            tau=self.autolabel_tau,
            k=self.autolabel_k,
            iou_gate=self.autolabel_iou_gate,
        )

    def _is_fitted(self) -> bool:
        return hasattr(self, "params_")

    def _check_fitted(self):
        if not self._is_fitted():
            raise NotFittedError("this OpenWorldSegmenter instance is not fitted yet")

    # ------------------------------------------------------------------
    def fit(self, X, y=None, epochs=None):
        """Train on a list of Scenes; supervision comes from their instances."""
        scenes = list(X)
        if self.warm_start and self._is_fitted():
            params = self.params_
            bank = self.bank_
            store = self.store_
            for scene in scenes:
                for inst in scene.instances:
                    if inst.label != UNKNOWN_LABEL:
                        params.head_index(inst.label)  # raises for unseen classes
        else:
            if self.classes is not None:
                class_order = tuple(int(c) for c in self.classes)
            else:
                labels = sorted(
                    {inst.label for s in scenes for inst in s.instances} - {UNKNOWN_LABEL}
                )
                if not labels:
                    raise ValidationError("cannot infer classes from unlabeled scenes")
                class_order = tuple(labels)
            params = init_params(
                class_order,
                feature_dim=self.feature_dim,
                hidden_dim=self.hidden_dim,
                n_queries=self.n_queries,
                refine_rounds=self.refine_rounds,
                color_scale=self.color_scale,
                seed=self.seed,
            )
            bank = PrototypeBank(
                dim=self.feature_dim,
                class_ids=(UNKNOWN_LABEL,) + class_order,
                momentum=self.ema_momentum,
                update_every=self.proto_update_every,
                margin=self.delta,
            )
            store = QueryStore(capacity=self.store_capacity)
        params, log = train_task(
            params, scenes, self._train_config(epochs),
            autolabel_cfg=self._autolabel_config(), bank=bank, store=store,
        )
        self.params_ = params
        self.bank_ = bank
        self.store_ = store
        if self.warm_start and hasattr(self, "log_"):
            self.log_ = self.log_ + log
        else:
            self.log_ = log
        self.classes_ = params.known_class_order
        return self

    def advance(self, new_classes):
        """Widen the head (zero-initialized rows) for the next task's classes."""
        self._check_fitted()
        self.params_ = widen_head(self.params_, tuple(new_classes))
        self.bank_.add_classes(tuple(new_classes))
        self.classes_ = self.params_.known_class_order
        return self

    def predict(self, X):
        """Per-scene detections (mask, label, confidence), best first."""
        self._check_fitted()
        return [
            detect_scene(
                self.params_, scene, bank=self.bank_,
                use_pc=self.use_pc, union_mode=self.union_mode,
            )
            for scene in X
        ]

    def score(self, X, y=None) -> float:
        """mAP at IoU 0.5 over the known classes present in the scenes."""
        self._check_fitted()
        detections = self.predict(X)
        report = evaluate(
            detections, list(X), prev_classes=(), curr_classes=self.classes_,
            cfg=EvalConfig(),
        )
        return float(report.map_all) if report.map_all is not None else 0.0
