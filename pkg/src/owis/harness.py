"""Experiment driver: dataset generation, the three-task protocol with
ablation switches, and a reproduction manifest.

A protocol run is deterministic per seed: seeds for data, shuffling, and
exemplar selection all derive from the config seed, reports contain no
timestamps, and the manifest records git-style content hashes of every
artifact plus every default the method leaves open, so two runs of the
same config produce byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .estimator import OpenWorldSegmenter
from .metrics import Detection, EvalConfig, EvalReport, evaluate, report_to_csv
from .model import save_checkpoint
from .oracle import oracle_evaluate
from .scene import catalog_hash, read_dataset, write_dataset
from .splits import TaskSplit, split_frequency, split_to_dict
from .synth import GenConfig, generate
from .tasks import (
    ReplayConfig,
    TaskState,
    relabel_for_eval,
    relabel_for_training,
    replay_scenes,
    select_exemplars,
)

GEN_KEYS = (
    "grid_size", "n_classes", "instances_per_scene", "color_noise",
    "longtail_exponent", "wall_height", "n_scene_types", "placement_snap",
)


def _merge(defaults: dict, override) -> dict:
    out = dict(defaults)
    for k, v in (override or {}).items():
        if k not in defaults:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Resolved protocol configuration; see from_dict for the JSON schema."""

    seed: int = 0
    data: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    autolabel: dict = field(default_factory=dict)
    ow: dict = field(default_factory=dict)
    replay: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    switches: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw or {})
        cfg = cls(
            seed=int(raw.pop("seed", 0)),
            data=_merge(
                {
                    "train_scenes": 160, "val_scenes": 40, "grid_size": 18,
                    "n_classes": 12, "instances_per_scene": [2, 5],
                    "color_noise": 0.08, "longtail_exponent": 1.0,
                    "wall_height": 2, "n_scene_types": 4, "placement_snap": 4,
                },
                raw.pop("data", None),
            ),
            split=_merge({"kind": "freq", "sizes": [6, 3, 3]}, raw.pop("split", None)),
            train=_merge(
                {
                    "epochs": [40, 24, 24], "lr": 0.003, "momentum": 0.9,
                    "optimizer": "adam", "clip_norm": 5.0,
                    "lambda_cls": 2.0, "lambda_bce": 5.0, "lambda_dice": 5.0,
                    "lambda_cont": 0.3, "no_object_weight": 0.1,
                    "pseudo_mask_loss": True, "color_scale": 1.0,
                    "n_queries": 16, "feature_dim": 32, "hidden_dim": 64,
                    "refine_rounds": 2, "finetune_fraction": 0.25,
                },
                raw.pop("train", None),
            ),
            autolabel=_merge(
                {"mode": "ct", "tau": 0.7, "k": 12, "iou_gate": 0.5},
                raw.pop("autolabel", None),
            ),
            ow=_merge(
                {
                    "delta": 4.0, "ema_momentum": 0.9, "store_capacity": 256,
                    "proto_update_every": 10, "union_mode": "noisy_or",
                },
                raw.pop("ow", None),
            ),
            replay=_merge({"exemplars_per_class": 40}, raw.pop("replay", None)),
            eval=_merge(
                {"map_iou_thresholds": [0.5], "wi_confidence": 0.5},
                raw.pop("eval", None),
            ),
            switches=_merge(
                {"ct": True, "pc": True, "finetune": True}, raw.pop("switches", None)
            ),
        )
        if raw:
            raise ConfigError(f"unknown top-level config keys: {sorted(raw)}")
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "data": self.data, "split": self.split,
            "train": self.train, "autolabel": self.autolabel, "ow": self.ow,
            "replay": self.replay, "eval": self.eval, "switches": self.switches,
        }

    # ------------------------------------------------------------------
    def gen_config(self, n_scenes: int, stream: int) -> GenConfig:
        kw = {k: self.data[k] for k in GEN_KEYS}
        kw["instances_per_scene"] = tuple(kw["instances_per_scene"])
        return GenConfig(n_scenes=n_scenes, seed=self.seed * 2 + stream, **kw)

    def epochs_for(self, task_index: int) -> int:
        e = self.train["epochs"]
        if isinstance(e, (list, tuple)):
            return int(e[task_index - 1])
        return int(e)

    def estimator(self, seed_offset: int = 0) -> OpenWorldSegmenter:
        t = self.train
        return OpenWorldSegmenter(
            n_queries=t["n_queries"], feature_dim=t["feature_dim"],
            hidden_dim=t["hidden_dim"], refine_rounds=t["refine_rounds"],
            color_scale=t["color_scale"],
            lr=t["lr"], momentum=t["momentum"], optimizer=t["optimizer"],
            clip_norm=t["clip_norm"],
            lambda_cls=t["lambda_cls"], lambda_bce=t["lambda_bce"],
            lambda_dice=t["lambda_dice"], lambda_cont=t["lambda_cont"],
            no_object_weight=t["no_object_weight"],
            pseudo_mask_loss=t["pseudo_mask_loss"],
            enable_autolabel=True,
            autolabel_mode=self.autolabel["mode"] if self.switches["ct"] else "topk",
            autolabel_tau=self.autolabel["tau"], autolabel_k=self.autolabel["k"],
            autolabel_iou_gate=self.autolabel["iou_gate"],
            delta=self.ow["delta"], ema_momentum=self.ow["ema_momentum"],
            store_capacity=self.ow["store_capacity"],
            proto_update_every=self.ow["proto_update_every"],
            union_mode=self.ow["union_mode"], use_pc=self.switches["pc"],
            seed=self.seed + seed_offset,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            map_iou_thresholds=tuple(self.eval["map_iou_thresholds"]),
            wi_confidence=self.eval["wi_confidence"],
        )


def git_blob_hash(payload: bytes) -> str:
    """sha1 of the git blob encoding of ``payload``."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _hash_file(path: Path) -> str:
    return git_blob_hash(path.read_bytes())


def build_split(cfg: ExperimentConfig, catalog) -> TaskSplit:
    kind = cfg.split["kind"]
    if kind == "freq":
        return split_frequency(catalog, cfg.split["sizes"])
    raise ConfigError(f"protocol split kind {kind!r} not supported; use 'freq'")


def run_ablation_suite(cfg: ExperimentConfig):
    """Train the comparisons behind the directional ablation claims once,
    sharing work: one CT and one top-k task-1 model (evaluated with and
    without probability correction), then task 2 from the CT model with and
    without exemplar-replay fine-tuning. Returns a flat metric dict."""
    train_scenes, catalog = generate(cfg.gen_config(cfg.data["train_scenes"], stream=0))
    val_scenes, _ = generate(cfg.gen_config(cfg.data["val_scenes"], stream=1))
    split = build_split(cfg, catalog)
    eval_cfg = cfg.eval_config()

    state1 = TaskState(split=split, task_index=1)
    t1_rel = nonempty([relabel_for_training(s, state1) for s in train_scenes])

    def eval_with(est, state, use_pc):
        return evaluate_checkpointed(est, val_scenes, state, eval_cfg, use_pc)

    out = {}
    est_ct = cfg.estimator()
    est_ct.set_params(autolabel_mode="ct", classes=sorted(state1.current_known))
    est_ct.fit(t1_rel, epochs=cfg.epochs_for(1))
    out["t1_ct_pc"] = eval_with(est_ct, state1, True)
    out["t1_ct_nopc"] = eval_with(est_ct, state1, False)

    est_tk = cfg.estimator()
    est_tk.set_params(autolabel_mode="topk", classes=sorted(state1.current_known))
    est_tk.fit(t1_rel, epochs=cfg.epochs_for(1))
    out["t1_topk_pc"] = eval_with(est_tk, state1, True)
    out["t1_topk_nopc"] = eval_with(est_tk, state1, False)

    # task 2 from the CT model: plain training, then optional replay
    state2 = TaskState(split=split, task_index=2)
    t2_rel = nonempty([relabel_for_training(s, state2) for s in train_scenes])
    est_ct.advance(sorted(state2.current_known))
    est_ct.set_params(warm_start=True)
    est_ct.fit(t2_rel, epochs=cfg.epochs_for(2))
    out["t2_noreplay"] = eval_with(est_ct, state2, cfg.switches["pc"])

    exemplars = select_exemplars(
        train_scenes, state2,
        ReplayConfig(exemplars_per_class=cfg.replay["exemplars_per_class"], seed=cfg.seed),
    )
    state2x = TaskState(split=split, task_index=2, exemplars=exemplars)
    ft = nonempty(
        [relabel_for_training(s, state2x, replay=True) for s in replay_scenes(train_scenes, state2x)]
    )
    ft_epochs = max(1, math.ceil(cfg.train["finetune_fraction"] * cfg.epochs_for(2)))
    est_ct.fit(ft, epochs=ft_epochs)
    out["t2_replay"] = eval_with(est_ct, state2x, cfg.switches["pc"])
    return out


def nonempty(scenes):
    return [s for s in scenes if s.instances]


def run_protocol(cfg: ExperimentConfig, out_dir):
    """Execute the full three-task protocol and emit reports + manifest.

    Task 1 trains from scratch; each later task warm-starts from the
    previous checkpoint after widening the head, then optionally fine-tunes
    on exemplar-replay scenes before evaluation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes, catalog = generate(cfg.gen_config(cfg.data["train_scenes"], stream=0))
    val_scenes, _ = generate(cfg.gen_config(cfg.data["val_scenes"], stream=1))
    write_dataset(train_scenes, catalog, out / "data" / "train")
    write_dataset(val_scenes, catalog, out / "data" / "val")
    cat_hash = catalog_hash(catalog)

    split = build_split(cfg, catalog)
    split_path = out / "split.json"
    split_path.write_text(json.dumps(split_to_dict(split), sort_keys=True) + "\n")

    est = cfg.estimator()
    eval_cfg = cfg.eval_config()
    replay_cfg = ReplayConfig(
        exemplars_per_class=cfg.replay["exemplars_per_class"], seed=cfg.seed
    )
    reports = []
    for t in range(1, split.n_tasks + 1):
        state = TaskState(split=split, task_index=t)
        task_dir = out / f"task{t}"
        task_dir.mkdir(exist_ok=True)

        if t == 1:
            est.set_params(classes=sorted(state.current_known), warm_start=False)
        else:
            est.advance(sorted(state.current_known))
            est.set_params(warm_start=True)
        train_rel = nonempty([relabel_for_training(s, state) for s in train_scenes])
        est.fit(train_rel, epochs=cfg.epochs_for(t))

        if t > 1 and cfg.switches["finetune"]:
            exemplars = select_exemplars(train_scenes, state, replay_cfg)
            state = TaskState(split=split, task_index=t, exemplars=exemplars)
            ft_scenes = nonempty(
                [
                    relabel_for_training(s, state, replay=True)
                    for s in replay_scenes(train_scenes, state)
                ]
            )
            ft_epochs = max(1, math.ceil(cfg.train["finetune_fraction"] * cfg.epochs_for(t)))
            est.fit(ft_scenes, epochs=ft_epochs)

        save_checkpoint(
            task_dir / "checkpoint.json", est.params_, est.bank_, t,
            split_to_dict(split), cat_hash,
            extra={"switches": cfg.switches},
        )
        report = evaluate_checkpointed(est, val_scenes, state, eval_cfg, cfg.switches["pc"])
        report.write(task_dir / "report.json")
        reports.append(report)

    (out / "results.csv").write_text(report_to_csv(reports))
    manifest = {
        "config": cfg.to_dict(),
        "defaults_open_in_source": {
            "autolabel_tau": cfg.autolabel["tau"],
            "autolabel_iou_gate": cfg.autolabel["iou_gate"],
            "margin_delta": cfg.ow["delta"],
            "ema_momentum": cfg.ow["ema_momentum"],
            "store_capacity": cfg.ow["store_capacity"],
            "match_weights": {
                "cls": cfg.train["lambda_cls"],
                "bce": cfg.train["lambda_bce"],
                "dice": cfg.train["lambda_dice"],
            },
            "lambda_cont": cfg.train["lambda_cont"],
            "no_object_weight": cfg.train["no_object_weight"],
            "lr": cfg.train["lr"],
            "momentum": cfg.train["momentum"],
        },
        "artifacts": {
            str(p.relative_to(out)): _hash_file(p)
            for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return reports, manifest


def evaluate_checkpointed(est, val_scenes, state: TaskState, eval_cfg: EvalConfig,
                          use_pc: bool) -> EvalReport:
    est.set_params(use_pc=use_pc)
    val_rel = [relabel_for_eval(s, state) for s in val_scenes]
    detections = est.predict(val_rel)
    return evaluate(
        detections, val_rel,
        prev_classes=state.previously_known, curr_classes=state.current_known,
        cfg=eval_cfg, task_index=state.task_index,
        extra={"pc": bool(use_pc)},
    )


def run_grid(cfg: ExperimentConfig, out_dir):
    """All 2x2x2 ablation switch combinations, each a full protocol run."""
    out = Path(out_dir)
    results = {}
    for ct in (True, False):
        for pc in (True, False):
            for finetune in (True, False):
                name = f"ct{int(ct)}_pc{int(pc)}_ft{int(finetune)}"
                sub = ExperimentConfig.from_dict(
                    {**cfg.to_dict(), "switches": {"ct": ct, "pc": pc, "finetune": finetune}}
                )
                reports, _ = run_protocol(sub, out / name)
                results[name] = reports
    return results


# ---------------------------------------------------------------------------
# metrics oracle over prediction files
# ---------------------------------------------------------------------------

def detections_to_dict(scene_ids, detections_per_scene) -> dict:
    scenes = []
    for sid, dets in zip(scene_ids, detections_per_scene):
        scenes.append(
            {
                "id": sid,
                "detections": [
                    {
                        "mask_indices": np.flatnonzero(d.mask).tolist(),
                        "label": int(d.label),
                        "confidence": float(d.confidence),
                    }
                    for d in dets
                ],
            }
        )
    return {"scenes": scenes}


def detections_from_dict(data: dict, n_voxels_by_id: dict):
    out = {}
    for entry in data.get("scenes", []):
        sid = str(entry["id"])
        if sid not in n_voxels_by_id:
            raise ValidationError(f"predictions reference unknown scene {sid!r}")
        n = n_voxels_by_id[sid]
        dets = []
        for d in entry["detections"]:
            mask = np.zeros(n, dtype=bool)
            idx = np.asarray(d["mask_indices"], dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValidationError(f"prediction mask index out of range in scene {sid!r}")
            mask[idx] = True
            dets.append(Detection(mask=mask, label=int(d["label"]), confidence=float(d["confidence"])))
        out[sid] = dets
    return out


def metrics_oracle(pred_path, data_dir, split: TaskSplit, task_index: int,
                   eval_cfg: EvalConfig | None = None) -> EvalReport:
    """Exhaustive-search evaluation of a predictions file against a dataset."""
    scenes, _catalog = read_dataset(data_dir)
    state = TaskState(split=split, task_index=task_index)
    gt = [relabel_for_eval(s, state) for s in scenes]
    preds = detections_from_dict(
        json.loads(Path(pred_path).read_text()), {s.id: s.n_voxels for s in scenes}
    )
    detections = [preds.get(s.id, []) for s in scenes]
    return oracle_evaluate(
        detections, gt,
        prev_classes=state.previously_known, curr_classes=state.current_known,
        cfg=eval_cfg, task_index=task_index,
    )
