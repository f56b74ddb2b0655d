"""Task progression: label masking per phase, exemplar replay, and head
widening when a new task's classes arrive.

Masked instances are dropped from the supervision target set rather than
relabeled, which keeps them eligible as pseudo-label material during
training. Evaluation instead relabels future-task instances as unknown.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, StateError, ValidationError
from .model import ModelParams, widen_head
from .scene import Instance, Scene, UNKNOWN_LABEL
from .splits import TaskSplit
from .validation import rng_from


@dataclass(frozen=True)
class TaskState:
    """Where the incremental schedule currently stands (1-based task index)."""

    split: TaskSplit
    task_index: int
    exemplars: dict = field(default_factory=dict)  # scene id -> tuple of instance positions

    def __post_init__(self):
        if not 1 <= self.task_index <= self.split.n_tasks:
            raise ValidationError(
                f"task index {self.task_index} outside 1..{self.split.n_tasks}"
            )
        object.__setattr__(
            self, "exemplars", {k: tuple(v) for k, v in dict(self.exemplars).items()}
        )

    @property
    def previously_known(self) -> frozenset:
        return self.split.known_through(self.task_index - 1) if self.task_index > 1 else frozenset()

    @property
    def current_known(self) -> frozenset:
        return self.split.tasks[self.task_index - 1]

    @property
    def known(self) -> frozenset:
        return self.split.known_through(self.task_index)

    @property
    def future(self) -> frozenset:
        out = frozenset()
        for t in self.split.tasks[self.task_index :]:
            out |= t
        return out


@dataclass(frozen=True)
class ReplayConfig:
    exemplars_per_class: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.exemplars_per_class < 1:
            raise ConfigError("exemplars_per_class must be positive")


def relabel_for_training(scene: Scene, state: TaskState, replay: bool = False) -> Scene:
    """Strip the scene's target set down to the supervised classes.

    Main phase keeps only current-task instances; replay fine-tuning keeps
    previously-known and current classes. Masks are never altered.
    """
    keep = state.current_known if not replay else (state.previously_known | state.current_known)
    return scene.with_instances(
        tuple(inst for inst in scene.instances if inst.label in keep)
    )


def relabel_for_eval(scene: Scene, state: TaskState) -> Scene:
    """Known classes keep their labels; future-task classes become unknown."""
    known = state.known
    out = []
    for inst in scene.instances:
        if inst.label in known:
            out.append(inst)
        else:
            out.append(Instance(mask=inst.mask, label=UNKNOWN_LABEL))
    return scene.with_instances(tuple(out))


def select_exemplars(scenes, state: TaskState, cfg: ReplayConfig) -> dict:
    """Seeded uniform sample of up to the per-class cap of instances for
    every previously-known class; returns scene id -> instance positions."""
    prev = sorted(state.previously_known)
    if not prev:
        raise StateError("no previously-known classes to select exemplars from")
    per_class = {c: [] for c in prev}
    for scene in scenes:
        for pos, inst in enumerate(scene.instances):
            if inst.label in per_class:
                per_class[inst.label].append((scene.id, pos))
    rng = rng_from(cfg.seed, 5)
    chosen = {}
    for c in prev:
        pool = per_class[c]
        if not pool:
            warnings.warn(f"class {c} has no instances; skipped for replay")
            continue
        if len(pool) <= cfg.exemplars_per_class:
            picks = pool
        else:
            idx = rng.choice(len(pool), size=cfg.exemplars_per_class, replace=False)
            picks = [pool[i] for i in sorted(idx)]
        for scene_id, pos in picks:
            chosen.setdefault(scene_id, []).append(pos)
    return {sid: tuple(sorted(ps)) for sid, ps in sorted(chosen.items())}


def replay_scenes(scenes, state: TaskState):
    """The scenes containing this state's exemplars, in id order."""
    wanted = set(state.exemplars)
    return [s for s in scenes if s.id in wanted]


def advance_task(params: ModelParams, state: TaskState):
    """Move to the next task: widen the class head with zero-initialized
    rows for the new classes and carry everything else over."""
    if state.task_index >= state.split.n_tasks:
        raise StateError(f"already at the final task ({state.task_index})")
    new_classes = sorted(state.split.tasks[state.task_index])
    widened = widen_head(params, new_classes)
    return widened, TaskState(split=state.split, task_index=state.task_index + 1)


def exemplars_to_dict(state: TaskState) -> dict:
    return {"task_index": state.task_index, "exemplars": {k: list(v) for k, v in state.exemplars.items()}}


def write_exemplars(state: TaskState, path) -> None:
    Path(path).write_text(json.dumps(exemplars_to_dict(state), sort_keys=True) + "\n")


def read_exemplars(path) -> dict:
    data = json.loads(Path(path).read_text())
    if "exemplars" not in data:
        raise ValidationError("exemplar file missing 'exemplars' key")
    return {str(k): tuple(int(p) for p in v) for k, v in data["exemplars"].items()}
