"""Open-world task splits: frequency-based, region-based, random, and bundled.

The bundled splits ship the published ScanNet200 class-to-task assignments
as package data; they are authoritative and never regenerated. The catalog
order for bundled splits follows split A (task 1, then 2, then 3), which
gives ids 1..198.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from importlib import resources
from itertools import permutations
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .scene import ClassCatalog
from .validation import rng_from

BUNDLED_NAMES = ("A", "B", "C")


@dataclass(frozen=True)
class TaskSplit:
    """Ordered partition of catalog class ids into tasks."""

    tasks: tuple  # tuple of frozensets of class ids
    provenance: str

    def __post_init__(self):
        tasks = tuple(frozenset(int(c) for c in t) for t in self.tasks)
        object.__setattr__(self, "tasks", tasks)
        seen = set()
        for t in tasks:
            if seen & t:
                raise ValidationError("task class sets must be pairwise disjoint")
            seen |= t

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def all_classes(self) -> frozenset:
        out = frozenset()
        for t in self.tasks:
            out |= t
        return out

    def known_through(self, task_index: int) -> frozenset:
        """Classes known at 1-based task ``task_index`` (cumulative union)."""
        if not 1 <= task_index <= self.n_tasks:
            raise ValidationError(f"task index {task_index} out of range")
        out = frozenset()
        for t in self.tasks[:task_index]:
            out |= t
        return out

    def validate_against(self, catalog: ClassCatalog):
        if self.all_classes != set(catalog.ids):
            raise ValidationError("split does not cover the catalog classes exactly")


@dataclass(frozen=True)
class SceneTypeMatrix:
    """Scene types, their class support, and pairwise set-IoU similarity."""

    types: tuple
    class_sets: tuple  # tuple of frozensets, aligned with types
    similarity: np.ndarray
    class_counts: tuple = ()  # optional per-type {class_id: count} dicts

    def __post_init__(self):
        sim = np.asarray(self.similarity, dtype=np.float64)
        k = len(self.types)
        if sim.shape != (k, k):
            raise ValidationError("similarity must be square over the types")
        if not np.allclose(sim, sim.T):
            raise ValidationError("similarity must be symmetric")
        if k and not np.allclose(np.diag(sim), 1.0):
            raise ValidationError("similarity diagonal must be 1")
        if sim.size and (sim.min() < 0 or sim.max() > 1 + 1e-12):
            raise ValidationError("similarity entries must lie in [0, 1]")
        sim.setflags(write=False)
        object.__setattr__(self, "similarity", sim)
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "class_sets", tuple(frozenset(s) for s in self.class_sets))
        counts = self.class_counts or tuple({c: 1 for c in s} for s in self.class_sets)
        object.__setattr__(self, "class_counts", tuple(dict(c) for c in counts))


def _check_sizes(sizes, n_classes):
    sizes = tuple(int(s) for s in sizes)
    if any(s < 0 for s in sizes):
        raise ValidationError("target sizes must be nonnegative")
    if sum(sizes) != n_classes:
        raise ValidationError(
            f"target sizes sum to {sum(sizes)} but catalog has {n_classes} classes"
        )
    return sizes


def split_frequency(catalog: ClassCatalog, sizes) -> TaskSplit:
    """Partition classes by descending instance count into contiguous tasks.

    Ties break by ascending class id, so the result is invariant to the
    catalog's input ordering.
    """
    sizes = _check_sizes(sizes, len(catalog))
    order = sorted(catalog.ids, key=lambda c: (-catalog.count_of(c), c))
    tasks = []
    cursor = 0
    for s in sizes:
        tasks.append(frozenset(order[cursor : cursor + s]))
        cursor += s
    return TaskSplit(tasks=tuple(tasks), provenance="freq")


def scene_type_similarity(class_sets, types=None, class_counts=None) -> SceneTypeMatrix:
    """Pairwise set-IoU similarity between scene types' class sets."""
    class_sets = [frozenset(s) for s in class_sets]
    if any(len(s) == 0 for s in class_sets):
        raise ValidationError("every scene type must have a nonempty class set")
    k = len(class_sets)
    sim = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            inter = len(class_sets[i] & class_sets[j])
            union = len(class_sets[i] | class_sets[j])
            sim[i, j] = sim[j, i] = inter / union
    types = tuple(types) if types is not None else tuple(f"type_{i}" for i in range(k))
    return SceneTypeMatrix(
        types=types,
        class_sets=tuple(class_sets),
        similarity=sim,
        class_counts=tuple(class_counts) if class_counts else (),
    )


def scene_type_matrix_from_dataset(scenes) -> SceneTypeMatrix:
    """Build the type/class co-occurrence structure from tagged scenes."""
    counts = {}
    for scene in scenes:
        if scene.scene_type is None:
            raise ValidationError(f"scene {scene.id} has no scene_type tag")
        per_type = counts.setdefault(scene.scene_type, {})
        for inst in scene.instances:
            per_type[inst.label] = per_type.get(inst.label, 0) + 1
    if not counts:
        raise ValidationError("no scenes to derive scene types from")
    types = tuple(sorted(counts))
    class_sets = tuple(frozenset(counts[t]) for t in types)
    return scene_type_similarity(class_sets, types=types, class_counts=tuple(counts[t] for t in types))


def predominant_types(matrix: SceneTypeMatrix) -> dict:
    """Class id -> index of the scene type where it occurs most often."""
    out = {}
    for idx, per_type in enumerate(matrix.class_counts):
        for class_id, count in per_type.items():
            best = out.get(class_id)
            if best is None or count > best[0] or (count == best[0] and idx < best[1]):
                out[class_id] = (count, idx)
    return {c: idx for c, (count, idx) in out.items()}


def split_region(matrix: SceneTypeMatrix, sizes, catalog: ClassCatalog | None = None) -> TaskSplit:
    """Greedy agglomeration of scene types into 3 groups, then class-to-task
    assignment by each class's predominant scene type.

    Merging always joins the pair of clusters with the highest average
    inter-cluster similarity; merges that would push a cluster's class count
    past the largest target (plus slack) are deferred while alternatives
    exist. Deterministic given inputs.
    """
    n_groups = len(sizes)
    home = predominant_types(matrix)
    all_classes = set(home)
    if catalog is not None:
        missing = set(catalog.ids) - all_classes
        if missing:
            warnings.warn(f"{len(missing)} classes occur in no scene type; appended to last task")
        all_classes |= missing
    sizes = _check_sizes(sizes, len(all_classes))
    k = len(matrix.types)
    if k < n_groups:
        raise ValidationError(f"need at least {n_groups} scene types, got {k}")

    type_weight = [sum(1 for c, t in home.items() if t == i) for i in range(k)]
    clusters = [[i] for i in range(k)]
    cap = max(sizes) + max(1, int(0.25 * max(sizes)))

    def linkage(a, b):
        return float(np.mean([matrix.similarity[i, j] for i in a for j in b]))

    while len(clusters) > n_groups:
        candidates = []
        for ai in range(len(clusters)):
            for bi in range(ai + 1, len(clusters)):
                w = sum(type_weight[t] for t in clusters[ai] + clusters[bi])
                candidates.append((linkage(clusters[ai], clusters[bi]), -ai, -bi, ai, bi, w))
        feasible = [c for c in candidates if c[5] <= cap]
        pool = feasible if feasible else candidates
        _, _, _, ai, bi, _ = max(pool)
        clusters[ai] = clusters[ai] + clusters[bi]
        del clusters[bi]

    # Map clusters to task slots: the permutation that best matches targets.
    weights = [sum(type_weight[t] for t in cl) for cl in clusters]
    best_perm = None
    best_dev = None
    for perm in permutations(range(n_groups)):
        dev = sum(abs(weights[p] - sizes[slot]) for slot, p in enumerate(perm))
        if best_dev is None or dev < best_dev or (dev == best_dev and perm < best_perm):
            best_dev, best_perm = dev, perm
    ordered = [clusters[p] for p in best_perm]
    if best_dev > 0:
        warnings.warn(
            f"region split task sizes {weights} deviate from targets {tuple(sizes)}; best effort"
        )

    type_to_task = {}
    for task_idx, members in enumerate(ordered):
        for t in members:
            type_to_task[t] = task_idx
    tasks = [set() for _ in range(n_groups)]
    for class_id in sorted(all_classes):
        t = home.get(class_id)
        tasks[type_to_task[t] if t is not None else n_groups - 1].add(class_id)
    return TaskSplit(tasks=tuple(frozenset(t) for t in tasks), provenance="region")


def split_random(catalog: ClassCatalog, per_task_size: int, seed: int, n_tasks: int = 3) -> TaskSplit:
    """Seeded shuffle then consecutive same-size blocks."""
    per_task_size = int(per_task_size)
    if per_task_size < 1:
        raise ValidationError("per-task size must be positive")
    if n_tasks * per_task_size != len(catalog):
        raise ValidationError(
            f"{n_tasks} tasks x {per_task_size} classes must cover the catalog "
            f"({len(catalog)} classes) exactly"
        )
    ids = np.array(catalog.ids)
    rng_from(seed).shuffle(ids)
    tasks = tuple(
        frozenset(ids[i * per_task_size : (i + 1) * per_task_size].tolist())
        for i in range(n_tasks)
    )
    return TaskSplit(tasks=tasks, provenance="random")


# ---------------------------------------------------------------------------
# bundled ScanNet200 splits
# ---------------------------------------------------------------------------

def _bundled_data() -> dict:
    payload = resources.files("owis.data").joinpath("scannet200_splits.json").read_text()
    return json.loads(payload)


def scannet200_catalog() -> ClassCatalog:
    """The 198-class catalog underlying the bundled splits."""
    return ClassCatalog(names=tuple(_bundled_data()["catalog"]))


def load_bundled(name: str) -> TaskSplit:
    """Load bundled split A, B, or C resolved against the bundled catalog."""
    if name not in BUNDLED_NAMES:
        raise ValidationError(f"unknown bundled split {name!r}; expected one of {BUNDLED_NAMES}")
    data = _bundled_data()
    catalog = ClassCatalog(names=tuple(data["catalog"]))
    tasks = tuple(
        frozenset(catalog.id_of(n) for n in task_names) for task_names in data["splits"][name]
    )
    split = TaskSplit(tasks=tasks, provenance=f"bundled-{name}")
    split.validate_against(catalog)
    return split


# ---------------------------------------------------------------------------
# split file IO
# ---------------------------------------------------------------------------

def split_to_dict(split: TaskSplit) -> dict:
    return {"tasks": [sorted(t) for t in split.tasks], "provenance": split.provenance}


def split_from_dict(data: dict) -> TaskSplit:
    if "tasks" not in data:
        raise ValidationError("split object missing required key 'tasks'")
    return TaskSplit(
        tasks=tuple(frozenset(t) for t in data["tasks"]),
        provenance=str(data.get("provenance", "unknown")),
    )


def write_split(split: TaskSplit, path) -> None:
    Path(path).write_text(json.dumps(split_to_dict(split), sort_keys=True) + "\n")


def read_split(path) -> TaskSplit:
    return split_from_dict(json.loads(Path(path).read_text()))
