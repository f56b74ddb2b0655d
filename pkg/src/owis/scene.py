"""Scene/instance data model, mask arithmetic, and JSON serialization.

A scene is a voxelized point cloud: N voxels with integer grid coordinates
and normalized RGB color, plus ground-truth instances given as binary masks
over the voxel array. Label conventions: 0 is the unknown class, positive
integers are semantic classes, and IGNORE_LABEL marks instances excluded
from supervision.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .validation import check_binary_mask, check_heatmap

UNKNOWN_LABEL = 0
IGNORE_LABEL = -1


def mask_iou(a, b) -> float:
    """Intersection over union of two equal-length binary masks.

    Defined as 0 when the union is empty, so empty predictions never match.
    """
    a = check_binary_mask(a, "a")
    b = check_binary_mask(b, "b")
    if a.shape != b.shape:
        raise ValidationError(f"mask length mismatch: {a.shape[0]} vs {b.shape[0]}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(a & b) / union)


def binarize(heatmap) -> np.ndarray:
    """Threshold a [0,1] heatmap at 0.5; strictly greater counts as foreground."""
    arr = check_heatmap(heatmap)
    return arr > 0.5


@dataclass(frozen=True)
class Instance:
    """One annotated object: a nonempty binary mask over scene voxels + label."""

    mask: np.ndarray
    label: int

    def __post_init__(self):
        mask = check_binary_mask(self.mask, "instance mask").copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "label", int(self.label))
        if not mask.any():
            raise ValidationError("instance mask must be nonempty")
        if self.label < 0 and self.label != IGNORE_LABEL:
            raise ValidationError(f"label must be >= 0 or IGNORE, got {self.label}")

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.mask))

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True)
class Scene:
    """Immutable voxel scene with ground-truth instances.

    ``coords`` is (N, 3) int, ``colors`` is (N, 3) float in [0,1]. Every
    instance mask has length N and no voxel belongs to two instances.
    ``scene_type`` is an optional tag used by region-based splits.
    """

    id: str
    coords: np.ndarray
    colors: np.ndarray
    instances: tuple = ()
    scene_type: str | None = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.int64)
        colors = np.array(self.colors, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValidationError("coords must have shape (N, 3)")
        if colors.shape != coords.shape:
            raise ValidationError("colors must have shape (N, 3) matching coords")
        if colors.size and (colors.min() < 0.0 or colors.max() > 1.0):
            raise ValidationError("colors must lie in [0, 1]")
        n = coords.shape[0]
        if len(np.unique(coords, axis=0)) != n:
            raise ValidationError("voxel coordinates must be unique within a scene")
        coords.setflags(write=False)
        colors.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "instances", tuple(self.instances))
        claimed = np.zeros(n, dtype=bool)
        for inst in self.instances:
            if not isinstance(inst, Instance):
                raise ValidationError("instances must be Instance objects")
            if inst.mask.shape[0] != n:
                raise ValidationError(
                    f"instance mask length {inst.mask.shape[0]} != voxel count {n}"
                )
            if (claimed & inst.mask).any():
                raise ValidationError("a voxel belongs to more than one instance")
            claimed |= inst.mask

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    def with_instances(self, instances) -> "Scene":
        return Scene(self.id, self.coords, self.colors, tuple(instances), self.scene_type)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and self.scene_type == other.scene_type
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.colors, other.colors)
            and self.instances == other.instances
        )


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class list with instance counts; ids are contiguous from 1."""

    names: tuple
    counts: tuple = ()

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(set(names)) != len(names):
            raise ValidationError("class names must be unique")
        counts = tuple(int(c) for c in self.counts) if self.counts else (0,) * len(names)
        if len(counts) != len(names):
            raise ValidationError("counts must align with names")
        if any(c < 0 for c in counts):
            raise ValidationError("instance counts must be nonnegative")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return len(self.names)

    @property
    def ids(self) -> tuple:
        return tuple(range(1, len(self.names) + 1))

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise ValidationError(f"unknown class name: {name!r}") from None

    def name_of(self, class_id: int) -> str:
        if not 1 <= class_id <= len(self.names):
            raise ValidationError(f"class id {class_id} out of range")
        return self.names[class_id - 1]

    def count_of(self, class_id: int) -> int:
        if not 1 <= class_id <= len(self.names):
            raise ValidationError(f"class id {class_id} out of range")
        return self.counts[class_id - 1]

    def with_counts(self, counts) -> "ClassCatalog":
        return ClassCatalog(self.names, tuple(counts))


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    voxels = [
        [int(x), int(y), int(z), float(r), float(g), float(b)]
        for (x, y, z), (r, g, b) in zip(scene.coords, scene.colors)
    ]
    instances = [
        {"mask_indices": np.flatnonzero(inst.mask).tolist(), "label": int(inst.label)}
        for inst in scene.instances
    ]
    out = {"id": scene.id, "voxels": voxels, "instances": instances}
    if scene.scene_type is not None:
        out["scene_type"] = scene.scene_type
    return out


def scene_from_dict(data: dict) -> Scene:
    for key in ("id", "voxels", "instances"):
        if key not in data:
            raise ValidationError(f"scene object missing required key {key!r}")
    voxels = np.asarray(data["voxels"], dtype=np.float64)
    if voxels.ndim != 2 or voxels.shape[1] != 6:
        raise ValidationError("voxels must be an array of [x,y,z,r,g,b] rows")
    n = voxels.shape[0]
    coords = voxels[:, :3]
    if n and not np.array_equal(coords, np.round(coords)):
        raise ValidationError("voxel grid coordinates must be integers")
    instances = []
    for entry in data["instances"]:
        idx = np.asarray(entry["mask_indices"], dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValidationError("mask index out of range for voxel count")
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        if idx.size != int(mask.sum()):
            raise ValidationError("mask indices must be distinct")
        instances.append(Instance(mask=mask, label=int(entry["label"])))
    return Scene(
        id=str(data["id"]),
        coords=coords.astype(np.int64),
        colors=voxels[:, 3:],
        instances=tuple(instances),
        scene_type=data.get("scene_type"),
    )


def write_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), sort_keys=True) + "\n")


def read_scene(path) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return scene_from_dict(data)


def catalog_to_dict(catalog: ClassCatalog) -> dict:
    return {
        "classes": [
            {"id": i, "name": name, "instance_count": count}
            for i, (name, count) in enumerate(zip(catalog.names, catalog.counts), start=1)
        ]
    }


def catalog_from_dict(data: dict) -> ClassCatalog:
    if "classes" not in data:
        raise ValidationError("catalog object missing required key 'classes'")
    entries = sorted(data["classes"], key=lambda e: int(e["id"]))
    for expect, entry in enumerate(entries, start=1):
        if int(entry["id"]) != expect:
            raise ValidationError("catalog ids must be contiguous from 1")
    return ClassCatalog(
        names=tuple(e["name"] for e in entries),
        counts=tuple(int(e.get("instance_count", 0)) for e in entries),
    )


def write_catalog(catalog: ClassCatalog, path) -> None:
    Path(path).write_text(json.dumps(catalog_to_dict(catalog), sort_keys=True) + "\n")


def read_catalog(path) -> ClassCatalog:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return catalog_from_dict(data)


def catalog_hash(catalog: ClassCatalog) -> str:
    """Stable content hash of a catalog, used to pin checkpoints to data."""
    payload = json.dumps(catalog_to_dict(catalog), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def write_dataset(scenes, catalog: ClassCatalog, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_catalog(catalog, out / "catalog.json")
    for scene in scenes:
        write_scene(scene, out / f"{scene.id}.json")


def read_dataset(data_dir):
    """Load (scenes sorted by id, catalog) from a dataset directory."""
    data_dir = Path(data_dir)
    cat_path = data_dir / "catalog.json"
    if not cat_path.exists():
        raise ValidationError(f"no catalog.json in {data_dir}")
    catalog = read_catalog(cat_path)
    scenes = [
        read_scene(p) for p in sorted(data_dir.glob("*.json")) if p.name != "catalog.json"
    ]
    return scenes, catalog
