"""Small input-validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def check_binary_mask(mask, name="mask") -> np.ndarray:
    """Coerce to a 1-D boolean array; reject anything not 0/1-valued."""
    arr = np.asarray(mask)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.dtype != np.bool_:
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError(f"{name} must be binary (0/1 entries)")
        arr = arr.astype(bool)
    return arr


def check_heatmap(heatmap, name="heatmap") -> np.ndarray:
    """Coerce to a 1-D float array with all entries inside [0, 1]."""
    arr = np.asarray(heatmap, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} entries must lie in [0, 1]")
    return arr


def check_prob_dist(p, name="distribution", atol=1e-9) -> np.ndarray:
    """Validate a probability vector: nonnegative, sums to 1 within atol."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name} must be a nonempty 1-D vector")
    if arr.min() < -atol:
        raise ValidationError(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > atol:
        raise ValidationError(f"{name} must sum to 1 (got {arr.sum()!r})")
    return arr


def check_same_length(a, b, name_a="a", name_b="b"):
    if len(a) != len(b):
        raise ValidationError(
            f"length mismatch: {name_a} has {len(a)} entries, {name_b} has {len(b)}"
        )


def check_finite(arr, name="array") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def rng_from(seed, *stream) -> np.random.Generator:
    """Deterministic generator for (seed, *stream); streams never collide."""
    key = tuple(int(s) if isinstance(s, (int, np.integer)) else _text_key(s) for s in stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=_flatten(key))))


def _text_key(s):
    return tuple(s.encode("utf-8"))


def _flatten(key):
    out = []
    for k in key:
        if isinstance(k, tuple):
            out.extend(int(x) for x in k)
        else:
            out.append(int(k))
    return tuple(out)
