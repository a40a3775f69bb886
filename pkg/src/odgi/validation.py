"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from .boxes import resolution_to_grid
from .grouping import GroundTruthScene


def check_resolutions(resolutions) -> tuple[int, ...]:
    """Validate a stage resolution list such as ``(512, 256)``."""
    if isinstance(resolutions, (int, np.integer)):
        resolutions = (int(resolutions),)
    out = tuple(int(r) for r in resolutions)
    if not out:
        raise ValueError("at least one stage resolution is required")
    for r in out:
        resolution_to_grid(r)
    return out


def parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc


def parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from exc


def check_probability(value, name: str, closed: bool = True) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number")
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        raise ValueError(f"{name} must lie in {'[0, 1]' if closed else '(0, 1)'}, got {value}")
    return float(value)


def check_scenes(scenes) -> list[GroundTruthScene]:
    """Accept scenes or ``(N, 4)`` box arrays; ids default to the list index."""
    out = []
    for k, s in enumerate(scenes):
        if isinstance(s, GroundTruthScene):
            out.append(s)
        else:
            arr = np.asarray(s, dtype=float)
            if arr.size and (arr.ndim != 2 or arr.shape[1] != 4):
                raise ValueError(f"scene {k}: expected an (N, 4) box array, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"scene {k}: non-finite box coordinates")
            out.append(GroundTruthScene.from_array(arr, f"{k:06d}"))
    ids = [s.image_id for s in out]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    return out


def check_images(images, n: int | None = None) -> list[np.ndarray] | None:
    """Square 2-D images, or ``None`` for pixel-free detectors."""
    if images is None:
        return None
    out = []
    for k, im in enumerate(images):
        arr = np.asarray(im)
        if arr.ndim != 2:
            raise ValueError(f"image {k}: expected a 2-D grayscale array, got shape {arr.shape}")
        out.append(arr)
    if n is not None and len(out) != n:
        raise ValueError(f"{len(out)} images given for {n} scenes")
    return out


def check_same_length(*seqs: Sequence, names: Sequence[str] = ()) -> int:
    lengths = {len(s) for s in seqs if s is not None}
    if len(lengths) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"{label} have different lengths: {sorted(lengths)}")
    return lengths.pop() if lengths else 0
