"""Per-cell ground truth for grouped detection.

A ground-truth box is assigned to every grid cell it overlaps with positive
area. Each occupied cell regresses the enclosing union of its assigned boxes
and is flagged as a group when more than one box falls into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, GridSpec, box_area, from_corners, intersection_area, to_corners

#: Default margin around targets when computing offset targets.
DEFAULT_DELTA = 0.0025

#: Minimum visible fraction for a box to be kept when restricting to a crop.
MIN_VISIBLE_FRACTION = 0.25


@dataclass(frozen=True)
class GroundTruthScene:
    boxes: tuple[Box, ...] = ()
    image_id: str = "0"
    image_size_px: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([b.as_array() for b in self.boxes])

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def from_array(cls, arr, image_id="0", image_size_px=1024) -> "GroundTruthScene":
        arr = np.asarray(arr, dtype=float).reshape(-1, 4)
        return cls(tuple(Box.from_array(r) for r in arr), str(image_id), int(image_size_px))


@dataclass(frozen=True)
class Assignment:
    grid: GridSpec
    a: np.ndarray  # (rows, cols, N) bool

    @property
    def occupied(self) -> np.ndarray:
        return self.a.any(axis=-1)

    @property
    def counts(self) -> np.ndarray:
        return self.a.sum(axis=-1)


@dataclass(frozen=True)
class CellTarget:
    occupied: bool
    target_box: Box | None
    group_flag: int
    offset_targets: tuple[float, float]


@dataclass
class TargetGrid:
    """Ground truth for every cell of one stage output, stored as arrays."""

    grid: GridSpec
    occupied: np.ndarray  # (rows, cols) bool
    boxes: np.ndarray  # (rows, cols, 4); zeros where empty
    group: np.ndarray  # (rows, cols) in {0, 1}
    offsets: np.ndarray  # (rows, cols, 2); ones where empty
    counts: np.ndarray = field(default=None)

    def cell(self, i: int, j: int) -> CellTarget:
        occ = bool(self.occupied[i, j])
        return CellTarget(
            occupied=occ,
            target_box=Box.from_array(self.boxes[i, j]) if occ else None,
            group_flag=int(self.group[i, j]),
            offset_targets=(float(self.offsets[i, j, 0]), float(self.offsets[i, j, 1])),
        )

    def with_offsets_for(self, pred_boxes, delta: float = DEFAULT_DELTA) -> "TargetGrid":
        """Copy with offset targets recomputed against predicted boxes."""
        off = offset_targets_array(pred_boxes, self.boxes, delta)
        off = np.where(self.occupied[..., None], off, 1.0)
        return TargetGrid(self.grid, self.occupied, self.boxes, self.group, off, self.counts)


def assign(scene: GroundTruthScene, grid: GridSpec) -> Assignment:
    """Indicator of positive-area overlap between every box and every cell."""
    boxes = scene.array
    if len(boxes) == 0:
        return Assignment(grid, np.zeros(grid.shape + (0,), dtype=bool))
    c = np.clip(to_corners(boxes), 0.0, 1.0)
    # scaled to cell units so cell boundaries are integers
    x0, x1 = c[:, 0] * grid.cols, c[:, 2] * grid.cols
    y0, y1 = c[:, 1] * grid.rows, c[:, 3] * grid.rows
    solid = (x1 > x0) & (y1 > y0)
    j = np.arange(grid.cols)[:, None]
    i = np.arange(grid.rows)[:, None]
    in_cols = (x1[None, :] > j) & (x0[None, :] < j + 1)  # (cols, N)
    in_rows = (y1[None, :] > i) & (y0[None, :] < i + 1)  # (rows, N)
    a = in_rows[:, None, :] & in_cols[None, :, :] & solid[None, None, :]
    return Assignment(grid, a)


def build_targets(assignment: Assignment, scene: GroundTruthScene, delta: float = DEFAULT_DELTA) -> TargetGrid:
    """Group targets from an assignment.

    Offset targets are computed as if each cell predicted its own target
    exactly; use :meth:`TargetGrid.with_offsets_for` to refresh them against
    actual predictions.
    """
    grid = assignment.grid
    a = assignment.a
    counts = a.sum(axis=-1)
    occupied = counts > 0
    boxes = np.zeros(grid.shape + (4,))
    if a.shape[-1]:
        c = to_corners(scene.array)
        mask = a[..., None]
        lo = np.where(mask, c[None, None, :, :2], np.inf).min(axis=2)
        hi = np.where(mask, c[None, None, :, 2:], -np.inf).max(axis=2)
        corners = np.where(occupied[..., None], np.concatenate([lo, hi], axis=-1), 0.0)
        boxes = from_corners(corners)
    group = (counts > 1).astype(float)
    offsets = np.where(occupied[..., None], offset_targets_array(boxes, boxes, delta), 1.0)
    return TargetGrid(grid, occupied, boxes, group, offsets, counts)


def scene_targets(scene: GroundTruthScene, grid: GridSpec, delta: float = DEFAULT_DELTA) -> TargetGrid:
    return build_targets(assign(scene, grid), scene, delta)


def offset_targets_array(pred, target, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Offsets that make the rescaled prediction enclose the dilated target.

    For each axis, the required extent is twice the distance from the
    predicted center to the farthest edge of the target dilated by ``delta``.
    The offset is ``min(1, size / required)`` so that dividing by it never
    shrinks the prediction.

    Returns:
        Array of shape ``(..., 2)`` holding ``(o_w, o_h)``.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    center, size = pred[..., :2], pred[..., 2:]
    t_center, t_half = target[..., :2], target[..., 2:] / 2.0
    half_req = np.maximum(
        np.abs(t_center + t_half + delta - center), np.abs(t_center - t_half - delta - center)
    )
    required = 2.0 * half_req
    out = np.ones(np.broadcast_shapes(size.shape, required.shape))
    np.divide(size, required, out=out, where=required > 0)
    return np.minimum(out, 1.0)


def offset_targets(pred: Box, target: Box, delta: float = DEFAULT_DELTA) -> tuple[float, float]:
    o = offset_targets_array(pred.as_array(), target.as_array(), delta)
    return float(o[0]), float(o[1])


def restrict_to_crop(
    scene: GroundTruthScene,
    crop: Box,
    min_visible: float = MIN_VISIBLE_FRACTION,
    image_size_px: int | None = None,
) -> tuple[GroundTruthScene, np.ndarray]:
    """Express ground truth in the frame of ``crop``.

    Boxes are clipped to the crop and renormalized so the crop spans
    ``[0, 1]^2``. Boxes with less than ``min_visible`` of their area inside
    the crop are dropped.

    Returns:
        The crop-frame scene and the visible fraction of every kept box.
    """
    if crop.w <= 0 or crop.h <= 0:
        raise ValueError("crop has zero area")
    boxes = scene.array
    size = image_size_px if image_size_px is not None else scene.image_size_px
    if len(boxes) == 0:
        return GroundTruthScene((), scene.image_id, size), np.zeros(0)
    crop_arr = crop.as_array()
    area = box_area(boxes)
    inter = intersection_area(boxes, crop_arr)
    vis = np.zeros(len(boxes))
    np.divide(inter, area, out=vis, where=area > 0)
    keep = (inter > 0) & (vis >= min_visible)
    c = to_corners(boxes[keep])
    k = to_corners(crop_arr)
    lo = np.maximum(c[:, :2], np.maximum(k[:2], 0.0))
    hi = np.minimum(c[:, 2:], np.minimum(k[2:], 1.0))
    clipped = from_corners(np.concatenate([lo, hi], axis=1))
    local = np.empty_like(clipped)
    local[:, 0] = (clipped[:, 0] - k[0]) / crop.w
    local[:, 1] = (clipped[:, 1] - k[1]) / crop.h
    local[:, 2] = clipped[:, 2] / crop.w
    local[:, 3] = clipped[:, 3] / crop.h
    return GroundTruthScene.from_array(local, scene.image_id, size), vis[keep]
