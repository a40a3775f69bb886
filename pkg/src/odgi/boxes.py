"""Normalized bounding-box algebra and grid parameterization.

Boxes are stored center-size, ``(cx, cy, w, h)``, in fractions of the image
width and height. Corner form is computed on demand. Array helpers accept any
``(..., 4)`` array so the same code serves single boxes and whole grids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

#: Lower clamp applied to offsets before dividing by them.
OFFSET_EPS = 1e-3


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @classmethod
    def from_array(cls, arr) -> "Box":
        cx, cy, w, h = (float(v) for v in arr)
        return cls(cx, cy, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return float(box_area(self.as_array()))

    def contains(self, other: "Box", tol: float = 1e-12) -> bool:
        """Whether ``other`` lies inside this box (unclipped extents)."""
        ax0, ay0, ax1, ay1 = self.corners
        bx0, by0, bx1, by1 = other.corners
        return (
            ax0 <= bx0 + tol and ay0 <= by0 + tol and ax1 >= bx1 - tol and ay1 >= by1 - tol
        )

    def clip(self) -> "Box":
        return Box.from_array(clip_boxes(self.as_array()))

    def dilate(self, margin: float) -> "Box":
        return Box(self.cx, self.cy, self.w + 2 * margin, self.h + 2 * margin)


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_box(self, i: int, j: int) -> Box:
        return Box((j + 0.5) / self.cols, (i + 0.5) / self.rows, 1.0 / self.cols, 1.0 / self.rows)

    def cell_corners(self) -> np.ndarray:
        """Corner coordinates of every cell, shape ``(rows, cols, 4)``."""
        i, j = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return np.stack(
            [j / self.cols, i / self.rows, (j + 1) / self.cols, (i + 1) / self.rows], axis=-1
        ).astype(float)


@dataclass(frozen=True)
class CellIndex:
    i: int
    j: int

    def check(self, grid: GridSpec) -> "CellIndex":
        if not (0 <= self.i < grid.rows and 0 <= self.j < grid.cols):
            raise IndexError(f"cell ({self.i}, {self.j}) outside {grid.rows}x{grid.cols} grid")
        return self


class _Diagnostics:
    """Process-wide counters for numerical clamps."""

    def __init__(self):
        self.offset_clamps = 0

    def reset(self):
        self.offset_clamps = 0


diagnostics = _Diagnostics()


# -- array helpers -----------------------------------------------------------


def to_corners(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=float)
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=float)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2.0, c[..., 2:] - c[..., :2]], axis=-1)


def clip_boxes(boxes) -> np.ndarray:
    """Intersect boxes with the unit square. Empty results get zero size."""
    c = np.clip(to_corners(boxes), 0.0, 1.0)
    c[..., 2:] = np.maximum(c[..., 2:], c[..., :2])
    return from_corners(c)


def box_area(boxes) -> np.ndarray:
    """Area of the part of each box inside ``[0, 1]^2``."""
    c = np.clip(to_corners(boxes), 0.0, 1.0)
    return np.maximum(c[..., 2] - c[..., 0], 0.0) * np.maximum(c[..., 3] - c[..., 1], 0.0)


def intersection_area(a, b) -> np.ndarray:
    ca = np.clip(to_corners(a), 0.0, 1.0)
    cb = np.clip(to_corners(b), 0.0, 1.0)
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    return np.maximum(iw, 0.0) * np.maximum(ih, 0.0)


def iou_array(a, b) -> np.ndarray:
    """Elementwise IoU with numpy broadcasting over the leading axes.

    The denominator is the area of the set union. Pairs whose union has zero
    area (two degenerate boxes) get IoU 0.
    """
    inter = intersection_area(a, b)
    union = box_area(a) + box_area(b) - inter
    out = np.zeros(np.shape(union))
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    return iou_array(a[:, None, :], b[None, :, :])


# -- scalar operations -------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    return float(iou_array(a.as_array(), b.as_array()))


def enclosing_union(boxes: Iterable[Box]) -> Box:
    """Smallest axis-aligned box containing every input box."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("empty union")
    c = to_corners(np.array([b.as_array() for b in boxes]))
    return Box.from_corners(c[:, 0].min(), c[:, 1].min(), c[:, 2].max(), c[:, 3].max())


def resolution_to_grid(resolution_px: int) -> GridSpec:
    """Output grid of a fully-convolutional stage: one cell per 32 pixels."""
    if int(resolution_px) != resolution_px or resolution_px <= 0 or resolution_px % 32:
        raise ValueError(f"unsupported resolution: {resolution_px}")
    n = int(resolution_px) // 32
    return GridSpec(n, n)


def encode_cell_relative(b: Box, cell: CellIndex, grid: GridSpec) -> tuple[float, float, float, float]:
    return (b.cx * grid.cols - cell.j, b.cy * grid.rows - cell.i, b.w, b.h)


def decode_cell_relative(t, cell: CellIndex, grid: GridSpec) -> Box:
    tx, ty, tw, th = t
    return Box((tx + cell.j) / grid.cols, (ty + cell.i) / grid.rows, tw, th)


def decode_grid(raw, grid: GridSpec) -> np.ndarray:
    """Vectorized decode of ``(rows, cols, 4)`` cell-relative coordinates."""
    raw = np.asarray(raw, dtype=float)
    i, j = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    out = raw.copy()
    out[..., 0] = (raw[..., 0] + j) / grid.cols
    out[..., 1] = (raw[..., 1] + i) / grid.rows
    return out


def encode_grid(boxes, grid: GridSpec) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    i, j = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    out = boxes.copy()
    out[..., 0] = boxes[..., 0] * grid.cols - j
    out[..., 1] = boxes[..., 1] * grid.rows - i
    return out


def clamp_offsets(offsets) -> np.ndarray:
    o = np.asarray(offsets, dtype=float)
    low = o <= OFFSET_EPS
    if np.any(low):
        diagnostics.offset_clamps += int(np.count_nonzero(low))
        o = np.where(low, OFFSET_EPS, o)
    return o


def rescale_by_offsets(b: Box, o_w: float, o_h: float) -> Box:
    """Enlarge ``b`` around its center by ``1/o_w`` and ``1/o_h``."""
    o_w, o_h = clamp_offsets([o_w, o_h])
    return Box(b.cx, b.cy, b.w / o_w, b.h / o_h)


def rescale_array(boxes, offsets) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    o = clamp_offsets(offsets)
    out = boxes.copy()
    out[..., 2:] = boxes[..., 2:] / o
    return out
