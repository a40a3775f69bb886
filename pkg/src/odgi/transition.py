"""Stage transition: filter a stage's boxes, keep confident individuals, and
turn the rest into crop regions for the next stage."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Box, clip_boxes, pairwise_iou, rescale_array
from .losses import CellPrediction, StageOutput

GROUP_THRESHOLD = 0.5
MIN_CROP_SIDE = 1e-3


class Decision(enum.IntEnum):
    DISCARD = 0
    EARLY_EXIT = 1
    REFINE = 2


@dataclass(frozen=True)
class TransitionConfig:
    tau_low: float = 0.1
    tau_high: float = 0.9
    tau_nms: float = 0.25
    gamma: int = 3

    def __post_init__(self):
        for name in ("tau_low", "tau_high", "tau_nms"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.tau_low > self.tau_high:
            raise ValueError("tau_low must not exceed tau_high")
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise ValueError(f"gamma must be a positive integer, got {self.gamma}")


#: No filtering at all, as used to feed the next stage during training.
TRAINING_TRANSITION = TransitionConfig(tau_low=0.0, tau_high=1.0, tau_nms=1.0, gamma=10)


@dataclass(frozen=True)
class Ablation:
    """Which parts of the transition are switched off.

    ``kind`` is one of ``"full"``, ``"no_groups"``, ``"fixed_offsets"`` or
    ``"no_offsets"``.
    """

    kind: str = "full"
    fixed_offset: float = 2.0 / 3.0

    KINDS = ("full", "no_groups", "fixed_offsets", "no_offsets")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown ablation {self.kind!r}; expected one of {self.KINDS}")
        if not 0.0 < self.fixed_offset <= 1.0:
            raise ValueError("fixed offset must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "Ablation":
        """Parse ``full``, ``no_groups``, ``no_offsets``, ``fixed_offsets`` or ``fixed_offsets:0.5``."""
        kind, _, value = text.partition(":")
        if value:
            return cls(kind, float(value))
        return cls(kind)

    def __str__(self):
        if self.kind == "fixed_offsets":
            return f"fixed_offsets:{self.fixed_offset:g}"
        return self.kind


@dataclass(frozen=True)
class CropRegion:
    region: Box
    source_confidence: float = 1.0
    source_flag: int = 0

    def __post_init__(self):
        if self.region.w <= 0 or self.region.h <= 0:
            raise ValueError("crop region has zero area")


@dataclass(frozen=True)
class ScoredDetection:
    box: Box
    confidence: float
    stage: int = 1
    image_id: str = field(default="0", compare=False)


def classify(pred: CellPrediction, cfg: TransitionConfig, use_groups: bool = True) -> Decision:
    g = int(use_groups and pred.group >= GROUP_THRESHOLD)
    return Decision(int(classify_grid(np.array(pred.confidence), np.array(g), cfg)))


def classify_grid(confidence, group_flag, cfg: TransitionConfig) -> np.ndarray:
    """Vectorized decisions for arrays of confidences and binary flags."""
    c = np.asarray(confidence, dtype=float)
    g = np.asarray(group_flag).astype(bool)
    out = np.full(np.broadcast_shapes(c.shape, g.shape), Decision.REFINE, dtype=int)
    out[(c > cfg.tau_high) & ~g] = Decision.EARLY_EXIT
    out[c <= cfg.tau_low] = Decision.DISCARD
    return out


def nms_indices(boxes, scores, tau_nms: float, limit: int | None = None) -> list[int]:
    """Greedy non-maximum suppression.

    Candidates are visited by decreasing score, ties in input order. A kept
    box removes every remaining box whose IoU with it exceeds ``tau_nms``.

    Returns:
        Indices of kept boxes in the order they were kept.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if limit is not None and limit <= 0:
        return []
    order = np.argsort(-scores, kind="stable")
    overlaps = pairwise_iou(boxes, boxes) > tau_nms
    alive = np.ones(len(boxes), dtype=bool)
    kept: list[int] = []
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(int(idx))
        if limit is not None and len(kept) >= limit:
            break
        alive &= ~overlaps[idx]
    return kept


def nms(candidates: Sequence[tuple[Box, float]], tau_nms: float, limit: int | None = None):
    if not candidates:
        return []
    boxes = np.array([b.as_array() for b, _ in candidates])
    scores = np.array([c for _, c in candidates])
    return [candidates[k] for k in nms_indices(boxes, scores, tau_nms, limit)]


def _floor_size(boxes: np.ndarray, min_side: float) -> np.ndarray:
    out = boxes.copy()
    size = np.maximum(out[:, 2:], min_side)
    out[:, 2:] = size
    out[:, :2] = np.clip(out[:, :2], size / 2.0, 1.0 - size / 2.0)
    return out


def extract_crops(
    out: StageOutput,
    cfg: TransitionConfig,
    ablation: Ablation = Ablation(),
    stage: int = 1,
    image_id: str = "0",
    min_side: float = MIN_CROP_SIDE,
) -> tuple[list[CropRegion], list[ScoredDetection]]:
    """Split a stage output into crops for refinement and early exits.

    Coordinates stay in the frame of ``out``; callers map them to the image.
    """
    conf = out.confidence.reshape(-1)
    boxes = out.boxes.reshape(-1, 4)
    use_groups = ablation.kind != "no_groups"
    flags = (out.group.reshape(-1) >= GROUP_THRESHOLD) & use_groups
    decisions = classify_grid(conf, flags, cfg)

    exits = [
        ScoredDetection(Box.from_array(b), float(c), stage, image_id)
        for b, c in zip(clip_boxes(boxes[decisions == Decision.EARLY_EXIT]), conf[decisions == Decision.EARLY_EXIT])
    ]

    cand = np.flatnonzero(decisions == Decision.REFINE)
    if len(cand) == 0:
        return [], exits
    kept = cand[nms_indices(boxes[cand], conf[cand], cfg.tau_nms, cfg.gamma)]
    regions = boxes[kept]
    if ablation.kind == "no_offsets":
        pass
    elif ablation.kind == "fixed_offsets":
        regions = rescale_array(regions, np.full((len(kept), 2), ablation.fixed_offset))
    else:
        regions = rescale_array(regions, out.offsets.reshape(-1, 2)[kept])
    regions = _floor_size(clip_boxes(regions), min_side)
    crops = [
        CropRegion(Box.from_array(r), float(conf[k]), int(flags[k]))
        for r, k in zip(regions, kept)
    ]
    return crops, exits


def map_to_parent_array(boxes, crop: Box) -> np.ndarray:
    if crop.w <= 0 or crop.h <= 0:
        raise ValueError("crop has zero area")
    b = np.asarray(boxes, dtype=float)
    x0, y0 = crop.cx - crop.w / 2.0, crop.cy - crop.h / 2.0
    out = np.empty_like(b)
    out[..., 0] = x0 + b[..., 0] * crop.w
    out[..., 1] = y0 + b[..., 1] * crop.h
    out[..., 2] = b[..., 2] * crop.w
    out[..., 3] = b[..., 3] * crop.h
    return out


def map_to_parent(b: Box, crop: Box) -> Box:
    """Express a box given in the frame of ``crop`` in the parent frame."""
    return Box.from_array(map_to_parent_array(b.as_array(), crop))


def to_crop_frame(b: Box, crop: Box) -> Box:
    if crop.w <= 0 or crop.h <= 0:
        raise ValueError("crop has zero area")
    x0, y0 = crop.cx - crop.w / 2.0, crop.cy - crop.h / 2.0
    return Box((b.cx - x0) / crop.w, (b.cy - y0) / crop.h, b.w / crop.w, b.h / crop.h)
