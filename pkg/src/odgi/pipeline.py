"""Run a cascade of detection stages over an image and account for its cost."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .boxes import Box, box_area, clip_boxes, resolution_to_grid
from .grouping import GroundTruthScene
from .losses import StageOutput
from .transition import (
    Ablation,
    ScoredDetection,
    TransitionConfig,
    extract_crops,
    map_to_parent_array,
    nms_indices,
)

FULL_IMAGE = Box(0.5, 0.5, 1.0, 1.0)


class Detector(Protocol):
    """A detection stage.

    Called with the window resampled at the stage resolution (``None`` when
    ``needs_pixels`` is false), the window itself in image coordinates, and
    the ground truth if the caller has it. Returns a :class:`StageOutput` on
    ``resolution_to_grid(resolution_px)`` with boxes in the window frame.
    """

    resolution_px: int
    needs_pixels: bool

    def __call__(self, pixels, window: Box, scene: GroundTruthScene | None) -> StageOutput: ...


@dataclass(frozen=True)
class StageConfig:
    resolution_px: int
    transition: TransitionConfig | None = None

    def __post_init__(self):
        resolution_to_grid(self.resolution_px)


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageConfig, ...]
    final_nms_iou: float = 0.5
    ablation: Ablation = Ablation()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a pipeline needs at least one stage")
        for s in self.stages[:-1]:
            if s.transition is None:
                raise ValueError("every stage but the last needs a transition config")

    @classmethod
    def single_stage(cls, resolution_px: int, **kw) -> "PipelineConfig":
        return cls((StageConfig(resolution_px),), **kw)

    @classmethod
    def two_stage(
        cls,
        res1: int,
        res2: int,
        transition: TransitionConfig | None = None,
        **kw,
    ) -> "PipelineConfig":
        transition = transition or TransitionConfig()
        return cls((StageConfig(res1, transition), StageConfig(res2)), **kw)

    @property
    def resolutions(self) -> list[int]:
        return [s.resolution_px for s in self.stages]

    def with_transition(self, transition: TransitionConfig, stage: int = 0) -> "PipelineConfig":
        stages = list(self.stages)
        stages[stage] = StageConfig(stages[stage].resolution_px, transition)
        return PipelineConfig(tuple(stages), self.final_nms_iou, self.ablation)

    def with_ablation(self, ablation: Ablation) -> "PipelineConfig":
        return PipelineConfig(self.stages, self.final_nms_iou, ablation)


@dataclass
class CostReport:
    max_boxes: int
    pixels: int
    per_stage: list[dict] = field(default_factory=list)

    @property
    def pixels_used(self) -> int:
        return sum(s["pixels"] for s in self.per_stage)

    @property
    def boxes_used(self) -> int:
        return sum(s["boxes"] for s in self.per_stage)

    def to_dict(self) -> dict:
        return {
            "max_boxes": self.max_boxes,
            "pixels": self.pixels,
            "pixels_used": self.pixels_used,
            "boxes_used": self.boxes_used,
            "per_stage": self.per_stage,
        }


def _max_windows(cfg: PipelineConfig) -> list[int]:
    windows = [1]
    for s in cfg.stages[:-1]:
        windows.append(windows[-1] * s.transition.gamma)
    return windows


def box_budget(cfg: PipelineConfig) -> int:
    """Largest number of boxes the cascade can emit before the final NMS."""
    return sum(
        w * resolution_to_grid(s.resolution_px).n_cells for w, s in zip(_max_windows(cfg), cfg.stages)
    )


def pixel_budget(cfg: PipelineConfig) -> int:
    """Total pixels fed to the stages when every crop slot is used."""
    return sum(w * s.resolution_px**2 for w, s in zip(_max_windows(cfg), cfg.stages))


def resample_bilinear(image: np.ndarray, window: Box, size: int) -> np.ndarray:
    """Sample ``window`` of ``image`` on a ``size x size`` grid.

    Output pixel centers are mapped into the window and read with bilinear
    interpolation; samples outside the image clamp to the border. Values are
    returned as floats in ``[0, 1]`` for ``uint8`` input.
    """
    img = np.asarray(image)
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    height, width = img.shape[:2]
    x0, y0 = window.cx - window.w / 2.0, window.cy - window.h / 2.0
    t = (np.arange(size) + 0.5) / size
    px = (x0 + t * window.w) * width - 0.5
    py = (y0 + t * window.h) * height - 0.5

    def weights(p, n):
        p = np.clip(p, 0.0, n - 1.0)
        lo = np.minimum(np.floor(p).astype(int), n - 2) if n > 1 else np.zeros(len(p), dtype=int)
        frac = p - lo if n > 1 else np.zeros(len(p))
        return lo, np.minimum(lo + 1, n - 1), frac

    xl, xh, fx = weights(px, width)
    yl, yh, fy = weights(py, height)
    # convert only the block the window touches; small crops of big images dominate training
    r0, r1, c0, c1 = yl.min(), yh.max() + 1, xl.min(), xh.max() + 1
    src = img[r0:r1, c0:c1].astype(float)
    yl, yh, xl, xh = yl - r0, yh - r0, xl - c0, xh - c0
    # separable: blend rows first, then columns
    rows = src[yl] * (1 - fy)[:, None] + src[yh] * fy[:, None]
    return (rows[:, xl] * (1 - fx) + rows[:, xh] * fx) / scale


def _stage_detections(out: StageOutput, window: Box, stage: int, image_id: str) -> list[ScoredDetection]:
    conf = out.confidence.reshape(-1)
    boxes = out.boxes.reshape(-1, 4)
    keep = (conf > 0) & (box_area(boxes) > 0)
    mapped = clip_boxes(map_to_parent_array(boxes[keep], window))
    return [
        ScoredDetection(Box.from_array(b), float(c), stage, image_id)
        for b, c in zip(mapped, conf[keep])
        if b[2] > 0 and b[3] > 0
    ]


def run(
    image: np.ndarray | None,
    scene: GroundTruthScene | None,
    detectors: Sequence[Detector],
    cfg: PipelineConfig,
    image_id: str | None = None,
) -> tuple[list[ScoredDetection], CostReport]:
    """Run the cascade on one image.

    Stage 1 sees the whole image. Every intermediate stage turns its output
    into early exits and crops; each crop is resampled and fed to the next
    stage. The last stage's boxes and all early exits are mapped to image
    coordinates, pooled, and deduplicated with a final NMS.
    """
    if len(detectors) != len(cfg.stages):
        raise ValueError(f"{len(cfg.stages)} stages configured but {len(detectors)} detectors given")
    if image_id is None:
        image_id = scene.image_id if scene is not None else "0"
    windows = [FULL_IMAGE]
    pooled: list[ScoredDetection] = []
    per_stage = []
    last = len(cfg.stages) - 1
    for s, (stage, detector) in enumerate(zip(cfg.stages, detectors)):
        grid = resolution_to_grid(stage.resolution_px)
        next_windows = []
        for window in windows:
            pixels = None
            if getattr(detector, "needs_pixels", True):
                if image is None:
                    raise ValueError("detector needs pixels but no image was given")
                pixels = resample_bilinear(image, window, stage.resolution_px)
            out = detector(pixels, window, scene)
            if out.grid.shape != grid.shape:
                raise ValueError(
                    f"grid contract violated: stage {s + 1} at {stage.resolution_px}px "
                    f"must output {grid.shape}, got {out.grid.shape}"
                )
            if s == last:
                pooled.extend(_stage_detections(out, window, s + 1, image_id))
                continue
            crops, exits = extract_crops(out, stage.transition, cfg.ablation, s + 1, image_id)
            if exits:
                mapped = clip_boxes(map_to_parent_array(np.array([e.box.as_array() for e in exits]), window))
                pooled.extend(
                    ScoredDetection(Box.from_array(b), e.confidence, s + 1, image_id)
                    for b, e in zip(mapped, exits)
                )
            for crop in crops:
                region = Box.from_array(map_to_parent_array(crop.region.as_array(), window))
                next_windows.append(region)
        per_stage.append(
            {
                "stage": s + 1,
                "resolution_px": stage.resolution_px,
                "grid_cells": grid.n_cells,
                "crops_used": len(windows),
                "boxes": len(windows) * grid.n_cells,
                "pixels": len(windows) * stage.resolution_px**2,
            }
        )
        windows = next_windows
        if not windows:
            break
    detections = final_nms(pooled, cfg.final_nms_iou)
    return detections, CostReport(box_budget(cfg), pixel_budget(cfg), per_stage)


def final_nms(detections: Sequence[ScoredDetection], iou_threshold: float = 0.5) -> list[ScoredDetection]:
    if not detections:
        return []
    boxes = np.array([d.box.as_array() for d in detections])
    scores = np.array([d.confidence for d in detections])
    return [detections[k] for k in nms_indices(boxes, scores, iou_threshold)]


def write_detections_jsonl(path, detections: Sequence[ScoredDetection]):
    with open(path, "w") as fh:
        for d in detections:
            fh.write(json.dumps(detection_record(d)) + "\n")


def detection_record(d: ScoredDetection) -> dict:
    return {
        "image_id": d.image_id,
        "cx": d.box.cx,
        "cy": d.box.cy,
        "w": d.box.w,
        "h": d.box.h,
        "confidence": d.confidence,
        "stage": d.stage,
    }


def read_detections_jsonl(path) -> list[ScoredDetection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            out.append(
                ScoredDetection(
                    Box(r["cx"], r["cy"], r["w"], r["h"]), r["confidence"], r["stage"], str(r["image_id"])
                )
            )
    return out

