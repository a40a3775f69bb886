"""Detection metrics, crop statistics and test-time hyperparameter selection."""

from __future__ import annotations

import csv
import io
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .boxes import Box, box_area, intersection_area, pairwise_iou, resolution_to_grid
from .grouping import GroundTruthScene, assign
from .pipeline import PipelineConfig, box_budget, pixel_budget, resample_bilinear, run, FULL_IMAGE
from .transition import TRAINING_TRANSITION, ScoredDetection, TransitionConfig, extract_crops

#: Threshold ranges of the validation sweep.
SWEEP_TAU_LOW = (0.0, 0.1, 0.2, 0.3, 0.4)
SWEEP_TAU_HIGH = (0.6, 0.7, 0.8, 0.9, 1.0)
SWEEP_TAU_NMS = (0.25, 0.5, 0.75)

SWEEP_COLUMNS = ("tau_low", "tau_high", "tau_nms", "gamma", "map50", "map75", "max_boxes", "pixels")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float


@dataclass(frozen=True)
class CropStats:
    occupancy: float

    @property
    def relevant(self) -> bool:
        return self.occupancy > 0


def _match(dets: Sequence[ScoredDetection], scenes: Sequence[GroundTruthScene], iou_thresh: float):
    gt = {s.image_id: s.array for s in scenes}
    matched = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    order = np.argsort(-np.array([d.confidence for d in dets], dtype=float), kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    for rank, k in enumerate(order):
        d = dets[k]
        boxes = gt.get(d.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        ious = pairwise_iou(d.box.as_array(), boxes)[0]
        ious[matched[d.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            matched[d.image_id][best] = True
            tp[rank] = True
    return tp


def average_precision(
    dets: Sequence[ScoredDetection], scenes: Sequence[GroundTruthScene], iou_thresh: float = 0.5
) -> PRCurve:
    """Single-class AP with all-point interpolation.

    Detections from all images are ranked together by decreasing confidence.
    Each one is matched to the unmatched ground-truth box of its image with
    the highest IoU, provided that IoU reaches ``iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    n_gt = sum(len(s) for s in scenes)
    if not dets:
        ap = 1.0 if n_gt == 0 else 0.0
        return PRCurve(np.zeros(0), np.zeros(0), ap)
    tp = _match(dets, scenes, iou_thresh)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    if n_gt == 0:
        return PRCurve(np.zeros(len(tp)), precision, 0.0)
    recall = ctp / n_gt
    # recall rises by 1/n_gt at each true positive, so the area under the
    # interpolated curve is the mean interpolated precision at those ranks;
    # summing before dividing keeps a perfect ranking at exactly 1
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = float(np.sum(interp[tp]) / n_gt)
    return PRCurve(recall, precision, ap)


def mean_average_precision(dets, scenes, thresholds=(0.5, 0.75)) -> dict[float, float]:
    return {t: average_precision(dets, scenes, t).ap for t in thresholds}


def occupancy_rate(crop, scene: GroundTruthScene) -> float:
    """Sum over ground-truth boxes of the fraction of each box inside ``crop``."""
    region = crop.region if hasattr(crop, "region") else crop
    boxes = scene.array
    if len(boxes) == 0:
        return 0.0
    area = box_area(boxes)
    inter = intersection_area(boxes, region.as_array())
    ratio = np.zeros(len(boxes))
    np.divide(inter, area, out=ratio, where=area > 0)
    return float(ratio.sum())


def crop_stats(crop, scene: GroundTruthScene) -> CropStats:
    return CropStats(occupancy_rate(crop, scene))


def relevant_crop_count(image, scene, detector, resolution_px: int) -> int:
    """Relevant crops produced by one stage in training mode."""
    pixels = resample_bilinear(image, FULL_IMAGE, resolution_px) if getattr(detector, "needs_pixels", True) else None
    out = detector(pixels, FULL_IMAGE, scene)
    crops, _ = extract_crops(out, TRAINING_TRANSITION)
    return sum(crop_stats(c, scene).relevant for c in crops)


def recommend_gamma(scenes, images, detector, resolution_px: int) -> int:
    """Ceiling of the mean number of relevant crops over a validation set."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty validation set")
    images = list(images) if images is not None else [None] * len(scenes)
    total = sum(relevant_crop_count(im, sc, detector, resolution_px) for im, sc in zip(images, scenes))
    return max(1, int(np.ceil(Fraction(total, len(scenes)))))


def dataset_stats(scenes: Iterable[GroundTruthScene]) -> dict[str, float]:
    """Average object size fraction and 16x16 empty-cell ratio."""
    grid = resolution_to_grid(512)
    areas = []
    empty = []
    for scene in scenes:
        if len(scene):
            areas.extend(box_area(scene.array).tolist())
        occ = assign(scene, grid).occupied
        empty.append(1.0 - occ.mean())
    return {
        "avg_object_size_fraction": float(np.mean(areas)) if areas else 0.0,
        "empty_cell_ratio_16": float(np.mean(empty)) if empty else 1.0,
        "avg_objects_per_image": len(areas) / len(empty) if empty else 0.0,
    }


class CachedDetector:
    """Memoizes a deterministic detector on ``(image_id, window)``.

    Valid because sweeps change only the transition between stages, never the
    detectors themselves.
    """

    def __init__(self, detector):
        self.detector = detector
        self.resolution_px = detector.resolution_px
        self.needs_pixels = getattr(detector, "needs_pixels", True)
        self._cache = {}

    def __call__(self, pixels, window: Box, scene):
        key = (scene.image_id if scene is not None else None, window)
        if key not in self._cache:
            self._cache[key] = self.detector(pixels, window, scene)
        return self._cache[key]


def evaluate_pipeline(images, scenes, detectors, cfg: PipelineConfig, thresholds=(0.5, 0.75)):
    """Run the cascade on every image and score the pooled detections.

    Returns:
        ``(maps, detections, reports)`` where ``maps`` maps each IoU threshold
        to AP.
    """
    scenes = list(scenes)
    images = list(images) if images is not None else [None] * len(scenes)
    dets, reports = [], []
    for image, scene in zip(images, scenes):
        d, report = run(image, scene, detectors, cfg)
        dets.extend(d)
        reports.append(report)
    return mean_average_precision(dets, scenes, thresholds), dets, reports


@dataclass
class SweepResult:
    best: TransitionConfig
    best_map50: float
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: r[k] for k in SWEEP_COLUMNS})
        return buf.getvalue()


def hyperparameter_sweep(
    images,
    scenes,
    detectors,
    base: PipelineConfig,
    tau_lows: Sequence[float] = SWEEP_TAU_LOW,
    tau_highs: Sequence[float] = SWEEP_TAU_HIGH,
    tau_nmss: Sequence[float] = SWEEP_TAU_NMS,
    gammas: Sequence[int] = (3,),
) -> SweepResult:
    """Grid search over the first transition's thresholds and crop budget.

    Detectors are reused across configurations. The winner maximizes mAP@0.5;
    ties go to the smaller box budget, then to the earlier grid point.
    """
    scenes = list(scenes)
    images = list(images) if images is not None else None
    cached = [CachedDetector(d) for d in detectors]
    rows = []
    best_key, best_cfg, best_map = None, None, -1.0
    for gamma, lo, hi, nms_t in itertools.product(gammas, tau_lows, tau_highs, tau_nmss):
        if lo > hi:
            continue
        t = TransitionConfig(lo, hi, nms_t, gamma)
        cfg = base.with_transition(t)
        maps, _, _ = evaluate_pipeline(images, scenes, cached, cfg)
        budget = box_budget(cfg)
        rows.append(
            {
                "tau_low": lo,
                "tau_high": hi,
                "tau_nms": nms_t,
                "gamma": gamma,
                "map50": maps[0.5],
                "map75": maps[0.75],
                "max_boxes": budget,
                "pixels": pixel_budget(cfg),
            }
        )
        key = (maps[0.5], -budget)
        if best_key is None or key > best_key:
            best_key, best_cfg, best_map = key, t, maps[0.5]
    if best_cfg is None:
        raise ValueError("empty sweep grid")
    return SweepResult(best_cfg, best_map, rows)


def per_image_counts(dets: Sequence[ScoredDetection]) -> dict[str, int]:
    counts = defaultdict(int)
    for d in dets:
        counts[d.image_id] += 1
    return dict(counts)
