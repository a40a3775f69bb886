"""Scikit-learn style wrapper around a grouped-detection cascade."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .evaluation import average_precision, mean_average_precision
from .pipeline import PipelineConfig, StageConfig, box_budget, pixel_budget, run
from .synthdata import OracleConfig, oracle_stages
from .training import ToyPredictor, TrainConfig, train_stage, stage_examples, train_two_stage
from .transition import Ablation, TransitionConfig
from .validation import check_images, check_resolutions, check_same_length, check_scenes

DETECTOR_KINDS = ("toy", "perfect", "noisy", "resolution_degraded")


class ODGIDetector(BaseEstimator):
    """Multi-stage detector that may emit groups at its early stages.

    ``X`` is a list of square grayscale images and ``y`` a list of ground-truth
    scenes (or ``(N, 4)`` arrays of center-size boxes in image fractions).

    With ``detector="toy"``, :meth:`fit` trains one :class:`ToyPredictor` per
    stage using the delayed two-stage scheme. The oracle kinds need no
    training and read the ground truth at prediction time, so ``predict``
    must then be given ``y`` as well.

    Args:
        resolutions: Input size of every stage, each a multiple of 32.
        tau_low: Confidence at or below which boxes are dropped between stages.
        tau_high: Confidence above which individual boxes exit early.
        tau_nms: IoU threshold of the transition NMS.
        gamma: Maximum number of crops passed on per window.
        ablation: ``full``, ``no_groups``, ``fixed_offsets`` or ``no_offsets``.
        final_nms_iou: IoU threshold of the NMS over pooled detections.
        detector: ``toy`` or one of the oracle kinds.
    """

    def __init__(
        self,
        resolutions=(512, 256),
        tau_low=0.1,
        tau_high=0.9,
        tau_nms=0.25,
        gamma=3,
        ablation="full",
        final_nms_iou=0.5,
        detector="toy",
        sigma=0.02,
        p_drop=0.1,
        p_spurious=0.01,
        area_threshold_px=16.0,
        epochs=10,
        learning_rate=1e-3,
        lr_decay=0.0,
        batch_size=1,
        delay_epochs=3,
        pool=4,
        context=1,
        seed=0,
    ):
        self.resolutions = resolutions
        self.tau_low = tau_low
        self.tau_high = tau_high
        self.tau_nms = tau_nms
        self.gamma = gamma
        self.ablation = ablation
        self.final_nms_iou = final_nms_iou
        self.detector = detector
        self.sigma = sigma
        self.p_drop = p_drop
        self.p_spurious = p_spurious
        self.area_threshold_px = area_threshold_px
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.delay_epochs = delay_epochs
        self.pool = pool
        self.context = context
        self.seed = seed

    # -- configuration ---------------------------------------------------------

    def pipeline_config(self) -> PipelineConfig:
        res = check_resolutions(self.resolutions)
        t = TransitionConfig(self.tau_low, self.tau_high, self.tau_nms, self.gamma)
        stages = [StageConfig(r, t) for r in res[:-1]] + [StageConfig(res[-1])]
        return PipelineConfig(tuple(stages), self.final_nms_iou, Ablation.parse(str(self.ablation)))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            delay_epochs=self.delay_epochs,
            queue_capacity=max(64, self.batch_size),
            seed=self.seed,
        )

    def _oracles(self, res):
        kind = self.detector
        cfg = OracleConfig(
            kind=kind,
            sigma=self.sigma if kind == "noisy" else 0.0,
            p_drop=self.p_drop if kind == "noisy" else 0.0,
            p_spurious=self.p_spurious if kind == "noisy" else 0.0,
            area_threshold_px=self.area_threshold_px,
            seed=self.seed,
        )
        return oracle_stages(res, cfg)

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y):
        """Build the stages; train them when ``detector="toy"``.

        Args:
            X: Images, or ``None`` for oracle detectors.
            y: Ground-truth scenes, one per image.

        Returns:
            self
        """
        if self.detector not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector {self.detector!r}; expected one of {DETECTOR_KINDS}")
        cfg = self.pipeline_config()
        res = cfg.resolutions
        scenes = check_scenes(y)
        if self.detector != "toy":
            self.detectors_ = self._oracles(res)
            self.loss_trace_ = []
        else:
            if len(res) > 2:
                raise ValueError("toy training supports one or two stages")
            images = check_images(X, len(scenes))
            if images is None:
                raise ValueError("toy detectors need training images")
            tc = self.train_config()
            if len(res) == 1:
                p = ToyPredictor(res[0], self.pool, self.context, final_stage=True)
                trace = train_stage(p, stage_examples(p, images, scenes, tc.delta), tc)[1]
                self.detectors_ = [p]
                self.loss_trace_ = [(e, 1, v) for e, v in enumerate(trace)]
            else:
                s1 = ToyPredictor(res[0], self.pool, self.context)
                s2 = ToyPredictor(res[1], self.pool, self.context, final_stage=True)
                state = train_two_stage(s1, s2, images, scenes, tc)
                self.detectors_ = [s1, s2]
                self.loss_trace_ = [r[:3] for r in state.trace]
        self.n_stages_ = len(res)
        return self

    def _check_fitted(self):
        if not hasattr(self, "detectors_"):
            raise RuntimeError("call fit before predict")

    def predict(self, X, y=None):
        """Detections per image, each a list of :class:`ScoredDetection`."""
        self._check_fitted()
        scenes = check_scenes(y) if y is not None else None
        images = check_images(X)
        if scenes is None and self.detector != "toy":
            raise ValueError("oracle detectors need the ground truth at prediction time")
        n = check_same_length(images, scenes, names=("images", "scenes"))
        cfg = self.pipeline_config()
        out, reports = [], []
        for k in range(n):
            image = images[k] if images is not None else None
            scene = scenes[k] if scenes is not None else None
            dets, report = run(image, scene, self.detectors_, cfg, image_id=scene.image_id if scene else f"{k:06d}")
            out.append(dets)
            reports.append(report)
        self.last_reports_ = reports
        return out

    def evaluate(self, X, y, thresholds=(0.5, 0.75)) -> dict[float, float]:
        scenes = check_scenes(y)
        dets = [d for per_image in self.predict(X, scenes) for d in per_image]
        return mean_average_precision(dets, scenes, thresholds)

    def score(self, X, y) -> float:
        """mAP at IoU 0.5."""
        scenes = check_scenes(y)
        dets = [d for per_image in self.predict(X, scenes) for d in per_image]
        return average_precision(dets, scenes, 0.5).ap

    def budget(self) -> dict[str, int]:
        cfg = self.pipeline_config()
        return {"max_boxes": box_budget(cfg), "pixels": pixel_budget(cfg)}


def as_scene_arrays(scenes) -> list[np.ndarray]:
    return [s.array for s in check_scenes(scenes)]
