"""The three training objectives of a grouped-detection stage.

Every loss returns its value together with the gradient with respect to the
raw quantities the predictor emits: box coordinates and confidence for the
coordinates term, group logits for the group term, offset logits for the
offsets term. All terms are sums over cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .boxes import OFFSET_EPS, Box, GridSpec, iou_array
from .grouping import TargetGrid

#: Logits are clipped to this magnitude when converting from probabilities.
LOGIT_CLIP = 40.0


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        z = np.log(p) - np.log1p(-p)
    return np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)


def offsets_from_logits(z) -> np.ndarray:
    return OFFSET_EPS + (1.0 - OFFSET_EPS) * expit(z)


def offset_logits_from(o) -> np.ndarray:
    o = np.clip(np.asarray(o, dtype=float), OFFSET_EPS, 1.0)
    return logit((o - OFFSET_EPS) / (1.0 - OFFSET_EPS))


@dataclass(frozen=True)
class CellPrediction:
    box: Box
    confidence: float
    group_logit: float
    offset_logits: tuple[float, float]

    @property
    def group(self) -> float:
        return float(expit(self.group_logit))

    @property
    def offsets(self) -> tuple[float, float]:
        o = offsets_from_logits(np.asarray(self.offset_logits))
        return float(o[0]), float(o[1])


@dataclass
class StageOutput:
    """One stage's ``I x J`` grid of predictions, boxes in the input frame."""

    grid: GridSpec
    boxes: np.ndarray  # (I, J, 4)
    confidence: np.ndarray  # (I, J)
    group_logit: np.ndarray  # (I, J)
    offset_logit: np.ndarray  # (I, J, 2)

    def __post_init__(self):
        shape = self.grid.shape
        if (
            self.boxes.shape != shape + (4,)
            or self.confidence.shape != shape
            or self.group_logit.shape != shape
            or self.offset_logit.shape != shape + (2,)
        ):
            raise ValueError("stage output arrays do not match the grid")

    @classmethod
    def empty(cls, grid: GridSpec) -> "StageOutput":
        return cls(
            grid,
            np.zeros(grid.shape + (4,)),
            np.zeros(grid.shape),
            np.full(grid.shape, -LOGIT_CLIP),
            np.full(grid.shape + (2,), LOGIT_CLIP),
        )

    @classmethod
    def from_probabilities(cls, grid, boxes, confidence, group, offsets) -> "StageOutput":
        return cls(
            grid,
            np.asarray(boxes, dtype=float),
            np.asarray(confidence, dtype=float),
            logit(group),
            offset_logits_from(offsets),
        )

    @property
    def group(self) -> np.ndarray:
        return expit(self.group_logit)

    @property
    def offsets(self) -> np.ndarray:
        return offsets_from_logits(self.offset_logit)

    def cell(self, i: int, j: int) -> CellPrediction:
        return CellPrediction(
            Box.from_array(self.boxes[i, j]),
            float(self.confidence[i, j]),
            float(self.group_logit[i, j]),
            (float(self.offset_logit[i, j, 0]), float(self.offset_logit[i, j, 1])),
        )


@dataclass(frozen=True)
class LossWeights:
    conf: float = 5.0
    noobj: float = 1.0

    def __post_init__(self):
        if self.conf < 0 or self.noobj < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    groups: float
    coords: float
    offsets: float

    @property
    def total(self) -> float:
        return self.groups + self.coords + self.offsets


def _check(out: StageOutput, targets: TargetGrid):
    if out.grid.shape != targets.grid.shape:
        raise ValueError(f"grid mismatch: output {out.grid.shape} vs targets {targets.grid.shape}")


def group_loss(out: StageOutput, targets: TargetGrid) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on the group flag, restricted to occupied cells."""
    _check(out, targets)
    z = out.group_logit
    g_bar = targets.group
    occ = targets.occupied.astype(float)
    # stable form: -[y log s(z) + (1-y) log s(-z)]
    ce = -(g_bar * log_expit(z) + (1.0 - g_bar) * log_expit(-z))
    loss = float(np.sum(occ * ce))
    grad = occ * (expit(z) - g_bar)
    return loss, grad


def confidence_targets(out: StageOutput, targets: TargetGrid) -> np.ndarray:
    """IoU between each prediction and its target; zero on empty cells."""
    return np.where(targets.occupied, iou_array(out.boxes, targets.boxes), 0.0)


def coords_loss(
    out: StageOutput,
    targets: TargetGrid,
    weights: LossWeights = LossWeights(),
    conf_target: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Squared error on boxes and confidences plus the empty-cell penalty.

    The confidence target is the IoU of the prediction with its target and is
    treated as a constant. Pass ``conf_target`` to freeze it explicitly.

    Returns:
        The loss and a dict with gradients ``"boxes"`` ``(I, J, 4)`` and
        ``"confidence"`` ``(I, J)``.
    """
    _check(out, targets)
    occ = targets.occupied
    c_bar = confidence_targets(out, targets) if conf_target is None else np.asarray(conf_target)
    c = out.confidence
    diff = out.boxes - targets.boxes
    occ_f = occ.astype(float)
    empty_f = 1.0 - occ_f
    loss = float(
        np.sum(occ_f * (np.sum(diff**2, axis=-1) + weights.conf * (c - c_bar) ** 2))
        + weights.noobj * np.sum(empty_f * c**2)
    )
    grad_boxes = 2.0 * occ_f[..., None] * diff
    grad_conf = 2.0 * weights.conf * occ_f * (c - c_bar) + 2.0 * weights.noobj * empty_f * c
    return loss, {"boxes": grad_boxes, "confidence": grad_conf}


def offsets_loss(out: StageOutput, targets: TargetGrid) -> tuple[float, np.ndarray]:
    """Squared error between predicted and target offsets on occupied cells."""
    _check(out, targets)
    occ = targets.occupied.astype(float)[..., None]
    s = expit(out.offset_logit)
    o = OFFSET_EPS + (1.0 - OFFSET_EPS) * s
    diff = o - targets.offsets
    loss = float(np.sum(occ * diff**2))
    grad = occ * 2.0 * diff * (1.0 - OFFSET_EPS) * s * (1.0 - s)
    return loss, grad


def loss_and_grads(
    out: StageOutput,
    targets: TargetGrid,
    weights: LossWeights = LossWeights(),
    final_stage: bool = False,
    use_groups: bool = True,
    conf_target: np.ndarray | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """All active loss terms and their gradients.

    The final stage predicts no groups or offsets, so only the coordinates
    term is active there; ``use_groups=False`` drops the group term alone.
    """
    coords, grads = coords_loss(out, targets, weights, conf_target)
    groups = offsets = 0.0
    grads["group_logit"] = np.zeros(out.grid.shape)
    grads["offset_logit"] = np.zeros(out.grid.shape + (2,))
    if not final_stage:
        if use_groups:
            groups, grads["group_logit"] = group_loss(out, targets)
        offsets, grads["offset_logit"] = offsets_loss(out, targets)
    return LossBreakdown(groups, coords, offsets), grads


def total_loss(
    out: StageOutput,
    targets: TargetGrid,
    weights: LossWeights = LossWeights(),
    final_stage: bool = False,
) -> LossBreakdown:
    return loss_and_grads(out, targets, weights, final_stage)[0]
