"""A minimal trainable stage and the delayed two-stage training loop."""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .boxes import Box, resolution_to_grid
from .grouping import DEFAULT_DELTA, GroundTruthScene, restrict_to_crop, scene_targets
from .losses import LOGIT_CLIP, LossBreakdown, LossWeights, StageOutput, confidence_targets, logit, loss_and_grads, offset_logits_from
from .pipeline import FULL_IMAGE, resample_bilinear
from .transition import TRAINING_TRANSITION, extract_crops

CHECKPOINT_FORMAT = "odgi-toy-predictor"
CHECKPOINT_VERSION = 1

N_OUTPUTS = 8  # tx, ty, tw, th, confidence, group, offset_w, offset_h


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 1
    delay_epochs: int = 3
    queue_capacity: int = 64
    seed: int = 0
    optimizer: str = "sgd"
    delta: float = DEFAULT_DELTA
    use_groups: bool = True
    lr_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.lr_decay < 0:
            raise ValueError("learning_rate and lr_decay must be nonnegative")
        if self.epochs < 0 or self.delay_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1 or self.queue_capacity < self.batch_size:
            raise ValueError("batch_size must be positive and fit in the queue")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def epoch_learning_rate(self, epoch: int) -> float:
        """Inverse-time schedule ``lr / (1 + lr_decay * epoch)``; constant when ``lr_decay`` is 0."""
        return self.learning_rate / (1.0 + self.lr_decay * epoch)


class ToyPredictor:
    """Shared affine map from pooled pixel blocks to per-cell raw outputs.

    Each cell sees its own ``32 x 32`` pixel block plus ``context`` cells of
    surroundings, mean-pooled into ``pool x pool`` sub-blocks per cell. The
    same weights are applied at every cell, like a 1x1 convolution on top of
    a fixed pooling layer.

    Raw outputs are decoded as: center relative to the cell, width and height
    as image fractions, logistic confidence and group flag, and logistic
    offsets mapped into ``(eps, 1]``.
    """

    needs_pixels = True

    def __init__(self, resolution_px: int, pool: int = 4, context: int = 1, final_stage: bool = False):
        if 32 % pool:
            raise ValueError("pool must divide 32")
        self.resolution_px = int(resolution_px)
        self.grid = resolution_to_grid(resolution_px)
        self.pool = int(pool)
        self.context = int(context)
        self.final_stage = final_stage
        span = (2 * self.context + 1) * self.pool
        self.n_features = span * span
        self.weights = np.zeros((N_OUTPUTS, self.n_features + 1))
        self.reset()

    def reset(self):
        """Zero weights; biases give a cell-sized box at the cell center with
        confidence 0.1, group probability 0.5 and offsets 2/3."""
        w = np.zeros((N_OUTPUTS, self.n_features + 1))
        w[:, -1] = [0.5, 0.5, 1.0 / self.grid.cols, 1.0 / self.grid.rows, float(logit(0.1)), 0.0, 0.0, 0.0]
        w[6:, -1] = offset_logits_from(2.0 / 3.0)
        self.weights = w
        return self

    # -- forward / backward ------------------------------------------------

    def features(self, pixels: np.ndarray) -> np.ndarray:
        """Feature tensor ``(rows, cols, n_features + 1)``, last column is 1."""
        res = self.resolution_px
        pixels = np.asarray(pixels, dtype=float)
        if pixels.shape != (res, res):
            raise ValueError(f"expected {res}x{res} pixels, got {pixels.shape}")
        block = 32 // self.pool
        n = res // block
        pooled = pixels.reshape(n, block, n, block).mean(axis=(1, 3))
        pooled = pooled - np.median(pooled)
        pad = self.context * self.pool
        pooled = np.pad(pooled, pad, mode="constant")
        span = (2 * self.context + 1) * self.pool
        win = sliding_window_view(pooled, (span, span))[:: self.pool, :: self.pool]
        feats = win.reshape(self.grid.rows, self.grid.cols, -1) * (2.0 / span)
        ones = np.ones(self.grid.shape + (1,))
        return np.concatenate([feats, ones], axis=-1)

    def raw_outputs(self, feats: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        w = self.weights if weights is None else weights
        return feats @ w.T

    def decode(self, raw: np.ndarray) -> StageOutput:
        grid = self.grid
        i, j = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
        boxes = np.stack(
            [(raw[..., 0] + j) / grid.cols, (raw[..., 1] + i) / grid.rows, raw[..., 2], raw[..., 3]], axis=-1
        )
        conf = expit(raw[..., 4])
        group = np.clip(raw[..., 5], -LOGIT_CLIP, LOGIT_CLIP)
        offsets = raw[..., 6:8]
        return StageOutput(grid, boxes, conf, group, offsets)

    def raw_gradients(self, out: StageOutput, grads: dict) -> np.ndarray:
        """Chain loss gradients back to the raw outputs."""
        g = np.zeros(out.grid.shape + (N_OUTPUTS,))
        g[..., 0] = grads["boxes"][..., 0] / out.grid.cols
        g[..., 1] = grads["boxes"][..., 1] / out.grid.rows
        g[..., 2:4] = grads["boxes"][..., 2:4]
        c = out.confidence
        g[..., 4] = grads["confidence"] * c * (1.0 - c)
        g[..., 5] = grads["group_logit"]
        g[..., 6:8] = grads["offset_logit"]
        return g

    def forward(self, pixels) -> tuple[StageOutput, np.ndarray]:
        feats = self.features(pixels)
        return self.decode(self.raw_outputs(feats)), feats

    def __call__(self, pixels, window: Box = FULL_IMAGE, scene=None) -> StageOutput:
        return self.forward(pixels)[0]

    def loss(self, feats, targets, weights_override=None, conf_target=None, offset_targets=None,
             loss_weights: LossWeights = LossWeights(), use_groups: bool = True):
        """Loss and weight gradient for one example with precomputed features.

        ``conf_target`` and ``offset_targets`` freeze the prediction-dependent
        targets; by default they are computed from the current prediction.
        """
        w = self.weights if weights_override is None else weights_override
        out = self.decode(self.raw_outputs(feats, w))
        if offset_targets is None:
            t = targets.with_offsets_for(out.boxes)
        else:
            t = targets.__class__(targets.grid, targets.occupied, targets.boxes, targets.group, offset_targets, targets.counts)
        parts, grads = loss_and_grads(out, t, loss_weights, self.final_stage, use_groups, conf_target)
        g_raw = self.raw_gradients(out, grads)
        d_w = np.einsum("ijk,ijl->kl", g_raw, feats)
        return parts, d_w

    # -- persistence ---------------------------------------------------------

    def state(self) -> dict:
        return {
            "resolution_px": self.resolution_px,
            "pool": self.pool,
            "context": self.context,
            "final_stage": self.final_stage,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "ToyPredictor":
        p = cls(state["resolution_px"], state["pool"], state["context"], state["final_stage"])
        w = np.asarray(state["weights"], dtype=float)
        if w.shape != p.weights.shape:
            raise ValueError("checkpoint weights do not match the predictor layout")
        p.weights = w
        return p


class _Optimizer:
    def __init__(self, kind: str, lr: float, shape):
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def step(self, weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return weights - self.lr * grad
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad**2
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return weights - self.lr * m_hat / (np.sqrt(v_hat) + eps)

    def state(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    def load(self, state: dict):
        self.t = state["t"]
        self.m = np.asarray(state["m"], dtype=float)
        self.v = np.asarray(state["v"], dtype=float)


class BoundedQueue:
    """FIFO of crops waiting to be consumed by the next stage."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque()

    def __len__(self):
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) >= self.capacity

    def push(self, item):
        if self.full:
            raise OverflowError("queue is full")
        self._items.append(item)

    def pop_batch(self, n: int) -> list:
        return [self._items.popleft() for _ in range(min(n, len(self._items)))]


@dataclass
class StageTrainer:
    """Gradient descent on one stage, one batch at a time."""

    predictor: ToyPredictor
    config: TrainConfig
    optimizer: _Optimizer = None
    epoch_losses: list = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = _Optimizer(self.config.optimizer, self.config.learning_rate, self.predictor.weights.shape)

    def step(self, batch) -> list[LossBreakdown]:
        """One update from ``(features, targets)`` pairs; returns per-example losses."""
        grad = np.zeros_like(self.predictor.weights)
        parts = []
        for feats, targets in batch:
            with np.errstate(over="ignore", invalid="ignore"):
                p, g = self.predictor.loss(feats, targets, use_groups=self.config.use_groups)
            if not np.isfinite(p.total) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite loss {p.total} at stage {self.predictor.resolution_px}px")
            grad += g
            parts.append(p)
        self.predictor.weights = self.optimizer.step(self.predictor.weights, grad / len(batch))
        return parts


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 7]))


def _batches(order, size):
    for k in range(0, len(order), size):
        yield order[k : k + size]


def stage_examples(predictor: ToyPredictor, images, scenes, delta=DEFAULT_DELTA):
    """Precomputed ``(features, targets)`` for full-image training of a stage."""
    out = []
    for image, scene in zip(images, scenes):
        pixels = resample_bilinear(image, FULL_IMAGE, predictor.resolution_px)
        out.append((predictor.features(pixels), scene_targets(scene, predictor.grid, delta)))
    return out


def train_stage(predictor: ToyPredictor, examples, config: TrainConfig, trace: list | None = None):
    """Train one stage on precomputed examples.

    Returns:
        The predictor and the per-epoch mean total loss.
    """
    trainer = StageTrainer(predictor, config)
    trace = [] if trace is None else trace
    for epoch in range(config.epochs):
        trainer.optimizer.lr = config.epoch_learning_rate(epoch)
        order = _epoch_rng(config.seed, epoch).permutation(len(examples))
        losses = []
        for idx in _batches(order, config.batch_size):
            losses.extend(p.total for p in trainer.step([examples[k] for k in idx]))
        trace.append(float(np.mean(losses)) if losses else float("nan"))
    return predictor, trace


def crop_example(predictor: ToyPredictor, image, scene: GroundTruthScene, crop: Box, delta=DEFAULT_DELTA):
    pixels = resample_bilinear(image, crop, predictor.resolution_px)
    local, _ = restrict_to_crop(scene, crop)
    return predictor.features(pixels), scene_targets(local, predictor.grid, delta)


@dataclass
class TwoStageState:
    stage1: ToyPredictor
    stage2: ToyPredictor
    opt1: _Optimizer
    opt2: _Optimizer
    epoch: int = 0
    trace: list = field(default_factory=list)  # rows: (epoch, stage, loss, groups, coords, offsets, n)


def _mean_parts(parts: list[LossBreakdown]):
    if not parts:
        return None
    return (
        float(np.mean([p.total for p in parts])),
        float(np.mean([p.groups for p in parts])),
        float(np.mean([p.coords for p in parts])),
        float(np.mean([p.offsets for p in parts])),
        len(parts),
    )


def train_two_stage(
    stage1: ToyPredictor,
    stage2: ToyPredictor,
    images,
    scenes,
    config: TrainConfig,
    state: TwoStageState | None = None,
    on_epoch=None,
) -> TwoStageState:
    """Delayed joint training of a two-stage cascade.

    Stage 1 trains alone for ``config.delay_epochs`` epochs. Afterwards every
    stage-1 batch also pushes its unfiltered crops into a bounded FIFO queue,
    from which stage 2 draws its batches. Stage-2 targets are rebuilt from
    the ground truth restricted to each crop. The queue is drained at the end
    of each epoch, so training can resume exactly from any epoch boundary.
    """
    images = list(images)
    scenes = list(scenes)
    if state is None:
        state = TwoStageState(
            stage1,
            stage2,
            _Optimizer(config.optimizer, config.learning_rate, stage1.weights.shape),
            _Optimizer(config.optimizer, config.learning_rate, stage2.weights.shape),
        )
    t1 = StageTrainer(state.stage1, config, state.opt1)
    t2 = StageTrainer(state.stage2, config, state.opt2)
    examples = stage_examples(state.stage1, images, scenes, config.delta)
    queue = BoundedQueue(config.queue_capacity)

    def consume(parts2, n):
        items = queue.pop_batch(n)
        if items:
            batch = [crop_example(state.stage2, images[k], scenes[k], crop, config.delta) for k, crop in items]
            parts2.extend(t2.step(batch))

    while state.epoch < config.epochs:
        epoch = state.epoch
        state.opt1.lr = state.opt2.lr = config.epoch_learning_rate(epoch)
        order = _epoch_rng(config.seed, epoch).permutation(len(images))
        parts1, parts2 = [], []
        for idx in _batches(order, config.batch_size):
            batch = [examples[k] for k in idx]
            produce = epoch >= config.delay_epochs
            outs = [state.stage1.decode(state.stage1.raw_outputs(f)) for f, _ in batch] if produce else []
            parts1.extend(t1.step(batch))
            for k, out in zip(idx, outs):
                crops, _ = extract_crops(out, TRAINING_TRANSITION)
                for crop in crops:
                    while queue.full:
                        consume(parts2, config.batch_size)
                    queue.push((int(k), crop.region))
                while len(queue) >= config.batch_size:
                    consume(parts2, config.batch_size)
        while len(queue):
            consume(parts2, config.batch_size)
        for stage, parts in ((1, parts1), (2, parts2)):
            m = _mean_parts(parts)
            if m is not None:
                state.trace.append((epoch, stage) + m)
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
    return state


def stage_trace(state: TwoStageState, stage: int) -> list[float]:
    return [row[2] for row in state.trace if row[1] == stage]


TRACE_COLUMNS = ("epoch", "stage", "loss", "groups", "coords", "offsets", "examples")


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), repr(row[5]), row[6]])


def save_checkpoint(path, state: TwoStageState | None = None, predictors=None, config: TrainConfig | None = None,
                    epoch: int = 0, optimizers=None, trace=None):
    """Write predictors, optimizer state and progress as versioned JSON."""
    if state is not None:
        predictors = [state.stage1, state.stage2]
        optimizers = [state.opt1, state.opt2]
        epoch = state.epoch
        trace = state.trace
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": asdict(config) if config is not None else None,
        "stages": [p.state() for p in predictors],
        "optimizers": [o.state() for o in optimizers] if optimizers else None,
        "trace": [list(r) for r in (trace or [])],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a toy predictor checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    doc["predictors"] = [ToyPredictor.from_state(s) for s in doc["stages"]]
    return doc


def restore_two_stage(doc: dict, config: TrainConfig) -> TwoStageState:
    s1, s2 = doc["predictors"]
    o1 = _Optimizer(config.optimizer, config.learning_rate, s1.weights.shape)
    o2 = _Optimizer(config.optimizer, config.learning_rate, s2.weights.shape)
    if doc.get("optimizers"):
        o1.load(doc["optimizers"][0])
        o2.load(doc["optimizers"][1])
    return TwoStageState(s1, s2, o1, o2, doc["epoch"], [tuple(r) for r in doc["trace"]])


def gradient_check(predictor: ToyPredictor, pixels, scene: GroundTruthScene, n_params: int = 200,
                   step: float = 1e-6, seed: int = 0, use_groups: bool = True) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Prediction-dependent targets (confidence IoU, offset targets) are frozen
    at the current weights so the checked function is smooth. Relative
    errors use ``1e-4 * max(1, |loss|)`` as the smallest denominator.
    """
    feats = predictor.features(pixels)
    targets = scene_targets(scene, predictor.grid)
    out = predictor.decode(predictor.raw_outputs(feats))
    frozen = targets.with_offsets_for(out.boxes)
    c_bar = confidence_targets(out, frozen)
    base, analytic = predictor.loss(feats, targets, conf_target=c_bar, offset_targets=frozen.offsets, use_groups=use_groups)
    # central differences lose about eps * |L| / step to cancellation, so
    # entries far below that are compared on an absolute scale
    floor = 1e-4 * max(1.0, abs(base.total))
    rng = np.random.default_rng(seed)
    size = predictor.weights.size
    picks = rng.choice(size, size=min(n_params, size), replace=False)
    worst = 0.0
    for flat in picks:
        idx = np.unravel_index(flat, predictor.weights.shape)
        w = predictor.weights.copy()
        w[idx] += step
        up = predictor.loss(feats, targets, w, c_bar, frozen.offsets, use_groups=use_groups)[0].total
        w[idx] -= 2 * step
        down = predictor.loss(feats, targets, w, c_bar, frozen.offsets, use_groups=use_groups)[0].total
        numeric = (up - down) / (2 * step)
        a = analytic[idx]
        worst = max(worst, relative_error(a, numeric, floor))
    return worst


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
