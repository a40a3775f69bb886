"""Synthetic aerial-like scenes, their on-disk format, and oracle detectors.

Scenes hold a few small bright rectangles scattered, optionally in clusters,
over a textured background. Oracle detectors read the ground truth instead
of the pixels, so the cascade logic can be exercised without training.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .boxes import Box, GridSpec, iou_array, resolution_to_grid, to_corners
from .grouping import (
    DEFAULT_DELTA,
    GroundTruthScene,
    TargetGrid,
    assign,
    build_targets,
    offset_targets_array,
    restrict_to_crop,
    scene_targets,
)
from .losses import StageOutput
from .pipeline import FULL_IMAGE

IMAGE_MAGIC = b"ODGI-IMG v1\n"
ANNOTATIONS = "annotations.jsonl"
IMAGE_DIR = "images"


@dataclass(frozen=True)
class SceneGenConfig:
    """Scene generator settings.

    The defaults mimic a sparse aerial dataset: about three vehicles per
    image, each covering roughly 0.113% of the image.
    """

    seed: int = 0
    objects_per_image: float = 3.0
    object_size_fraction: float = 0.00113
    size_shape: float = 8.0
    aspect_spread: float = 0.3
    clustering: str = "none"
    n_clusters: int = 2
    cluster_spread: float = 0.03
    allow_overlap: bool = False
    min_gap: float = 0.0
    image_size_px: int = 1024

    def __post_init__(self):
        if self.object_size_fraction >= 1.0 or self.object_size_fraction <= 0.0:
            raise ValueError("object_size_fraction must lie in (0, 1)")
        if self.objects_per_image < 0:
            raise ValueError("objects_per_image must be nonnegative")
        if self.clustering not in ("none", "clustered"):
            raise ValueError(f"unknown clustering {self.clustering!r}")
        if self.n_clusters < 1 or self.cluster_spread <= 0 or self.size_shape <= 0:
            raise ValueError("cluster and size parameters must be positive")
        if self.image_size_px < 1:
            raise ValueError("image_size_px must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _sample_box(rng, cfg: SceneGenConfig, center=None):
    area = cfg.object_size_fraction * rng.gamma(cfg.size_shape, 1.0 / cfg.size_shape)
    ratio = np.exp(rng.uniform(-cfg.aspect_spread, cfg.aspect_spread))
    w = min(np.sqrt(area * ratio), 1.0)
    h = min(np.sqrt(area / ratio), 1.0)
    if center is None:
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
    else:
        cx = float(np.clip(center[0] + rng.normal(0, cfg.cluster_spread), w / 2, 1 - w / 2))
        cy = float(np.clip(center[1] + rng.normal(0, cfg.cluster_spread), h / 2, 1 - h / 2))
    return np.array([cx, cy, w, h])


def _overlaps(box, placed, gap) -> bool:
    if not placed:
        return False
    p = np.array(placed)
    dx = np.abs(p[:, 0] - box[0]) - (p[:, 2] + box[2]) / 2
    dy = np.abs(p[:, 1] - box[1]) - (p[:, 3] + box[3]) / 2
    return bool(np.any((dx < gap) & (dy < gap)))


def generate_scene(cfg: SceneGenConfig, index: int, max_tries: int = 100) -> GroundTruthScene:
    """One scene; scene ``index`` draws from its own seed so scenes are independent.

    Without ``allow_overlap`` each object is resampled up to ``max_tries``
    times to avoid the objects already placed, and dropped if that fails.
    """
    rng = _scene_rng(cfg.seed, index)
    n = rng.poisson(cfg.objects_per_image)
    centers = rng.uniform(0.05, 0.95, size=(cfg.n_clusters, 2)) if cfg.clustering == "clustered" else None
    placed: list[np.ndarray] = []
    for _ in range(n):
        center = centers[rng.integers(len(centers))] if centers is not None else None
        box = _sample_box(rng, cfg, center)
        tries = 1
        while not cfg.allow_overlap and _overlaps(box, placed, cfg.min_gap) and tries < max_tries:
            box = _sample_box(rng, cfg, center)
            tries += 1
        if cfg.allow_overlap or not _overlaps(box, placed, cfg.min_gap):
            placed.append(box)
    return GroundTruthScene.from_array(np.array(placed).reshape(-1, 4), f"{index:06d}", cfg.image_size_px)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each of ``n`` unit pixels covered by ``[lo, hi]`` (pixel units)."""
    edges = np.arange(n)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def render_scene(scene: GroundTruthScene, seed: int = 0, index: int = 0, size: int | None = None) -> np.ndarray:
    """Grayscale ``uint8`` rendering with area-weighted object edges."""
    size = size or scene.image_size_px
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 1]))
    coarse = rng.uniform(-1.0, 1.0, size=(9, 9))
    t = np.linspace(0, 8, size)
    lo = np.minimum(t.astype(int), 7)
    f = t - lo
    rows = coarse[lo] * (1 - f)[:, None] + coarse[lo + 1] * f[:, None]
    smooth = rows[:, lo] * (1 - f) + rows[:, lo + 1] * f
    img = 70.0 + 25.0 * smooth + rng.normal(0.0, 8.0, size=(size, size))
    for b in scene.array:
        x0, x1 = (b[0] - b[2] / 2) * size, (b[0] + b[2] / 2) * size
        y0, y1 = (b[1] - b[3] / 2) * size, (b[1] + b[3] / 2) * size
        cx = _coverage(x0, x1, size)
        cy = _coverage(y0, y1, size)
        xs, ys = np.flatnonzero(cx), np.flatnonzero(cy)
        if len(xs) == 0 or len(ys) == 0:
            continue
        cov = np.outer(cy[ys], cx[xs])
        level = rng.uniform(180.0, 240.0)
        block = img[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1]
        block *= 1.0 - cov
        block += cov * level
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate(cfg: SceneGenConfig, count: int, render: bool = True):
    """Generate ``count`` scenes, deterministic in ``cfg.seed``.

    Returns:
        ``(scenes, images)``; ``images`` is ``None`` when ``render`` is false.
    """
    scenes = [generate_scene(cfg, k) for k in range(count)]
    if not render:
        return scenes, None
    images = [render_scene(s, cfg.seed, k, cfg.image_size_px) for k, s in enumerate(scenes)]
    return scenes, images


# -- file formats --------------------------------------------------------------


def write_image(path, image: np.ndarray):
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + f"{w} {h}\n".encode())
        fh.write(image.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(IMAGE_MAGIC):
        raise ValueError(f"{path}: not an ODGI-IMG v1 file")
    rest = data[len(IMAGE_MAGIC) :]
    header, _, pixels = rest.partition(b"\n")
    w, h = (int(v) for v in header.split())
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def scene_record(scene: GroundTruthScene) -> dict:
    return {
        "image_id": scene.image_id,
        "boxes": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for b in scene.boxes],
        "image_size_px": scene.image_size_px,
    }


def write_dataset(root, scenes, images=None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ANNOTATIONS, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_record(s)) + "\n")
    if images is not None:
        (root / IMAGE_DIR).mkdir(exist_ok=True)
        for s, im in zip(scenes, images):
            write_image(root / IMAGE_DIR / f"{s.image_id}.img", im)


def read_annotations(path) -> list[GroundTruthScene]:
    scenes = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            boxes = tuple(Box(b["cx"], b["cy"], b["w"], b["h"]) for b in r["boxes"])
            scenes.append(GroundTruthScene(boxes, str(r["image_id"]), int(r.get("image_size_px", 1024))))
    return scenes


def read_dataset(root, load_images: bool = True):
    """Read annotations and, when present, images from a dataset directory.

    Returns:
        ``(scenes, images)``; ``images`` is ``None`` if the directory has none
        or ``load_images`` is false.
    """
    root = Path(root)
    scenes = read_annotations(root / ANNOTATIONS)
    img_dir = root / IMAGE_DIR
    if not load_images or not img_dir.is_dir():
        return scenes, None
    return scenes, [read_image(img_dir / f"{s.image_id}.img") for s in scenes]


# -- oracle detectors --------------------------------------------------------


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "perfect"
    sigma: float = 0.0
    p_drop: float = 0.0
    p_spurious: float = 0.0
    area_threshold_px: float = 16.0
    seed: int = 0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.kind not in ("perfect", "noisy", "resolution_degraded"):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if self.sigma < 0 or self.area_threshold_px < 0:
            raise ValueError("sigma and area threshold must be nonnegative")
        for p in (self.p_drop, self.p_spurious):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


def individual_targets(scene: GroundTruthScene, grid: GridSpec, delta: float = DEFAULT_DELTA) -> TargetGrid:
    """Per-cell targets for a stage that only reports individual objects.

    Each occupied cell takes the assigned box with the largest overlap with
    the cell (lowest index on ties) instead of the enclosing union.
    """
    a = assign(scene, grid)
    t = build_targets(a, scene, delta)
    if not a.a.shape[-1]:
        return t
    cells = grid.cell_corners()
    boxes = scene.array
    c = to_corners(boxes)
    iw = np.minimum(cells[..., None, 2], c[:, 2]) - np.maximum(cells[..., None, 0], c[:, 0])
    ih = np.minimum(cells[..., None, 3], c[:, 3]) - np.maximum(cells[..., None, 1], c[:, 1])
    overlap = np.where(a.a, np.maximum(iw, 0) * np.maximum(ih, 0), -1.0)
    pick = np.argmax(overlap, axis=-1)
    chosen = np.where(t.occupied[..., None], boxes[pick], 0.0)
    offsets = np.where(t.occupied[..., None], offset_targets_array(chosen, chosen, delta), 1.0)
    return TargetGrid(grid, t.occupied, chosen, np.zeros(grid.shape), offsets, t.counts)


def _targets(scene, grid, delta, individual):
    return individual_targets(scene, grid, delta) if individual else scene_targets(scene, grid, delta)


def perfect_oracle(
    scene: GroundTruthScene, grid: GridSpec, delta: float = DEFAULT_DELTA, individual: bool = False
) -> StageOutput:
    """Emit exactly the per-cell targets with full confidence."""
    t = _targets(scene, grid, delta, individual)
    return StageOutput.from_probabilities(grid, t.boxes, t.occupied.astype(float), t.group, t.offsets)


def noisy_oracle(
    scene: GroundTruthScene,
    grid: GridSpec,
    sigma: float,
    p_drop: float,
    p_spurious: float,
    rng: np.random.Generator,
    delta: float = DEFAULT_DELTA,
    individual: bool = False,
) -> StageOutput:
    """Perfect output corrupted by jitter, dropped cells and spurious boxes.

    A jittered box keeps the IoU with its target as confidence and gets the
    offsets that would make it enclose the target again.
    """
    t = _targets(scene, grid, delta, individual)
    shape = grid.shape
    drop = rng.random(shape) < p_drop
    noise = rng.normal(0.0, 1.0, size=shape + (4,)) * sigma
    spur = rng.random(shape) < p_spurious
    spur_pos = rng.random(shape + (2,))
    spur_size = rng.uniform(0.2, 1.0, size=shape + (2,))
    spur_conf = rng.uniform(0.0, 0.5, size=shape)

    real = t.occupied & ~drop
    boxes = t.boxes + noise
    boxes[..., 2:] = np.maximum(boxes[..., 2:], 0.0)
    conf = np.where(real, iou_array(boxes, t.boxes), 0.0)
    offsets = np.where(real[..., None], offset_targets_array(boxes, t.boxes, delta), 1.0)
    group = np.where(real, t.group, 0.0)
    boxes = np.where(real[..., None], boxes, 0.0)

    fake = spur & ~t.occupied & (spur_conf > 0)
    i, j = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    fake_boxes = np.stack(
        [
            (j + spur_pos[..., 0]) / grid.cols,
            (i + spur_pos[..., 1]) / grid.rows,
            spur_size[..., 0] / grid.cols,
            spur_size[..., 1] / grid.rows,
        ],
        axis=-1,
    )
    boxes = np.where(fake[..., None], fake_boxes, boxes)
    conf = np.where(fake, spur_conf, conf)
    offsets = np.where(fake[..., None], 2.0 / 3.0, offsets)
    return StageOutput.from_probabilities(grid, boxes, conf, group, offsets)


def resolution_degraded_oracle(
    scene: GroundTruthScene,
    grid: GridSpec,
    resolution_px: int,
    area_threshold_px: float,
    delta: float = DEFAULT_DELTA,
    individual: bool = False,
) -> StageOutput:
    """Perfect output restricted to cells whose target is big enough to see.

    A cell fires only if its target box covers at least ``area_threshold_px``
    pixels at ``resolution_px``. Group targets are unions, so a group can be
    visible while its members are not.
    """
    t = _targets(scene, grid, delta, individual)
    area_px = t.boxes[..., 2] * t.boxes[..., 3] * resolution_px**2
    visible = t.occupied & (area_px >= area_threshold_px)
    return StageOutput.from_probabilities(
        grid,
        np.where(visible[..., None], t.boxes, 0.0),
        visible.astype(float),
        np.where(visible, t.group, 0.0),
        np.where(visible[..., None], t.offsets, 1.0),
    )


def targets_from_output(out: StageOutput) -> TargetGrid:
    """Read a stage output back as a target grid (confidence > 0 = occupied)."""
    occupied = out.confidence > 0
    return TargetGrid(
        out.grid,
        occupied,
        np.where(occupied[..., None], out.boxes, 0.0),
        np.where(occupied, (out.group >= 0.5).astype(float), 0.0),
        np.where(occupied[..., None], out.offsets, 1.0),
    )


def _window_key(window: Box) -> list[int]:
    return [int(round(v * 1e9)) for v in window.as_array()]


class OracleDetector:
    """A stage detector backed by an oracle.

    The ground truth is restricted to the window it is called on, exactly as
    crop-frame training targets are built. With ``individual=True`` the
    oracle stands in for a last stage and never reports group boxes.
    """

    needs_pixels = False

    def __init__(self, resolution_px: int, config: OracleConfig = OracleConfig(), individual: bool = False):
        self.resolution_px = int(resolution_px)
        self.grid = resolution_to_grid(resolution_px)
        self.config = config
        self.individual = individual

    def __repr__(self):
        return f"OracleDetector({self.resolution_px}, {self.config}, individual={self.individual})"

    def __call__(self, pixels, window: Box, scene: GroundTruthScene | None) -> StageOutput:
        if scene is None:
            raise ValueError("oracle detectors need the ground-truth scene")
        local = scene if window == FULL_IMAGE else restrict_to_crop(scene, window)[0]
        cfg = self.config
        if cfg.kind == "perfect":
            return perfect_oracle(local, self.grid, cfg.delta, self.individual)
        if cfg.kind == "resolution_degraded":
            return resolution_degraded_oracle(
                local, self.grid, self.resolution_px, cfg.area_threshold_px, cfg.delta, self.individual
            )
        entropy = [cfg.seed, zlib.crc32(scene.image_id.encode()), self.resolution_px, *_window_key(window)]
        rng = np.random.default_rng(np.random.SeedSequence([abs(e) for e in entropy]))
        return noisy_oracle(
            local, self.grid, cfg.sigma, cfg.p_drop, cfg.p_spurious, rng, cfg.delta, self.individual
        )


def oracle_stages(resolutions, config: OracleConfig = OracleConfig()) -> list[OracleDetector]:
    """One oracle per stage; the last one reports individuals only."""
    resolutions = list(resolutions)
    return [OracleDetector(r, config, individual=k == len(resolutions) - 1) for k, r in enumerate(resolutions)]
