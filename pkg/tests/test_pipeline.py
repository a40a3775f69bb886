import numpy as np
import pytest

from odgi.boxes import Box, GridSpec
from odgi.grouping import GroundTruthScene
from odgi.losses import StageOutput
from odgi.pipeline import (
    FULL_IMAGE,
    PipelineConfig,
    StageConfig,
    box_budget,
    pixel_budget,
    read_detections_jsonl,
    resample_bilinear,
    run,
    write_detections_jsonl,
)
from odgi.synthdata import oracle_stages
from odgi.transition import TransitionConfig


@pytest.mark.parametrize(
    "res,gamma,boxes,pixels",
    [
        ((512, 256), 3, 448, 458_752),
        ((512, 64), 3, 268, None),
        ((512, 256), 6, 640, 655_360),
        ((256, 128), 6, 160, 163_840),
        ((1024,), 3, 1024, 1_048_576),
    ],
)
def test_budgets(res, gamma, boxes, pixels):
    t = TransitionConfig(gamma=gamma)
    cfg = PipelineConfig(tuple(StageConfig(r, t) for r in res[:-1]) + (StageConfig(res[-1]),))
    assert box_budget(cfg) == boxes
    if pixels is not None:
        assert pixel_budget(cfg) == pixels


def test_three_stage_budget_multiplies_crops():
    t = TransitionConfig(gamma=2)
    cfg = PipelineConfig((StageConfig(512, t), StageConfig(256, t), StageConfig(128)))
    assert box_budget(cfg) == 256 + 2 * 64 + 4 * 16


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(())
    with pytest.raises(ValueError):
        PipelineConfig((StageConfig(512), StageConfig(256)))
    with pytest.raises(ValueError):
        StageConfig(300)


def test_resample_identity_and_window():
    img = np.arange(64, dtype=float).reshape(8, 8)
    np.testing.assert_allclose(resample_bilinear(img, FULL_IMAGE, 8), img)
    # top-left quarter upsampled 2x: pixel centers fall between source pixels
    out = resample_bilinear(img, Box(0.25, 0.25, 0.5, 0.5), 8)
    assert out.shape == (8, 8)
    assert out[1, 1] == pytest.approx(img[0, 0] * 0.5625 + img[0, 1] * 0.1875 + img[1, 0] * 0.1875 + img[1, 1] * 0.0625)
    u8 = np.full((4, 4), 255, dtype=np.uint8)
    assert resample_bilinear(u8, FULL_IMAGE, 4).max() == pytest.approx(1.0)


def test_perfect_two_stage_recovers_every_object():
    sc = GroundTruthScene.from_array([[0.2, 0.2, 0.03, 0.03], [0.22, 0.23, 0.02, 0.03], [0.7, 0.6, 0.05, 0.04]], "a", 512)
    dets, report = run(None, sc, oracle_stages([512, 256]), PipelineConfig.two_stage(512, 256, TransitionConfig(0.0, 0.6, 0.25, 3)))
    got = sorted(tuple(np.round(d.box.as_array(), 9)) for d in dets)
    want = sorted(tuple(np.round(b, 9)) for b in sc.array)
    assert got == want
    assert report.boxes_used <= report.max_boxes == 448


def test_no_crops_skips_later_stages():
    sc = GroundTruthScene((), "e", 512)
    dets, report = run(None, sc, oracle_stages([512, 256]), PipelineConfig.two_stage(512, 256))
    assert dets == []
    assert [s["stage"] for s in report.per_stage] == [1]
    assert report.to_dict()["pixels_used"] == 512**2


class WrongGrid:
    resolution_px = 512
    needs_pixels = False

    def __call__(self, pixels, window, scene):
        return StageOutput.empty(GridSpec(4, 4))


def test_grid_contract_violation():
    with pytest.raises(ValueError, match="grid contract violated"):
        run(None, GroundTruthScene(()), [WrongGrid()], PipelineConfig.single_stage(512))


def test_pixel_detector_without_image():
    class NeedsPixels(WrongGrid):
        needs_pixels = True

    with pytest.raises(ValueError, match="needs pixels"):
        run(None, GroundTruthScene(()), [NeedsPixels()], PipelineConfig.single_stage(512))


def test_detections_roundtrip(tmp_path):
    sc = GroundTruthScene.from_array([[0.3, 0.3, 0.05, 0.05]], "x", 512)
    dets, _ = run(None, sc, oracle_stages([512]), PipelineConfig.single_stage(512))
    write_detections_jsonl(tmp_path / "d.jsonl", dets)
    back = read_detections_jsonl(tmp_path / "d.jsonl")
    assert back == dets and [d.image_id for d in back] == ["x"]


def test_detector_count_mismatch():
    with pytest.raises(ValueError):
        run(None, GroundTruthScene(()), oracle_stages([512]), PipelineConfig.two_stage(512, 256))
