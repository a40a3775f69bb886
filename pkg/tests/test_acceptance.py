"""End-to-end acceptance checks, one test per criterion.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from odgi.boxes import Box, GridSpec, rescale_array, resolution_to_grid
from odgi.cli import main
from odgi.evaluation import average_precision, evaluate_pipeline, hyperparameter_sweep, recommend_gamma
from odgi.grouping import DEFAULT_DELTA, GroundTruthScene, assign, build_targets, offset_targets_array
from odgi.pipeline import FULL_IMAGE, PipelineConfig, StageConfig, box_budget, pixel_budget, resample_bilinear
from odgi.synthdata import OracleConfig, SceneGenConfig, generate, oracle_stages
from odgi.training import ToyPredictor, TrainConfig, gradient_check, stage_trace, train_two_stage
from odgi.transition import Ablation, ScoredDetection, TransitionConfig, nms_indices

from acceptance_report import record
from oracles import raster_targets, ref_average_precision, ref_nms
from test_losses import fd_check, random_case


def pipeline(res, gamma):
    t = TransitionConfig(gamma=gamma)
    return PipelineConfig(tuple(StageConfig(r, t) for r in res[:-1]) + (StageConfig(res[-1]),))


def test_c01_budget_reproduction():
    t0 = time.perf_counter()
    cases = [
        ((512, 256), 3, 448, 458_752),
        ((512, 64), 3, 268, None),
        ((512, 256), 6, 640, 655_360),
        ((256, 128), 6, 160, 163_840),
        ((1024,), 3, 1024, 1_048_576),
    ]
    bad = []
    for res, gamma, boxes, pixels in cases:
        cfg = pipeline(res, gamma)
        if box_budget(cfg) != boxes or (pixels is not None and pixel_budget(cfg) != pixels):
            bad.append((res, gamma, box_budget(cfg), pixel_budget(cfg)))
    dt = time.perf_counter() - t0
    assert record(1, "budget reproduction", not bad and dt < 1, f"mismatches={bad} {dt:.3f}s")


def test_c02_grid_rule():
    t0 = time.perf_counter()
    got = {r: resolution_to_grid(r).shape for r in (1024, 512, 256, 128, 64)}
    want = {1024: (32, 32), 512: (16, 16), 256: (8, 8), 128: (4, 4), 64: (2, 2)}
    dt = time.perf_counter() - t0
    assert record(2, "grid rule", got == want and dt < 1, f"{got}")


def test_c03_grouping_matches_raster_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = boundary = cells = 0
    for _ in range(1000):
        n = int(rng.integers(0, 21))
        rows, cols = (int(v) for v in rng.integers(1, 9, 2))
        arr = np.column_stack([rng.random((n, 2)), rng.uniform(0.0, 0.4, (n, 2))])
        sc = GroundTruthScene.from_array(arr)
        t = build_targets(assign(sc, GridSpec(rows, cols)), sc)
        occ, group, target, amb = raster_targets(arr, rows, cols)
        ok = ~amb
        cells += rows * cols
        boundary += int(amb.sum())
        same = (t.occupied[ok] == occ[ok]).all() and (t.group[ok] == group[ok]).all()
        close = np.allclose(t.boxes[ok], target[ok], rtol=0, atol=1e-9)
        mismatches += int(not (same and close))
    dt = time.perf_counter() - t0
    frac = boundary / cells
    passed = mismatches == 0 and frac < 0.005 and dt < 60
    assert record(3, "grouping vs raster oracle", passed,
                  f"mismatching scenes={mismatches} boundary cells={frac:.4%} {dt:.1f}s")


def test_c04_gradients_match_finite_differences():
    t0 = time.perf_counter()
    scenes, images = generate(SceneGenConfig(seed=31, image_size_px=128, objects_per_image=4), 100)
    rng = np.random.default_rng(5)
    worst_loss = worst_model = 0.0
    for k in range(100):
        # loss terms against their own analytic gradients
        out, targets = random_case(1000 + k)
        worst_loss = max(worst_loss, fd_check(out, targets))
        # the same losses pulled back through a randomly initialized predictor
        p = ToyPredictor(128, final_stage=k % 2 == 1)
        p.weights = p.weights + rng.normal(0, 0.3, p.weights.shape)
        px = resample_bilinear(images[k], FULL_IMAGE, 128)
        worst_model = max(worst_model, gradient_check(p, px, scenes[k], n_params=200, seed=k))
    dt = time.perf_counter() - t0
    passed = max(worst_loss, worst_model) < 1e-5 and dt < 120
    assert record(4, "analytic gradients", passed,
                  f"max rel err losses={worst_loss:.2e} predictor={worst_model:.2e} {dt:.1f}s")


def test_c05_offset_enclosure():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    n = 10_000
    pred = np.column_stack([rng.random((n, 2)), rng.uniform(0.01, 0.5, (n, 2))])
    target = np.column_stack([rng.random((n, 2)), rng.uniform(0.0, 0.5, (n, 2))])
    grown = rescale_array(pred, offset_targets_array(pred, target, DEFAULT_DELTA))

    def corners(b, pad=0.0):
        return b[:, :2] - b[:, 2:] / 2 - pad, b[:, :2] + b[:, 2:] / 2 + pad

    g_lo, g_hi = corners(grown)
    tol = 1e-12
    ok = np.ones(n, dtype=bool)
    for lo, hi in (corners(pred), corners(target, DEFAULT_DELTA)):
        ok &= ((g_lo <= lo + tol) & (g_hi >= hi - tol)).all(axis=1)
    dt = time.perf_counter() - t0
    assert record(5, "offset enclosure", ok.all() and dt < 10, f"{int(ok.sum())}/{n} enclosed {dt:.2f}s")


def test_c06_nms_and_ap_match_references():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    nms_bad = ap_bad = 0
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(0, 9))
        bs = np.column_stack([rng.random((n, 2)), rng.uniform(0.0, 0.5, (n, 2))])
        scores = rng.choice([0.1, 0.3, 0.5, 0.9], n)
        tau = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))
        limit = None if rng.random() < 0.5 else int(rng.integers(1, 5))
        nms_bad += nms_indices(bs, scores, tau, limit) != ref_nms(list(bs), list(scores), tau, limit)

        gts = {im: [bs[k] + rng.normal(0, 0.02, 4) * [1, 1, 0, 0] for k in range(n) if rng.random() < 0.6]
               for im in ("a", "b")}
        dets = [(str(rng.choice(["a", "b"])), b, float(s)) for b, s in zip(bs, scores)]
        scenes = [GroundTruthScene.from_array(np.array(v).reshape(-1, 4), k) for k, v in gts.items()]
        thresh = float(rng.choice([0.3, 0.5, 0.75]))
        got = average_precision([ScoredDetection(Box(*b), s, 1, im) for im, b, s in dets], scenes, thresh).ap
        err = abs(got - ref_average_precision(dets, gts, thresh))
        worst = max(worst, err)
        ap_bad += err > 1e-12
    dt = time.perf_counter() - t0
    passed = nms_bad == 0 and ap_bad == 0 and dt < 60
    assert record(6, "NMS and AP vs references", passed,
                  f"nms mismatches={nms_bad} ap mismatches={ap_bad} max ap err={worst:.1e} {dt:.1f}s")


def test_c07_perfect_oracle_end_to_end():
    t0 = time.perf_counter()
    dets = oracle_stages([512, 256])
    base = PipelineConfig.two_stage(512, 256)
    val, _ = generate(SceneGenConfig(seed=99, image_size_px=512), 50, render=False)
    sweep = hyperparameter_sweep(None, val, dets, base, gammas=(3,))
    cfg = base.with_transition(sweep.best)
    scenes, _ = generate(SceneGenConfig(seed=0, image_size_px=512), 200, render=False)
    maps, _, reports = evaluate_pipeline(None, scenes, dets, cfg)
    within = all(r.boxes_used <= r.max_boxes == box_budget(cfg) for r in reports)
    dt = time.perf_counter() - t0
    passed = maps[0.5] == 1.0 and within and dt < 60
    assert record(7, "perfect-oracle cascade", passed,
                  f"mAP@0.5={maps[0.5]} within budget={within} transition={sweep.best} {dt:.1f}s")


def clustered(seed, size):
    return SceneGenConfig(seed=seed, image_size_px=size, objects_per_image=6, clustering="clustered",
                          cluster_spread=0.03)


def test_c08_cascade_beats_single_stage():
    t0 = time.perf_counter()
    oracle = OracleConfig("resolution_degraded", area_threshold_px=100.0)
    two = PipelineConfig.two_stage(256, 128, TransitionConfig(0.0, 0.9, 0.25, 5))
    one = PipelineConfig.single_stage(256)
    gains = []
    for seed in range(10):
        scenes, _ = generate(clustered(seed, 256), 50, render=False)
        m2 = evaluate_pipeline(None, scenes, oracle_stages([256, 128], oracle), two)[0][0.5]
        m1 = evaluate_pipeline(None, scenes, oracle_stages([256], oracle), one)[0][0.5]
        gains.append(m2 - m1)
    gain = float(np.mean(gains))
    dt = time.perf_counter() - t0
    assert record(8, "cascade benefit", gain >= 0.10 and dt < 300, f"mean gain={gain:.3f} {dt:.1f}s")


def test_c09_ablation_ordering():
    t0 = time.perf_counter()
    base = PipelineConfig.two_stage(512, 256, TransitionConfig(0.0, 0.6, 0.25, 5))
    kinds = ("full", "no_groups", "fixed_offsets", "no_offsets")
    scores = {k: [] for k in kinds}
    for seed in range(10):
        scenes, _ = generate(clustered(seed, 512), 50, render=False)
        oracle = OracleConfig("noisy", sigma=0.02, p_drop=0.1, p_spurious=0.01, seed=seed)
        dets = oracle_stages([512, 256], oracle)
        for k in kinds:
            scores[k].append(evaluate_pipeline(None, scenes, dets, base.with_ablation(Ablation(k)))[0][0.5])
    m = {k: float(np.mean(v)) for k, v in scores.items()}
    dt = time.perf_counter() - t0
    passed = (m["full"] >= m["no_groups"] and m["full"] >= m["fixed_offsets"] >= m["no_offsets"]
              and m["full"] - m["no_offsets"] >= 0.05 and dt < 600)
    detail = " ".join(f"{k}={v:.3f}" for k, v in m.items())
    assert record(9, "ablation ordering", passed, f"{detail} {dt:.1f}s")


@pytest.mark.slow
def test_c10_toy_training():
    t0 = time.perf_counter()
    scenes, images = generate(SceneGenConfig(seed=0, image_size_px=512), 500)
    val_scenes, val_images = generate(SceneGenConfig(seed=1, image_size_px=512), 100)
    s1, s2 = ToyPredictor(512), ToyPredictor(256, final_stage=True)
    cfg = PipelineConfig.two_stage(512, 256, TransitionConfig(0.0, 0.6, 0.25, 5))
    before = evaluate_pipeline(val_images, val_scenes, [s1, s2], cfg)[0][0.5]
    state = train_two_stage(s1, s2, images, scenes, TrainConfig(learning_rate=1e-3, epochs=50, batch_size=16, seed=0))
    after = evaluate_pipeline(val_images, val_scenes, [s1, s2], cfg)[0][0.5]
    fractions = []
    for stage in (1, 2):
        trace = stage_trace(state, stage)
        steps = list(zip(trace, trace[1:]))
        fractions.append(sum(b <= a for a, b in steps) / len(steps))
    dt = time.perf_counter() - t0
    passed = after - before >= 0.3 and min(fractions) >= 0.9 and dt < 1800
    assert record(10, "toy training", passed,
                  f"mAP@0.5 {before:.3f} -> {after:.3f} non-increasing stage1={fractions[0]:.2f} "
                  f"stage2={fractions[1]:.2f} {dt:.0f}s")


def test_c11_gamma_recommendation():
    t0 = time.perf_counter()

    def planted(k, n):
        # each object sits inside one 32px cell of a 512px image, one relevant crop per object
        return GroundTruthScene.from_array(
            [[(2 * j + 1.5) / 16, 0.5 / 16 + 0.5, 0.02, 0.02] for j in range(n)], str(k), 512)

    scenes = [planted(0, 2), planted(1, 2), planted(2, 3)]
    gamma = recommend_gamma(scenes, None, oracle_stages([512])[0], 512)
    dt = time.perf_counter() - t0
    assert record(11, "gamma recommendation", gamma == 3 and dt < 10, f"mean 7/3 -> gamma={gamma} {dt:.2f}s")


def snapshot(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c12_cli_determinism(tmp_path, monkeypatch, capsys):
    t0 = time.perf_counter()
    runs = []
    for name in ("first", "second"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        (work / "scene.json").write_text('{"image_size_px": 256, "objects_per_image": 4, "seed": 3}')
        codes = [
            main(["generate", "--config", "scene.json", "--count", "8", "--out", "data"]),
            main(["train", "--data", "data", "--res", "256,128", "--epochs", "3", "--delay", "1",
                  "--seed", "5", "--out", "ckpt"]),
            main(["eval", "--ckpt", "ckpt/checkpoint.json", "--data", "data", "--res", "256,128", "--out", "eval"]),
        ]
        stdout = capsys.readouterr().out
        runs.append((codes, snapshot(work), stdout))
    (c1, f1, o1), (c2, f2, o2) = runs
    same = c1 == c2 == [0, 0, 0] and f1 == f2 and o1 == o2
    dt = time.perf_counter() - t0
    assert record(12, "CLI determinism", same, f"{len(f1)} files byte-identical={f1 == f2} {dt:.1f}s")
