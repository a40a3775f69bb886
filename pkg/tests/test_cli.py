import json

import pytest

from odgi.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def dataset(tmp_path):
    cfg = tmp_path / "scene.json"
    cfg.write_text(json.dumps({"image_size_px": 256, "objects_per_image": 4}))
    assert main(["generate", "--config", str(cfg), "--count", "6", "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


@pytest.mark.parametrize(
    "args,boxes,pixels",
    [
        (["--res1", "512", "--res2", "256", "--gamma", "3"], 448, 458_752),
        (["--res1", "512", "--res2", "256", "--gamma", "6"], 640, 655_360),
        (["--res1", "1024"], 1024, 1_048_576),
        (["--res", "256,128", "--gamma", "6"], 160, 163_840),
    ],
)
def test_budget(args, boxes, pixels, capsys):
    code, out, _ = run(["budget", *args], capsys)
    rep = json.loads(out)
    assert code == EXIT_OK and rep["max_boxes"] == boxes and rep["pixels"] == pixels


def test_budget_rejects_bad_resolution(capsys):
    code, _, err = run(["budget", "--res1", "500"], capsys)
    assert code == EXIT_CONFIG and "unsupported resolution" in err


def test_generate_defaults_documented(capsys):
    assert main(["generate", "--help"]) == EXIT_OK
    assert "objects_per_image=3.0" in capsys.readouterr().out


def test_generate_writes_manifest_and_files(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seeds"] == {"seed": 0}
    assert len((dataset / "annotations.jsonl").read_text().splitlines()) == 6
    assert len(list((dataset / "images").iterdir())) == 6


def test_generate_bad_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"clustering": "grid"}')
    code, _, err = run(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_CONFIG and "clustering" in err
    (tmp_path / "d.json").write_text("[1, 2]")
    assert main(["generate", "--config", str(tmp_path / "d.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_eval_perfect_oracle(dataset, tmp_path, capsys):
    code, out, _ = run(["eval", "--oracle", "perfect", "--data", str(dataset), "--res", "256,128",
                        "--tau-low", "0", "--tau-high", "0.6", "--gamma", "4", "--out", str(tmp_path / "e")], capsys)
    rep = json.loads(out)
    assert code == EXIT_OK
    assert rep["map"] == {"0.5": 1.0, "0.75": 1.0}
    assert rep["max_boxes"] == 64 + 4 * 16 and rep["pixels"] == 256**2 + 4 * 128**2
    assert rep["max_boxes_used"] <= rep["max_boxes"]
    assert (tmp_path / "e" / "detections.jsonl").exists()
    assert (tmp_path / "e" / "metrics.csv").read_text().startswith("iou,map,max_boxes")


def test_eval_ablation_switch(dataset, capsys):
    code, out, _ = run(["eval", "--oracle", "perfect", "--data", str(dataset), "--res", "256,128",
                        "--ablation", "no_groups"], capsys)
    assert code == EXIT_OK and json.loads(out)["ablation"] == "no_groups"
    code, _, err = run(["eval", "--oracle", "perfect", "--data", str(dataset), "--ablation", "bogus"], capsys)
    assert code == EXIT_CONFIG


def test_eval_missing_data(tmp_path, capsys):
    code, _, err = run(["eval", "--oracle", "perfect", "--data", str(tmp_path / "none")], capsys)
    assert code == EXIT_IO and "I/O" in err


def test_eval_needs_one_detector_source(dataset, capsys):
    assert run(["eval", "--data", str(dataset)], capsys)[0] == EXIT_CONFIG


def test_train_and_eval_checkpoint(dataset, tmp_path, capsys):
    out = tmp_path / "t"
    code, _, _ = run(["train", "--data", str(dataset), "--res", "256,128", "--epochs", "3", "--delay", "1",
                      "--out", str(out)], capsys)
    assert code == EXIT_OK
    rows = (out / "loss.csv").read_text().splitlines()
    # one row per epoch per trained stage: 3 for stage 1, 2 for stage 2
    assert len(rows) == 1 + 3 + 2
    code, res, _ = run(["eval", "--ckpt", str(out / "checkpoint.json"), "--data", str(dataset), "--res", "256,128"],
                       capsys)
    assert code == EXIT_OK and "map" in json.loads(res)
    code, _, err = run(["eval", "--ckpt", str(out / "checkpoint.json"), "--data", str(dataset), "--res", "512,256"],
                       capsys)
    assert code == EXIT_CONFIG


def test_train_single_stage(dataset, tmp_path, capsys):
    code, _, _ = run(["train", "--stages", "1", "--res", "256", "--data", str(dataset), "--epochs", "2",
                      "--out", str(tmp_path / "s")], capsys)
    assert code == EXIT_OK
    assert len((tmp_path / "s" / "loss.csv").read_text().splitlines()) == 3


def test_train_resume_is_deterministic(dataset, tmp_path, capsys):
    base = ["train", "--data", str(dataset), "--res", "256,128", "--delay", "1", "--seed", "2"]
    assert main([*base, "--epochs", "3", "--out", str(tmp_path / "full")]) == 0
    assert main([*base, "--epochs", "2", "--out", str(tmp_path / "half")]) == 0
    assert main([*base, "--epochs", "3", "--resume", str(tmp_path / "half" / "checkpoint.json"),
                 "--out", str(tmp_path / "resumed")]) == 0
    capsys.readouterr()
    for name in ("checkpoint.json", "loss.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()


def test_train_numeric_failure(dataset, tmp_path, capsys):
    code, _, err = run(["train", "--data", str(dataset), "--res", "256,128", "--lr", "1e6", "--epochs", "50",
                        "--out", str(tmp_path / "x")], capsys)
    assert code == EXIT_NUMERIC and "numeric" in err


def test_train_stage_count_mismatch(dataset, tmp_path, capsys):
    code, _, _ = run(["train", "--stages", "2", "--res", "256", "--data", str(dataset), "--out", str(tmp_path / "x")],
                     capsys)
    assert code == EXIT_CONFIG


def test_sweep_outputs(dataset, tmp_path, capsys):
    out = tmp_path / "sw"
    args = ["sweep", "--oracle", "perfect", "--data", str(dataset), "--res", "256,128", "--tau-lows", "0,0.1",
            "--tau-highs", "0.6,0.9", "--tau-nmss", "0.25", "--gammas", "3,4", "--out", str(out)]
    assert main(args) == EXIT_OK
    first = (out / "sweep.csv").read_bytes()
    assert len(first.decode().splitlines()) == 1 + 8
    best = json.loads((out / "best.json").read_text())
    assert best["map50"] == 1.0
    assert main(args) == EXIT_OK
    assert (out / "sweep.csv").read_bytes() == first
    capsys.readouterr()


def test_threads_env(dataset, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ODGI_THREADS", "0")
    assert main(["generate", "--count", "1", "--out", str(tmp_path / "g")]) == EXIT_CONFIG
    monkeypatch.setenv("ODGI_THREADS", "3")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"image_size_px": 256, "objects_per_image": 4}))
    assert main(["generate", "--config", str(cfg), "--count", "6", "--out", str(tmp_path / "g3")]) == EXIT_OK
    for f in ("annotations.jsonl", "images/000003.img"):
        assert (tmp_path / "g3" / f).read_bytes() == (dataset / f).read_bytes()


def test_unknown_flag_is_config_error(capsys):
    assert main(["budget", "--nope"]) == EXIT_CONFIG
