import json
import shutil

import pytest

from omnikit import cli, dataio
from omnikit.model import ModelConfig, count_parameters

TINY_MODEL = {"variant": "ubotnet", "base_channels": 8, "levels": 3, "height": 16, "width": 32}


def run(capsys, *argv):
    code = cli.main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["params", "--variant", "resnet"], ["train", "--lr", "abc"]])
def test_usage_errors_exit_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_help_exits_0(capsys):
    assert run(capsys, "--help")[0] == 0


def test_params_count(capsys):
    code, out, _ = run(capsys, "params", "--variant", "unet128", "--full-scale")
    assert code == 0
    assert f"{count_parameters(ModelConfig.full_scale('unet128')):,}" in out


def test_params_describe_from_config(capsys, tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps(TINY_MODEL))
    code, out, _ = run(capsys, "params", "--config", cfg, "--describe")
    assert code == 0 and "bot0.mhsa" in out and out.strip().splitlines()[-1].startswith("total")


def test_missing_config_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "params", "--config", tmp_path / "nope.json")
    assert code == 2 and "not found" in err


def test_invalid_config_value_is_usage_error(capsys, tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({**TINY_MODEL, "width": 30}))
    assert run(capsys, "params", "--config", cfg)[0] == 2


def test_generate_needs_out(capsys):
    assert run(capsys, "generate", "--height", 8)[0] == 2


def test_generate_then_validate(capsys, tmp_path):
    out = tmp_path / "ds"
    code, text, _ = run(capsys, "generate", "--height", 8, "--train-paths", 1, "--frames-per-path", 3,
                        "--seed", 4, "--variant", "static_vp", "--out", out)
    assert code == 0 and "wrote 6 frames" in text
    man = dataio.read_manifest(out)
    assert (man.width, man.height, man.seed, man.variant) == (16, 8, 4, "static_vp")
    code, text, _ = run(capsys, "validate", out)
    assert code == 0 and "0 violation" in text


def test_validate_failure_exits_1(capsys, small_dataset, tmp_path):
    root, man, _ = small_dataset
    dst = tmp_path / "ds"
    shutil.copytree(root, dst)
    (dst / man.records[1].depth).unlink()
    code, text, _ = run(capsys, "validate", dst / "manifest.jsonl")
    assert code == 1 and man.records[1].frame_id in text


def test_train_eval_roundtrip(capsys, small_dataset, tmp_path):
    root, _, _ = small_dataset
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "batch_size": 2}))
    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", root, "--config", cfg, "--max-steps", 2, "--epochs", 1,
                       "--deterministic", "--out", run_dir)
    assert code == 0 and "2 steps" in out
    rows = (run_dir / "steps.jsonl").read_text().splitlines()
    assert len(rows) == 2
    code, out, _ = run(capsys, "eval", run_dir / "final.ohk", root, "--out", tmp_path / "ev")
    assert code == 0 and "RMSE" in out
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["split"] == "test" and rep["images"] == 2


def test_train_without_dataset_is_usage_error(capsys):
    assert run(capsys, "train")[0] == 2


def test_eval_missing_checkpoint(capsys, small_dataset, tmp_path):
    root, _, _ = small_dataset
    assert run(capsys, "eval", tmp_path / "none.ohk", root)[0] == 2


def test_gradcheck_blocks_only(capsys):
    code, out, _ = run(capsys, "gradcheck", "--blocks-only")
    assert code == 0
    assert out.count("PASS") == 9 and "FAIL" not in out


def test_augpreview(capsys, small_dataset, tmp_path):
    root, man, _ = small_dataset
    out = tmp_path / "aug"
    code, _, _ = run(capsys, "augpreview", root, "--out", out, "--count", 2, "--variants", 2, "--seed", 1)
    assert code == 0
    assert len(list(out.glob("*.png"))) == 2 * 2 * 2
    first = {p.name: p.read_bytes() for p in out.glob("*.png")}
    run(capsys, "augpreview", root, "--out", out, "--count", 2, "--variants", 2, "--seed", 1)
    assert first == {p.name: p.read_bytes() for p in out.glob("*.png")}


def test_ablate(capsys, tmp_path):
    cfg = tmp_path / "ab.json"
    cfg.write_text(json.dumps({
        "generate": {"height": 8, "train_paths": 1, "frames_per_path": 2, "test_frames": 1,
                     "buildings": 2, "trees": 1, "vehicles": 1, "pedestrians": 1},
        "train": {"model": {**TINY_MODEL, "height": 8, "width": 16}, "epochs": 1, "max_steps": 1, "batch_size": 2},
    }))
    code, out, _ = run(capsys, "ablate", "--config", cfg, "--seed", 3, "--deterministic", "--out", tmp_path / "ab")
    assert code == 0
    for label in ("Static", "Static + VP", "Static + VP + DL"):
        assert label in out
    assert (tmp_path / "ab" / "ablation.txt").read_text().strip() == out.strip()
