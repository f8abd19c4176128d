import json
import shutil

import numpy as np
import pytest
from PIL import Image

from unishadow.cli import main
from unishadow.data import load_manifest

TINY = ["--set", "image_width=32", "--set", "image_height=24", "--set", "gen_base_width=8",
        "--set", "gen_downsamples=2", "--set", "gen_res_blocks=1", "--set", "critic_base_width=8",
        "--set", "critic_layers=3", "--set", "backbone_vgg19=random", "--set", "backbone_vgg16=random",
        "--set", "val_fraction=0", "--set", "max_steps=2"]


@pytest.fixture(scope="module")
def trained(synthetic_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data-root", str(synthetic_root), "--output-dir", str(out), "--seed", "7", *TINY]) == 0
    return out


def test_train_writes_resolved_config_and_artifacts(trained):
    cfg = (trained / "config.cfg").read_text()
    assert "seed = 7" in cfg and "lambda_sfr = 5.0" in cfg and "max_steps = 2" in cfg
    assert json.loads((trained / "run_config.json").read_text())["command"] == "train"
    assert (trained / "checkpoints" / "last.ckpt").exists()
    assert len((trained / "metrics.jsonl").read_text().splitlines()) == 12


def test_train_twice_gives_identical_logs(synthetic_root, trained, tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text(f"data_root = {synthetic_root}\n")
    assert main(["train", "--config", str(cfg_file), "--output-dir", str(tmp_path / "again"), "--seed", "7",
                 "--deterministic", *TINY]) == 0
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_flags_override_config_file(synthetic_root, tmp_path, capsys):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("seed = 3\nlambda_id = 4\n")
    out = tmp_path / "o"
    main(["train", "--config", str(cfg_file), "--data-root", str(synthetic_root), "--output-dir", str(out),
          "--seed", "9", *TINY])
    text = (out / "config.cfg").read_text()
    assert "seed = 9" in text and "lambda_id = 4.0" in text


def test_infer_keeps_dimensions(trained, synthetic_root, tmp_path):
    src = sorted((synthetic_root / "test_A").iterdir())[0]
    dest = tmp_path / "out.png"
    assert main(["infer", "--checkpoint", str(trained / "checkpoints" / "last.ckpt"),
                 "--input", str(src), "--output", str(dest)]) == 0
    assert Image.open(dest).size == Image.open(src).size
    assert main(["infer", "--checkpoint", str(trained / "checkpoints" / "last.ckpt"), "--input",
                 str(synthetic_root / "test_A"), "--output", str(tmp_path / "many"), "--float-output"]) == 0
    arrays = sorted((tmp_path / "many").glob("*.npy"))
    assert len(arrays) == len(list((synthetic_root / "test_A").iterdir()))
    assert np.load(arrays[0]).dtype == np.float32


def test_eval_ground_truth_copies(synthetic_root, tmp_path, capsys):
    preds = tmp_path / "preds"
    shutil.copytree(synthetic_root / "test_C", preds)
    before = sorted(p.name for p in (synthetic_root / "test_A").iterdir())
    assert main(["eval", "--data-root", str(synthetic_root), "--pred-dir", str(preds),
                 "--output-dir", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert (report["rmse_all"], report["rmse_shadow"], report["rmse_nonshadow"]) == (0.0, 0.0, 0.0)
    assert "RMSE(A)=0.00" in capsys.readouterr().out
    assert sorted(p.name for p in (synthetic_root / "test_A").iterdir()) == before


def test_eval_with_checkpoint(trained, synthetic_root, capsys):
    assert main(["eval", "--data-root", str(synthetic_root), "--checkpoint",
                 str(trained / "checkpoints" / "last.ckpt"), "--size", "32x24"]) == 0
    assert "MAE in CIELAB" in capsys.readouterr().out


def test_mask_from_pair(synthetic_root, tmp_path):
    manifest = load_manifest(synthetic_root, "test")
    rec = manifest.records[0]
    dest = tmp_path / "m.png"
    assert main(["mask", "--input", str(rec.shadow_path), "--deshadowed", str(rec.free_path),
                 "--output", str(dest)]) == 0
    ours = np.asarray(Image.open(dest)) > 127
    truth = np.asarray(Image.open(rec.mask_path)) > 127
    assert ours.shape == truth.shape
    assert (ours == truth).mean() > 0.9


def test_profile(tmp_path, capsys):
    csv = tmp_path / "o.csv"
    csv.write_text("name,total_params,train_gflops\nother,1000000,5\n")
    assert main(["profile", "--resolution", "640x480", "--compare", str(csv), "--output-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    report = json.loads((tmp_path / "profile.json").read_text())
    assert report["generator_params"] == 45_593_347
    assert "other" in out and "this model" in out


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv, cls", [
    (["profile", "--set", "no_such_key=1"], "ConfigError"),
    (["profile", "--set", "epochs=abc"], "ConfigError"),
    (["eval", "--data-root", "/nonexistent", "--pred-dir", "/tmp"], "DatasetError"),
    (["infer", "--checkpoint", "/nonexistent.ckpt", "--input", "x.png", "--output", "y.png"], "FileNotFoundError"),
])
def test_runtime_errors_exit_1_with_one_line(argv, cls, capsys):
    assert main(argv) == 1
    err = [line for line in capsys.readouterr().err.splitlines() if line.startswith("error:")]
    assert len(err) == 1 and err[0].startswith(f"error: {cls}: ")


def test_missing_predictions_fail(synthetic_root, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--data-root", str(synthetic_root), "--pred-dir", str(tmp_path / "empty")]) == 1
    assert "EvaluationError" in capsys.readouterr().err
