import json

import pytest

from pruneseg.cli import main
from pruneseg.config import TrainConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main(["generate-data", "--out", str(root / "data"), "--count", "6",
               "--dims", "16,16,16", "--seed", "4"])
    assert rc == 0
    cfg = TrainConfig(
        dataset=str(root / "data" / "manifest.json"), out_dir=str(root / "run"),
        mode="prune", model={"depth": 2, "channels": [4, 8],
                           "kernels": [[1, 1, 1], [1, 3, 3]]},
        num_classes=3, optimizer={"kind": "adamw", "lr": 1e-3},
        batch_size=1, patch_size=(8, 8, 8), epochs=2, iterations_per_epoch=2,
        calibration_count=2, initial_p=1, seed=1, precision="float32")
    (root / "config.json").write_text(cfg.to_json())
    return root


def test_train_eval_inspect_timeline(workspace, capsys):
    assert main(["train", "--config", str(workspace / "config.json")]) == 0
    out = capsys.readouterr().out
    assert "final checkpoint" in out

    ckpt = workspace / "run" / "final.ckpt"
    assert main(["eval", "--config", str(workspace / "config.json"),
                 "--ckpt", str(ckpt), "--split", "test"]) == 0
    out = capsys.readouterr().out
    assert "mean_dsc" in out
    assert (workspace / "run" / "report_test.json").exists()

    assert main(["inspect", "--ckpt", str(ckpt), "--json"]) == 0
    out = capsys.readouterr().out
    assert "enc_1" in out and "legend" in out and '"branch_states"' in out

    tl_path = workspace / "tl.json"
    assert main(["timeline", "--events", str(workspace / "run" / "events.jsonl"),
                 "--out", str(tl_path), "--epochs", "2"]) == 0
    doc = json.loads(tl_path.read_text())
    assert doc["prm_ids"] == ["enc_1", "bn", "dec_1"]
    assert len(doc["epochs"]) == 2


def test_generate_data_writes_sidecars(workspace):
    assert (workspace / "data" / "img_0000.raw").exists()
    assert (workspace / "data" / "img_0000.raw.json").exists()
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(manifest["volumes"]) == 6


def test_bad_dims_argument():
    with pytest.raises(SystemExit):
        main(["generate-data", "--out", "x", "--count", "1", "--dims", "16,16"])
