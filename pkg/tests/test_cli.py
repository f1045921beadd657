import json
import subprocess
import sys

import pytest
import yaml

from arn.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_GRADS,
    EXIT_NUMERIC,
    EXIT_OK,
    METRIC_COLUMNS,
    load_config,
    main,
)
from arn.core import VARIANT_LABELS, ConfigError

TINY = {
    "num_source_ids": 4,
    "num_target_ids": 4,
    "images_per_id": 4,
    "batch_size": 8,
    "identities_per_batch": 2,
    "images_per_identity": 2,
    "epochs": 2,
    "backbone_warmup_epochs": 1,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def write_config(tmp_path, **values):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({**TINY, **values}))
    return str(path)


class TestConfig:
    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("epochs: 2\nlearning_rate: 0.1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(str(path))

    def test_data_seed_and_seed_are_separate(self, tmp_path):
        cfg = load_config(write_config(tmp_path, seed=3, data_seed=9))
        assert cfg.train.seed == 3 and cfg.synth.seed == 9

    def test_image_shape_shared(self, tmp_path):
        cfg = load_config(write_config(tmp_path, image_shape=[24, 24, 3]))
        assert cfg.synth.image_shape == cfg.model.image_shape == (24, 24, 3)

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


class TestGenData:
    def test_default_counts(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "d")]) == EXIT_OK
        stats = json.loads((tmp_path / "d" / "stats.json").read_text())
        assert stats["train_source"]["images"] + stats["train_target"]["images"] == 400
        assert stats["train_source"]["cameras"] == {"1": 100, "2": 100}
        assert len(list((tmp_path / "d" / "data" / "gallery").iterdir())) == 180
        assert "train_source" in capsys.readouterr().out

    def test_same_seed_same_stats(self, tmp_path, tiny_config):
        for name in ("a", "b"):
            assert main(["gen-data", "--config", tiny_config, "--seed", "4", "--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a" / "stats.json").read_bytes() == (tmp_path / "b" / "stats.json").read_bytes()

    def test_images_per_id_one(self, tmp_path, capsys):
        code = main(["gen-data", "--config", write_config(tmp_path, images_per_id=1), "--out", str(tmp_path / "d")])
        assert code == EXIT_CONFIG
        assert "images_per_id" in capsys.readouterr().err


class TestTrain:
    def test_outputs_and_manifest(self, tmp_path, tiny_config):
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_config, "--out", str(out), "--ablation", "no_private", "--plot"]) == EXIT_OK
        metrics = json.loads((out / "metrics.json").read_text())
        assert {"rank1", "rank5", "rank10", "rank20", "mAP", "num_queries", "protocol"} <= set(metrics)
        assert 0.0 <= metrics["mAP"] <= 1.0
        rows = (out / "cmc.csv").read_text().splitlines()
        assert rows[0] == "rank,accuracy" and len(rows) == 21
        assert (out / "cmc.png").stat().st_size > 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["ablation_flags"]["use_private"] is False
        assert manifest["ablation_flags"]["use_diff"] is False
        for rel in manifest["outputs"].values():
            assert (out / rel).exists()
        assert "total_seconds" in manifest["timings"] and manifest["version"]

    def test_manifest_config_reruns(self, tmp_path, tiny_config):
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_config, "--out", str(out)]) == EXIT_OK
        snapshot = json.loads((out / "manifest.json").read_text())["config"]
        replay = tmp_path / "replay.yaml"
        replay.write_text(yaml.safe_dump(snapshot))
        assert main(["train", "--config", str(replay), "--out", str(tmp_path / "again")]) == EXIT_OK
        assert (out / "metrics.json").read_bytes() == (tmp_path / "again" / "metrics.json").read_bytes()

    def test_rerun_is_byte_identical(self, tmp_path, tiny_config):
        for name in ("a", "b"):
            assert main(["train", "--config", tiny_config, "--seed", "2", "--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()

    def test_paper_weights_exit_numeric(self, tmp_path, capsys):
        cfg = write_config(tmp_path, alpha=0.01, beta=2.0, gamma=1500.0, epochs=6)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_NUMERIC
        assert "non-finite" in capsys.readouterr().err
        assert json.loads((tmp_path / "r" / "manifest.json").read_text())["status"] == "numeric_error"

    def test_missing_dataset_exit_data(self, tmp_path):
        cfg = write_config(tmp_path, dataset=str(tmp_path / "nowhere"))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_DATA

    def test_invalid_batch(self, tmp_path, capsys):
        assert main(["train", "--config", write_config(tmp_path, batch_size=10), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
        assert "batch_size / 2" in capsys.readouterr().err


class TestAblate:
    def test_table(self, tmp_path, tiny_config):
        out = tmp_path / "abl"
        assert main(["ablate", "--config", tiny_config, "--seed", "0", "--out", str(out)]) == EXIT_OK
        table = json.loads((out / "ablation.json").read_text())
        rows = table["rows"]
        assert [r["label"] for r in rows] == [VARIANT_LABELS[k] for k in ("rec_only", "no_supervised", "no_private", "full")]
        assert "Ours w/o E_S, E_T" in [r["label"] for r in rows]
        assert all(set(col for col, _ in METRIC_COLUMNS) <= set(r) for r in rows)
        assert [col for col, _ in METRIC_COLUMNS] == ["R1", "R5", "R10", "R20", "mAP"]
        text = (out / "ablation.txt").read_text().splitlines()
        assert len(text) == 5
        for row, line in zip(rows, text[1:]):
            assert line.startswith(row["label"])
            numbers = [float(x) for x in line[len(row["label"]) :].split()]
            assert numbers == [row[col] for col, _ in METRIC_COLUMNS]


class TestEval:
    @pytest.fixture
    def checkpoint(self, tmp_path, tiny_config):
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_config, "--out", str(out)]) == EXIT_OK
        return out / "checkpoints" / "last.npz"

    def test_trained_checkpoint(self, tmp_path, tiny_config, checkpoint):
        out = tmp_path / "ev"
        assert main(["eval", "--config", tiny_config, "--checkpoint", str(checkpoint), "--out", str(out)]) == EXIT_OK
        metrics = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= metrics["rank1"] <= 1.0 and 0.0 <= metrics["mAP"] <= 1.0
        trained = json.loads((tmp_path / "run" / "metrics.json").read_text())
        assert metrics == trained

    def test_shape_mismatch(self, tmp_path, checkpoint, capsys):
        cfg = write_config(tmp_path, image_shape=[24, 24, 3])
        assert main(["eval", "--config", cfg, "--checkpoint", str(checkpoint), "--out", str(tmp_path / "ev")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "(32, 32, 3)" in err and "(24, 24, 3)" in err

    def test_cameraless_directory(self, tmp_path, tiny_config, checkpoint):
        assert main(["gen-data", "--config", tiny_config, "--out", str(tmp_path / "d")]) == EXIT_OK
        data = tmp_path / "d" / "data"
        for path in data.glob("*/*.png"):
            ident, _, index = path.stem.split("_")
            path.rename(path.with_name(f"{ident}_{index}.png"))
        args = ["eval", "--config", tiny_config, "--checkpoint", str(checkpoint), "--data", str(data)]
        assert main(args + ["--protocol", "plain", "--out", str(tmp_path / "p")]) == EXIT_OK
        with pytest.warns(RuntimeWarning, match="falls back"):
            assert main(args + ["--protocol", "cross_camera", "--out", str(tmp_path / "c")]) == EXIT_OK
        assert json.loads((tmp_path / "c" / "metrics.json").read_text())["protocol"] == "plain"

    def test_untrained_model(self, tmp_path, tiny_config):
        assert main(["eval", "--config", tiny_config, "--out", str(tmp_path / "ev")]) == EXIT_OK
        assert (tmp_path / "ev" / "cmc.csv").exists()


class TestCheckGrads:
    def test_pass(self, capsys):
        assert main(["check-grads", "--seed", "0"]) == EXIT_OK
        out = capsys.readouterr().out
        for name in ("classification", "contrastive", "reconstruction", "difference"):
            assert name in out
        assert "epsilon=1e-06" in out and "coords=100" in out

    def test_corrupted_gradient(self, capsys):
        assert main(["check-grads", "--corrupt", "reconstruction"]) == EXIT_GRADS
        captured = capsys.readouterr()
        assert "reconstruction" in captured.err
        assert "FAIL" in captured.out


def test_module_entry_point():
    result = subprocess.run([sys.executable, "-m", "arn", "--help"], capture_output=True, text=True)
    assert result.returncode == 0
    for command in ("gen-data", "train", "ablate", "eval", "check-grads"):
        assert command in result.stdout
