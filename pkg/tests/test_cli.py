import csv
import os

import pytest

from afrd import storage
from afrd.config import settings
from afrd.main import main
from afrd.services.dataset import read_index
from afrd.services.network import model_init

TINY_INI = """\
[model]
stem_channels = 4
channels = [4, 6, 8]

[train]
batch_size = 4

[score]
smooth_sigma = 1.0
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return str(path)


def _generate(out, *extra) -> int:
    args = ["generate", "--out", str(out), "--size", "16", "--lightings", "6", "--seed", "1"]
    return main(args + ["--train", "4", "--test-normal", "2", "--test-anomalous", "2", *extra])


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "data"
    assert _generate(root) == 0
    return root


def _metrics(report_dir) -> dict[str, str]:
    with open(os.path.join(report_dir, "metrics.csv"), encoding="utf-8") as f:
        return dict(list(csv.reader(f))[1:])


class TestGenerate:
    def test_prints_tree_hash(self, tmp_path, capsys):
        assert _generate(tmp_path / "a") == 0
        first = capsys.readouterr().out.strip()
        assert _generate(tmp_path / "b") == 0
        second = capsys.readouterr().out.strip()
        assert len(first) == 64
        assert first == second

    def test_seed_changes_hash(self, tmp_path, capsys):
        _generate(tmp_path / "a")
        first = capsys.readouterr().out.strip()
        main(["generate", "--out", str(tmp_path / "b"), "--size", "16", "--seed", "2", "--train", "4",
              "--test-normal", "2", "--test-anomalous", "2"])
        assert capsys.readouterr().out.strip() != first

    def test_layout_and_echo(self, dataset):
        index = read_index(str(dataset))
        assert index.n_lightings == 6
        assert len(index.split("train")) == 4
        assert (dataset / "effective_config.ini").exists()
        assert (dataset / "scene.json").exists()

    def test_zero_counts_give_empty_index(self, tmp_path):
        out = tmp_path / "empty"
        assert main(["generate", "--out", str(out), "--train", "0", "--test", "0", "--lightings", "3"]) == 0
        index = read_index(str(out))
        assert index.entries == []
        assert index.n_lightings == 3

    def test_test_total_is_split_by_rate(self, tmp_path):
        out = tmp_path / "d"
        assert main(["generate", "--out", str(out), "--size", "16", "--train", "0", "--test", "4",
                     "--anomaly-rate", "0.25"]) == 0
        labels = [e.label.value for e in read_index(str(out)).split("test")]
        assert labels.count("anomalous") == 1
        assert labels.count("normal") == 3

    def test_missing_out(self):
        assert main(["generate", "--train", "0"]) == 2

    def test_negative_count(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--train", "-3"]) == 2

    def test_unknown_flag(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--frobnicate"]) == 2

    def test_invalid_scene(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--size", "8"]) == 2


class TestTrain:
    def test_zero_epochs_writes_initial_model(self, dataset, tiny_ini, tmp_path, capsys):
        ckpt = tmp_path / "run" / "model.ckpt"
        capsys.readouterr()
        code = main(["train", "--config", tiny_ini, "--data", str(dataset), "--out-ckpt", str(ckpt),
                     "--epochs", "0", "--seed", "3"])
        assert code == 0
        assert capsys.readouterr().out.strip() == str(ckpt)
        model = storage.load_checkpoint(str(ckpt))
        assert model.seed == 3
        assert model.config.n_lightings == 6
        assert model.config.image_size == 16
        assert ckpt.read_bytes() == storage.checkpoint_bytes(model_init(model.config, 3))
        assert (ckpt.parent / "effective_config.ini").exists()

    def test_single_lighting_variant(self, dataset, tiny_ini, tmp_path):
        ckpt = tmp_path / "single.ckpt"
        code = main(["train", "--config", tiny_ini, "--data", str(dataset), "--out-ckpt", str(ckpt),
                     "--epochs", "1", "--fusion", "single:4"])
        assert code == 0
        model = storage.load_checkpoint(str(ckpt))
        assert model.config.lightings == [4]
        assert model.config.n_lightings == 1
        assert (tmp_path / "single.train.csv").exists()
        assert (tmp_path / "single.train.log").exists()

    def test_lighting_out_of_range(self, dataset, tiny_ini, tmp_path):
        code = main(["train", "--config", tiny_ini, "--data", str(dataset), "--out-ckpt",
                     str(tmp_path / "x.ckpt"), "--fusion", "single:9"])
        assert code == 2

    def test_missing_dataset(self, tiny_ini, tmp_path):
        code = main(["train", "--config", tiny_ini, "--data", str(tmp_path / "nowhere"), "--out-ckpt",
                     str(tmp_path / "x.ckpt")])
        assert code == 1

    def test_missing_data_flag(self, tmp_path):
        assert main(["train", "--out-ckpt", str(tmp_path / "x.ckpt")]) == 2


class TestEval:
    def test_oracle_scores_perfectly(self, dataset, tmp_path, capsys):
        report = tmp_path / "report"
        capsys.readouterr()
        code = main(["eval", "--data", str(dataset), "--report", str(report), "--scorer", "oracle",
                     "--sigma", "0"])
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        assert out == ["i_auroc 1.000000", "p_auroc 1.000000"]
        metrics = _metrics(report)
        assert float(metrics["i_auroc"]) == 1.0
        assert float(metrics["p_auroc"]) == 1.0

    def test_generate_train_eval(self, dataset, tiny_ini, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--config", tiny_ini, "--data", str(dataset), "--out-ckpt", str(ckpt),
                     "--epochs", "1"]) == 0
        report, maps = tmp_path / "report", tmp_path / "maps"
        code = main(["eval", "--config", tiny_ini, "--data", str(dataset), "--ckpt", str(ckpt),
                     "--report", str(report), "--maps-dir", str(maps)])
        assert code == 0
        with open(report / "scores.csv", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["sample_id", "label", "image_score"]
        assert [r[0] for r in rows[1:]] == ["test_00000", "test_00001", "test_00002", "test_00003"]
        assert 0.0 <= float(_metrics(report)["i_auroc"]) <= 1.0
        assert sorted(p.name for p in maps.glob("*.pgm")) == [f"test_0000{i}.pgm" for i in range(4)]

    def test_missing_checkpoint(self, dataset, tmp_path):
        code = main(["eval", "--data", str(dataset), "--ckpt", str(tmp_path / "none.ckpt"), "--report",
                     str(tmp_path / "r")])
        assert code == 1

    def test_corrupt_checkpoint(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + bytes(16))
        code = main(["eval", "--data", str(dataset), "--ckpt", str(bad), "--report", str(tmp_path / "r")])
        assert code == 1


class TestAblate:
    def test_six_lightings(self, dataset, tiny_ini, tmp_path, capsys):
        out = tmp_path / "ablation"
        capsys.readouterr()
        code = main(["ablate", "--config", tiny_ini, "--data", str(dataset), "--out", str(out),
                     "--epochs", "1", "--seeds", "0"])
        assert code == 0
        assert capsys.readouterr().out.strip() == str(out / "summary.md")
        with open(out / "ablation.csv", encoding="utf-8") as f:
            variants = [r[0] for r in list(csv.reader(f))[1:]]
        assert variants == [f"single:{j}" for j in range(6)] + ["mean", "attention"]
        assert (out / "effective_config.ini").exists()

    def test_single_lighting_dataset(self, tiny_ini, tmp_path):
        data = tmp_path / "one"
        assert main(["generate", "--out", str(data), "--size", "16", "--lightings", "1", "--train", "3",
                     "--test-normal", "2", "--test-anomalous", "2"]) == 0
        out = tmp_path / "ablation"
        assert main(["ablate", "--config", tiny_ini, "--data", str(data), "--out", str(out), "--epochs", "1",
                     "--seeds", "0"]) == 0
        with open(out / "ablation.csv", encoding="utf-8") as f:
            rows = {r[0]: r[1:] for r in list(csv.reader(f))[1:]}
        assert list(rows) == ["single:0", "attention"]
        # with one lighting both variants are the same network
        assert rows["single:0"] == rows["attention"]

    @pytest.mark.parametrize("seeds", ["", "a,b", "-1"])
    def test_bad_seed_list(self, dataset, tmp_path, seeds):
        assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path), "--seeds", seeds]) == 2

    def test_missing_data(self, tmp_path):
        assert main(["ablate", "--out", str(tmp_path)]) == 2


class TestLogLevel:
    def test_unknown_flag_value(self, tmp_path):
        assert main(["--log-level", "loud", "generate", "--out", str(tmp_path / "d"), "--train", "0"]) == 2
        assert not (tmp_path / "d").exists()

    def test_flag_is_case_insensitive(self, tmp_path):
        out = tmp_path / "d"
        assert main(["--log-level", "debug", "generate", "--out", str(out), "--train", "0", "--test", "0"]) == 0

    def test_unknown_environment_value(self, tmp_path, monkeypatch):
        monkeypatch.setattr(settings, "log_level", "loud")
        assert main(["generate", "--out", str(tmp_path / "d"), "--train", "0"]) == 2
        assert main(["--log-level", "info", "generate", "--out", str(tmp_path / "d"), "--train", "0",
                     "--test", "0"]) == 0
