import csv

import numpy as np
import pytest

from afrd import storage
from afrd.config import TrainConfig
from afrd.errors import CheckpointFormatError
from afrd.models import AnomalyResult, Label
from afrd.services.network import model_init
from afrd.services.scoring import OracleScorer, evaluate, score
from afrd.services.trainer import train

from .conftest import make_sets


@pytest.fixture
def trained(tiny_config):
    model = model_init(tiny_config, seed=2)
    _, state = train(model, make_sets(4), TrainConfig(epochs=1, batch_size=2))
    return model, state


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, trained, tmp_path):
        model, state = trained
        first = tmp_path / "a.ckpt"
        storage.save_checkpoint(model, state, str(first))
        loaded, loaded_state = storage.load_checkpoint_with_state(str(first))
        second = tmp_path / "b.ckpt"
        storage.save_checkpoint(loaded, loaded_state, str(second))
        assert first.read_bytes() == second.read_bytes()
        assert loaded_state.step == state.step

    def test_loaded_model_matches(self, trained, tmp_path):
        model, state = trained
        path = str(tmp_path / "m.ckpt")
        storage.save_checkpoint(model, state, path)
        loaded = storage.load_checkpoint(path)
        assert loaded.config == model.config
        assert loaded.seed == model.seed
        for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        for (_, a), (_, b) in zip(model.named_buffers(), loaded.named_buffers()):
            np.testing.assert_array_equal(a, b)

    def test_reloaded_model_scores_identically(self, trained, tmp_path):
        model, state = trained
        path = str(tmp_path / "m.ckpt")
        storage.save_checkpoint(model, state, path)
        loaded = storage.load_checkpoint(path)
        sets = make_sets(2, seed=5) + make_sets(2, seed=6, label=Label.ANOMALOUS)
        before = evaluate(model, sets)
        after = evaluate(loaded, sets)
        assert [r[2] for r in before.rows] == [r[2] for r in after.rows]
        np.testing.assert_array_equal(score(model, sets[0]).map, score(loaded, sets[0]).map)

    def test_header_layout(self, trained):
        model, state = trained
        data = storage.checkpoint_bytes(model, state)
        assert data[:4] == b"AFRD"
        assert int.from_bytes(data[4:8], "little") == storage.VERSION

    def test_without_optimizer_state(self, tiny_config, tmp_path):
        model = model_init(tiny_config)
        path = str(tmp_path / "init.ckpt")
        storage.save_checkpoint(model, None, path)
        loaded, state = storage.load_checkpoint_with_state(path)
        assert state.step == 0 and state.exp_avg == {}

    def test_corrupted_magic(self, trained, tmp_path):
        path = tmp_path / "bad.ckpt"
        data = bytearray(storage.checkpoint_bytes(*trained))
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="magic"):
            storage.load_checkpoint(str(path))

    def test_unsupported_version(self, trained, tmp_path):
        path = tmp_path / "bad.ckpt"
        data = bytearray(storage.checkpoint_bytes(*trained))
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="version"):
            storage.load_checkpoint(str(path))

    @pytest.mark.parametrize("keep", [3, 10, 200, -1])
    def test_truncated(self, trained, tmp_path, keep):
        path = tmp_path / "short.ckpt"
        data = storage.checkpoint_bytes(*trained)
        path.write_bytes(data[:keep])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            storage.load_checkpoint(str(path))

    def test_trailing_bytes(self, trained, tmp_path):
        path = tmp_path / "long.ckpt"
        path.write_bytes(storage.checkpoint_bytes(*trained) + b"\0\0")
        with pytest.raises(CheckpointFormatError, match="trailing"):
            storage.load_checkpoint(str(path))

    def test_no_temp_file_left_behind(self, trained, tmp_path):
        storage.save_checkpoint(*trained, str(tmp_path / "m.ckpt"))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]

    def test_teacher_weights_from_checkpoint(self, tiny_config, tmp_path):
        source = model_init(tiny_config.model_copy(update={"teacher_seed": 7}))
        path = str(tmp_path / "teacher.ckpt")
        storage.save_checkpoint(source, None, path)

        default = model_init(tiny_config)
        loaded = model_init(tiny_config.model_copy(update={"teacher_checkpoint": path}))
        for (_, a), (_, b), (_, c) in zip(
            source.teacher.named_parameters(), loaded.teacher.named_parameters(), default.teacher.named_parameters()
        ):
            np.testing.assert_array_equal(a.data, b.data)
        assert not all(
            np.array_equal(a.data, c.data)
            for a, c in zip(source.teacher.parameters(), default.teacher.parameters())
        )
        assert all(not p.requires_grad for p in loaded.teacher.parameters())

    def test_shape_mismatch_is_reported(self, tiny_config, tmp_path):
        wide = model_init(tiny_config.model_copy(update={"stem_channels": 5}))
        path = str(tmp_path / "wide.ckpt")
        storage.save_checkpoint(wide, None, path)
        with pytest.raises(CheckpointFormatError, match="shape"):
            model_init(tiny_config.model_copy(update={"teacher_checkpoint": path}))


class TestReports:
    def test_eval_report_files(self, tmp_path):
        sets = make_sets(2) + make_sets(2, seed=1, label=Label.ANOMALOUS)
        report = evaluate(OracleScorer(), sets, smooth_sigma=0.0)
        paths = storage.write_eval_report(report, str(tmp_path))
        with open(paths[0], encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["sample_id", "label", "image_score"]
        assert [r[0] for r in rows[1:]] == [s.sample_id for s in sets]
        assert [r[1] for r in rows[1:]] == ["0", "0", "1", "1"]
        with open(paths[1], encoding="utf-8") as f:
            assert f.readline().strip() == "fpr,tpr,threshold"
        with open(paths[2], encoding="utf-8") as f:
            metrics = dict(list(csv.reader(f))[1:])
        assert float(metrics["i_auroc"]) == 1.0
        assert float(metrics["p_auroc"]) == 1.0

    def test_map_export_round_trip(self, tmp_path):
        values = np.linspace(0.2, 1.7, 64).reshape(8, 8)
        path = storage.export_map(AnomalyResult(map=values, image_score=1.7, sample_id="s"), str(tmp_path))
        assert open(path, "rb").read(2) == b"P5"
        restored = storage.load_map(path)
        np.testing.assert_allclose(restored, values, atol=(1.7 - 0.2) / 255 / 2 + 1e-12)
        assert restored.min() == pytest.approx(0.2) and restored.max() == pytest.approx(1.7)

    def test_constant_map_export(self, tmp_path):
        path = storage.export_map(AnomalyResult(map=np.full((4, 4), 0.3), image_score=0.3, sample_id="c"), str(tmp_path))
        np.testing.assert_allclose(storage.load_map(path), 0.3)

    def test_train_report(self, tiny_config, tmp_path):
        model = model_init(tiny_config)
        report, _ = train(model, make_sets(3), TrainConfig(epochs=2, batch_size=2))
        ckpt = str(tmp_path / "run.ckpt")
        report.checkpoint_path = ckpt
        csv_path, log_path = storage.write_train_report(report, ckpt, tiny_config.levels)
        with open(csv_path, encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "loss", "entropy_l0", "entropy_l1", "entropy_l2"]
        assert [r[0] for r in rows[1:]] == ["1", "2"]
        assert float(rows[1][1]) == report.losses[0]
        with open(log_path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0].startswith("epoch 1 loss=")
        assert "omega[l2]=" in lines[0]
        assert lines[-1].endswith(f"checkpoint={ckpt}")
