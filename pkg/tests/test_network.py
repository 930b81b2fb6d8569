import numpy as np
import pytest

from afrd.config import ModelConfig
from afrd.errors import ShapeError
from afrd.models import FeaturePyramid
from afrd.services import tensor as T
from afrd.services.fusion import MeanFusion, attention_fuse, attention_weights, get_fusion
from afrd.services.network import (
    AfrdModel,
    bottleneck_forward,
    forward,
    model_init,
    stack_sets,
    student_forward,
    teacher_features,
    teacher_forward,
)
from afrd.services.tensor import Tensor
from afrd.services.trainer import distill_loss

from .conftest import make_sets


def _pyramid(*arrays) -> FeaturePyramid:
    return FeaturePyramid([Tensor(np.asarray(a, dtype=float)) for a in arrays])


class TestParameterCounts:
    def test_default_attention_model(self):
        model = AfrdModel(ModelConfig(), seed=0)
        assert sum(p.data.size for p in model.teacher.parameters()) == 1_164_864
        assert sum(p.data.size for fc in model.attention for p in fc.parameters()) == 16_146
        assert sum(p.data.size for p in model.bottleneck.parameters()) == 862_848
        assert sum(p.data.size for p in model.student.parameters()) == 1_714_496
        assert model.parameter_count(trainable_only=True) == 2_593_490
        assert model.parameter_count() == 3_758_354

    def test_mean_fusion_has_no_attention(self):
        model = AfrdModel(ModelConfig(fusion="mean"), seed=0)
        assert model.attention == []
        assert model.parameter_count(trainable_only=True) == 2_593_490 - 16_146

    def test_literal_attention_input_width(self, tiny_config):
        config = tiny_config.model_copy(update={"attention_input": "literal"})
        model = AfrdModel(config)
        # N * C * H * W inputs per level
        assert [fc.weight.shape for fc in model.attention] == [(2, 2 * 4 * 16), (2, 2 * 6 * 4), (2, 2 * 8 * 1)]


class TestInit:
    def test_same_seed_same_weights(self, tiny_config):
        a, b = AfrdModel(tiny_config, seed=5), AfrdModel(tiny_config, seed=5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_seed_changes_trainable_parts_only(self, tiny_config):
        a, b = AfrdModel(tiny_config, seed=1), AfrdModel(tiny_config, seed=2)
        for (_, pa), (_, pb) in zip(a.teacher.named_parameters(), b.teacher.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)
        wa = a.student.heads[0].weight.data
        wb = b.student.heads[0].weight.data
        assert not np.array_equal(wa, wb)

    def test_fusion_variants_share_bottleneck_and_student(self, tiny_config):
        att = AfrdModel(tiny_config, seed=3)
        mean = AfrdModel(tiny_config.model_copy(update={"fusion": "mean"}), seed=3)
        for (na, pa), (nb, pb) in zip(att.bottleneck.named_parameters(), mean.bottleneck.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        for (_, pa), (_, pb) in zip(att.student.named_parameters(), mean.student.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_teacher_is_frozen(self, tiny_config):
        model = model_init(tiny_config).train()
        assert all(not p.requires_grad for p in model.teacher.parameters())
        assert not model.teacher.training
        assert model.student.training
        assert all(p.requires_grad for _, p in model.trainable_parameters())
        assert not any(n.startswith("teacher.") for n, _ in model.trainable_parameters())

    def test_model_init_returns_eval_mode(self, tiny_config):
        model = model_init(tiny_config)
        assert not model.student.training
        assert model.non_finite() is None


class TestShapes:
    def test_default_pyramid(self):
        config = ModelConfig()
        assert config.level_shapes() == [(64, 16, 16), (128, 8, 8), (256, 4, 4)]

    @pytest.mark.parametrize("size", [16, 32, 48])
    def test_student_matches_teacher(self, tiny_config, size):
        config = tiny_config.model_copy(update={"image_size": size})
        model = model_init(config)
        sets = make_sets(2, size=size)
        feats = teacher_features(model, stack_sets(model, sets))
        assert len(feats) == 2
        for pyramid in feats:
            assert pyramid.shapes == config.level_shapes()
            assert all(level.shape[0] == 2 for level in pyramid.levels)
        fused, _, decoded = forward(model, feats)
        assert decoded.shapes == fused.shapes == config.level_shapes()

    def test_bottleneck_embedding_at_coarsest_level(self, tiny_config):
        model = model_init(tiny_config)
        feats = teacher_forward(model, make_sets(1)[0])
        embedding = bottleneck_forward(model, feats[0])
        _, h, w = tiny_config.level_shapes()[-1]
        assert embedding.shape == (1, tiny_config.embed, h, w)

    def test_teacher_features_have_no_graph(self, tiny_config):
        model = model_init(tiny_config)
        feats = teacher_forward(model, make_sets(1)[0])
        assert all(not level.requires_grad for p in feats for level in p.levels)

    def test_wrong_image_size(self, tiny_config):
        model = model_init(tiny_config)
        with pytest.raises(ShapeError) as info:
            teacher_forward(model, make_sets(1, size=32)[0])
        assert info.value.op == "teacher_forward"

    def test_wrong_lighting_count(self, tiny_config):
        model = model_init(tiny_config)
        with pytest.raises(ShapeError):
            teacher_forward(model, make_sets(1, n_lightings=3)[0])

    def test_lighting_subset_selection(self, tiny_config):
        config = tiny_config.model_copy(update={"n_lightings": 1, "lightings": [2]})
        model = model_init(config)
        sets = make_sets(1, n_lightings=3)
        batch = stack_sets(model, sets)
        assert batch.shape == (1, 1, 3, 16, 16)
        np.testing.assert_array_equal(batch[0, 0], sets[0].images[2])

    def test_bottleneck_rejects_wrong_level(self, tiny_config):
        model = model_init(tiny_config)
        bad = _pyramid(np.zeros((1, 4, 4, 4)), np.zeros((1, 6, 2, 2)), np.zeros((1, 7, 1, 1)))
        with pytest.raises(ShapeError) as info:
            bottleneck_forward(model, bad)
        assert info.value.axis == "level 2"

    def test_student_rejects_wrong_embedding(self, tiny_config):
        model = model_init(tiny_config)
        with pytest.raises(ShapeError):
            student_forward(model, Tensor(np.zeros((1, 8, 2, 2))))

    def test_normalized_input_changes_features(self, tiny_config):
        plain = model_init(tiny_config)
        normed = model_init(tiny_config.model_copy(update={"normalize_input": True}))
        image_set = make_sets(1)[0]
        a = teacher_forward(plain, image_set)[0].levels[0].data
        b = teacher_forward(normed, image_set)[0].levels[0].data
        assert not np.allclose(a, b)


def _two_channel_model() -> AfrdModel:
    return AfrdModel(ModelConfig(image_size=16, n_lightings=2, stem_channels=2, channels=[2, 2, 2]))


class TestAttention:
    def test_weights_on_simplex(self, tiny_config):
        model = model_init(tiny_config)
        feats = teacher_features(model, stack_sets(model, make_sets(3)))
        for level in range(tiny_config.levels):
            omega = attention_weights(model, feats, level).data
            assert omega.shape == (3, 2)
            assert (omega >= 0).all()
            np.testing.assert_allclose(omega.sum(axis=1), 1.0, atol=1e-6)

    def test_single_lighting_weight_is_one(self, tiny_config):
        model = model_init(tiny_config.model_copy(update={"n_lightings": 1}))
        feats = teacher_features(model, stack_sets(model, make_sets(2, n_lightings=1)))
        for level in range(tiny_config.levels):
            np.testing.assert_array_equal(attention_weights(model, feats, level).data, 1.0)

    def test_zero_weights_give_softmax_of_bias(self):
        model = _two_channel_model()
        fc = model.attention[0]
        fc.weight.data[...] = 0.0
        fc.bias.data[...] = [0.0, np.log(3.0)]
        feats = [_pyramid(np.ones((1, 2, 4, 4)), np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 1, 1)))] * 2
        np.testing.assert_allclose(attention_weights(model, feats, 0).data, [[0.25, 0.75]], atol=1e-6)

    def test_symmetric_features_give_equal_weights(self):
        model = _two_channel_model()
        fc = model.attention[2]
        fc.weight.data[...] = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
        fc.bias.data[...] = 0.0
        zeros = [np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 2, 2))]
        f1 = _pyramid(*zeros, [[[[1.0]], [[0.0]]]])
        f2 = _pyramid(*zeros, [[[[0.0]], [[1.0]]]])
        np.testing.assert_allclose(attention_weights(model, [f1, f2], 2).data, [[0.5, 0.5]], atol=1e-6)

    def test_lighting_count_mismatch(self, tiny_config):
        model = model_init(tiny_config)
        feats = teacher_features(model, stack_sets(model, make_sets(1)))
        with pytest.raises(ShapeError):
            attention_weights(model, feats[:1], 0)

    def test_permutation_covariance(self, tiny_config):
        config = tiny_config.model_copy(update={"n_lightings": 3})
        model = model_init(config, seed=4)
        sets = make_sets(2, n_lightings=3, seed=9)
        feats = teacher_features(model, stack_sets(model, sets))
        fused, omega, _ = get_fusion("attention").fuse(model, feats)

        perm = [2, 0, 1]
        for level, fc in enumerate(model.attention):
            c = config.level_shapes()[level][0]
            blocks = np.split(fc.weight.data, 3, axis=1)
            fc.weight.data = np.concatenate([blocks[j] for j in perm], axis=1)[perm]
            fc.bias.data = fc.bias.data[perm]
            assert fc.weight.shape == (3, 3 * c)
        permuted = [feats[j] for j in perm]
        fused_p, omega_p, _ = get_fusion("attention").fuse(model, permuted)

        for level in range(config.levels):
            np.testing.assert_allclose(fused_p.levels[level].data, fused.levels[level].data, atol=1e-5)
            np.testing.assert_allclose(omega_p.levels[level], omega.levels[level][:, perm], atol=1e-6)


class TestFuse:
    def test_half_weights(self):
        f1 = _pyramid([[[[1.0, 1.0]]]])
        f2 = _pyramid([[[[3.0, -1.0]]]])
        fused = attention_fuse([f1, f2], [np.array([0.5, 0.5])])
        np.testing.assert_allclose(fused.levels[0].data, [[[[2.0, 0.0]]]])

    def test_one_hot_selects_lighting(self):
        f1 = _pyramid([[[[1.0, 1.0]]]])
        f2 = _pyramid([[[[3.0, -1.0]]]])
        fused = attention_fuse([f1, f2], [np.array([0.0, 1.0])])
        np.testing.assert_allclose(fused.levels[0].data, f2.levels[0].data)

    def test_convexity(self):
        rng = np.random.default_rng(0)
        feats = [_pyramid(rng.normal(size=(2, 3, 4, 4))) for _ in range(4)]
        omega = rng.dirichlet(np.ones(4), size=2)
        fused = attention_fuse(feats, [omega]).levels[0].data
        stacked = np.stack([f.levels[0].data for f in feats])
        assert (fused <= stacked.max(axis=0) + 1e-5).all()
        assert (fused >= stacked.min(axis=0) - 1e-5).all()

    def test_level_mismatch(self):
        f1 = _pyramid(np.zeros((1, 2, 2, 2)))
        f2 = _pyramid(np.zeros((1, 3, 2, 2)))
        with pytest.raises(ShapeError):
            attention_fuse([f1, f2], [np.array([0.5, 0.5])])

    def test_weight_shape_mismatch(self):
        f1 = _pyramid(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ShapeError):
            attention_fuse([f1, f1], [np.array([0.2, 0.3, 0.5])])

    def test_mean_fusion_is_uniform(self, tiny_config):
        model = model_init(tiny_config.model_copy(update={"fusion": "mean"}))
        feats = teacher_features(model, stack_sets(model, make_sets(2)))
        fused, omega = MeanFusion().fuse(model, feats)
        for level in range(tiny_config.levels):
            np.testing.assert_allclose(omega.levels[level], 0.5)
            expected = 0.5 * (feats[0].levels[level].data + feats[1].levels[level].data)
            np.testing.assert_allclose(fused.levels[level].data, expected, rtol=1e-5, atol=1e-6)

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            get_fusion("max")


class TestGradientFlow:
    def test_gradients_reach_trainable_parts_only(self, tiny_config):
        model = model_init(tiny_config).train()
        feats = teacher_features(model, stack_sets(model, make_sets(4)))
        fused, _, decoded = forward(model, feats)
        loss = distill_loss(fused, decoded)
        T.zero_grad(p for _, p in model.trainable_parameters())
        loss.backward()

        for name, p in model.trainable_parameters():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name
        assert all(p.grad is None for p in model.teacher.parameters())
        for head in model.student.heads:
            assert np.abs(head.weight.grad).sum() > 0
        for fc in model.attention:
            assert np.abs(fc.weight.grad).sum() > 0
