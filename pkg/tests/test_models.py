import numpy as np
import pytest

from domcond.models import (
    ModelVariant,
    build_model,
    domain_forward,
    load_checkpoint,
    predict_domain,
    predict_task,
    save_checkpoint,
    task_forward,
)
from domcond.tensor import (
    DimensionError,
    Tensor,
    ValidationError,
    grad_check,
    softmax_cross_entropy,
)

ALL_VARIANTS = list(ModelVariant)


def images(rng, n=2):
    return Tensor(rng.random((n, 1, 28, 28)))


class TestDomainForward:
    def test_zero_input_zero_bias_gives_head_bias(self):
        bundle = build_model("conditional", 0)
        bundle.domain.head.bias.data[...] = [1.0, 2.0, 3.0, 4.0]
        logits, z = domain_forward(bundle.domain, Tensor(np.zeros((3, 1, 28, 28))))
        assert np.array_equal(z.data, np.zeros((3, 32)))
        assert np.array_equal(logits.data, np.tile([1.0, 2.0, 3.0, 4.0], (3, 1)))

    def test_z_shape(self, rng):
        bundle = build_model("conditional", 0)
        for n in (1, 5):
            _, z = domain_forward(bundle.domain, images(rng, n))
            assert z.shape == (n, 32)

    def test_domain_loss_reaches_conv_weights(self, rng):
        bundle = build_model("conditional", 0)
        x = images(rng, 3)
        labels = np.array([0, 1, 2])

        def f():
            logits, _ = domain_forward(bundle.domain, x)
            return softmax_cross_entropy(logits, labels)

        params = [bundle.domain.conv.weight, bundle.domain.conv.bias]
        assert grad_check(f, params, coords_per_param=12) < 1e-4
        assert np.abs(bundle.domain.conv.weight.grad).max() > 0

    def test_wrong_input_shape(self):
        bundle = build_model("conditional", 0)
        with pytest.raises(DimensionError):
            domain_forward(bundle.domain, Tensor(np.zeros((2, 1, 14, 14))))


class TestTaskForward:
    def test_identity_film_matches_unconditional_bitwise(self, rng):
        cond = build_model("conditional", 7)
        uncond = build_model("unconditional", 7)
        x = images(rng, 3)
        z = Tensor(rng.standard_normal((3, 32)))
        got, pairs, _ = task_forward(cond.task, x, z)
        want, no_pairs, _ = task_forward(uncond.task, x, None)
        assert np.array_equal(got.data, want.data)
        assert len(pairs) == 2 and no_pairs == []

    def test_z_perturbation_changes_logits_with_nonzero_generators(self, rng):
        bundle = build_model("conditional", 0)
        for gen in bundle.task.films:
            gen.w_scale.data[...] = rng.standard_normal(gen.w_scale.shape) * 0.1
        x = images(rng, 2)
        z = rng.standard_normal((2, 32))
        base, _, _ = task_forward(bundle.task, x, Tensor(z))
        bumped, _, _ = task_forward(bundle.task, x, Tensor(z + 1e-3))
        assert np.abs(bumped.data - base.data).max() > 0

    def test_conditioned_model_requires_z(self, rng):
        bundle = build_model("conditional", 0)
        with pytest.raises(ValidationError, match="needs z"):
            task_forward(bundle.task, images(rng), None)


class TestPredictors:
    def test_argmax(self):
        assert predict_task(Tensor([[0.1, 0.9, 0.0]])).tolist() == [1]

    def test_tie_to_lowest_index(self):
        assert predict_task(Tensor([[0.5, 0.5, 0.5]])).tolist() == [0]

    def test_shift_invariance(self, rng):
        logits = rng.standard_normal((6, 10))
        assert np.array_equal(predict_task(logits), predict_task(logits + 100.0))

    def test_domain_predictor(self):
        assert predict_domain(Tensor([[3.0, 1.0, 2.0, 0.0]])).tolist() == [0]


class TestBuildModel:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_same_seed_bitwise_identical(self, variant):
        a, b = build_model(variant, 3), build_model(variant, 3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name and np.array_equal(pa.data, pb.data)

    def test_unconditional_has_no_film_parameters(self):
        bundle = build_model("unconditional", 0)
        assert bundle.film_parameters() == []
        assert all("film" not in p.name for p in bundle.parameters())

    def test_conditional_is_parameter_superset(self):
        cond = sum(p.size for p in build_model("conditional", 0).parameters())
        uncond = sum(p.size for p in build_model("unconditional", 0).parameters())
        assert cond > uncond

    def test_self_modulated_matches_conditional_count(self):
        a = sum(p.size for p in build_model("self_modulated", 0).parameters())
        b = sum(p.size for p in build_model("conditional", 0).parameters())
        assert a == b

    def test_scale_only_mode_wired(self):
        bundle = build_model("conditional_scale_only", 0)
        assert all(g.mode == "scale_only" for g in bundle.task.films)

    def test_embedding_forward_needs_ids(self, rng):
        bundle = build_model("embedding_conditioned", 0)
        with pytest.raises(ValidationError, match="domain ids"):
            bundle.forward(images(rng))
        out = bundle.forward(images(rng, 2), domain_ids=[0, 3])
        assert out.class_logits.shape == (2, 10)

    def test_adversarial_has_domain_head_on_pooled_features(self, rng):
        bundle = build_model("adversarial", 0)
        out = bundle.forward(images(rng, 2))
        assert out.domain_logits.shape == (2, 4)
        assert out.film_pairs == [] and out.z is None


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        bundle = build_model("conditional", 1)
        for p in bundle.parameters():
            p.data[...] = rng.standard_normal(p.shape)
        path = tmp_path / "model.npz"
        save_checkpoint(path, bundle)
        restored = build_model("conditional", 2)
        load_checkpoint(path, restored)
        for pa, pb in zip(bundle.parameters(), restored.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_variant_mismatch_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "m.npz", build_model("unconditional", 0))
        with pytest.raises(ValidationError, match="mismatch"):
            load_checkpoint(tmp_path / "m.npz", build_model("conditional", 0))
