import json
import math

import numpy as np
import pytest

import domcond.training as training
from domcond.data import Minibatch, sample_minibatch, split_dataset
from domcond.models import ModelVariant, UnsupportedModeError, build_model
from domcond.tensor import Parameter, Tensor, ValidationError, no_grad
from domcond.training import (
    AdamState,
    TrainConfig,
    adam_update,
    adversarial_train_step,
    clip_global_norm,
    evaluate,
    joint_loss,
    loss_total,
    restore_snapshot,
    run_training,
    train_step,
)


def scalar(v):
    return Tensor(np.asarray(float(v)))


def small_batch(ds, rng, n=16):
    return sample_minibatch(ds.subset(slice(n * 4)), n, rng)


def quick_config(**kw):
    defaults = dict(variant="conditional", epochs=1, batch_size=64, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestLossTotal:
    def test_zero_weights_give_task_alone(self):
        loss = loss_total(scalar(2.5), scalar(9.0), scalar(1.0), 0.0, 0.0)
        assert loss.item() == 2.5

    def test_full_domain_weight_gives_domain_alone(self):
        loss = loss_total(scalar(2.5), scalar(9.0), scalar(1.0), 1.0, 0.0)
        assert loss.item() == 9.0

    def test_mixture_arithmetic(self):
        loss = loss_total(scalar(2.0), scalar(4.0), scalar(3.0), 0.5, 1.0)
        assert loss.item() == 6.0

    def test_out_of_range_weight(self):
        with pytest.raises(ValidationError):
            loss_total(scalar(1.0), scalar(1.0), None, 1.5, 0.0)

    def test_missing_domain_term_with_positive_weight(self):
        with pytest.raises(ValidationError):
            loss_total(scalar(1.0), None, None, 0.5, 0.0)

    def test_linear_in_each_component(self, rng):
        lam, gamma = 0.3, 0.7
        t, d, o = rng.random(3) * 4
        base = loss_total(scalar(t), scalar(d), scalar(o), lam, gamma).item()
        bumped = loss_total(scalar(t + 1), scalar(d), scalar(o), lam, gamma).item()
        assert bumped - base == pytest.approx(1 - lam, abs=1e-12)
        bumped = loss_total(scalar(t), scalar(d + 1), scalar(o), lam, gamma).item()
        assert bumped - base == pytest.approx(lam, abs=1e-12)
        bumped = loss_total(scalar(t), scalar(d), scalar(o + 1), lam, gamma).item()
        assert bumped - base == pytest.approx(gamma, abs=1e-12)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Parameter("p", np.zeros(5))
        p.grad[...] = 1.0
        cfg = quick_config(lr=0.1)
        adam_update([p], AdamState(), cfg)
        assert np.allclose(p.data, -0.1, atol=1e-8)

    def test_zero_lr_keeps_parameters(self, rng):
        p = Parameter("p", rng.standard_normal(5))
        before = p.data.copy()
        p.grad[...] = rng.standard_normal(5)
        adam_update([p], AdamState(), quick_config(lr=0.0))
        assert np.array_equal(p.data, before)

    def test_clip_rescales_to_threshold(self):
        p = Parameter("p", np.zeros(4))
        p.grad[...] = 5.0  # norm 10
        norm = clip_global_norm([p], 5.0)
        assert norm == pytest.approx(10.0)
        assert np.allclose(p.grad, 2.5)
        assert math.sqrt((p.grad ** 2).sum()) <= 5.0 + 1e-9

    def test_clip_leaves_small_gradients_alone(self, rng):
        p = Parameter("p", np.zeros(4))
        g = rng.standard_normal(4) * 0.1
        p.grad[...] = g
        clip_global_norm([p], 200.0)
        assert np.array_equal(p.grad, g)

    def test_post_clip_norm_bounded_in_training(self, digits_small, rng):
        bundle = build_model("conditional", 0)
        cfg = quick_config(clip_norm=0.5)
        batch = small_batch(digits_small, rng)
        recorded = []
        original = training.clip_global_norm

        def spy(params, threshold):
            norm = original(params, threshold)
            post = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
            recorded.append(post)
            return norm

        training.clip_global_norm = spy
        try:
            train_step(bundle, batch, cfg, AdamState())
        finally:
            training.clip_global_norm = original
        assert recorded and all(v <= 0.5 + 1e-9 for v in recorded)


class TestTrainStep:
    def test_zero_lr_step_is_pure(self, digits_small, rng):
        bundle = build_model("conditional", 0)
        cfg = quick_config(lr=0.0)
        batch = small_batch(digits_small, rng)
        state = AdamState()
        first = train_step(bundle, batch, cfg, state)
        second = train_step(bundle, batch, cfg, state)
        assert first == second

    def test_small_step_descends_on_fixed_batch(self, digits_small):
        cfg = quick_config(lr=1e-4)
        for trial in range(20):
            rng = np.random.default_rng(1000 + trial)
            bundle = build_model("conditional", trial)
            batch = small_batch(digits_small, rng)
            with no_grad():
                before, _ = joint_loss(bundle, batch, cfg)
            train_step(bundle, batch, cfg, AdamState())
            with no_grad():
                after, _ = joint_loss(bundle, batch, cfg)
            assert after.item() < before.item()

    def test_unconditional_reports_absent_components(self, digits_small, rng):
        bundle = build_model("unconditional", 0)
        parts = train_step(bundle, small_batch(digits_small, rng), quick_config(), AdamState())
        assert parts["domain_ce"] is None and parts["omega"] is None

    def test_adversarial_variant_rejected(self, digits_small, rng):
        with pytest.raises(ValidationError):
            train_step(build_model("adversarial", 0), small_batch(digits_small, rng),
                       quick_config(variant="adversarial"), AdamState())


class TestAdversarialStep:
    def test_head_update_leaves_backbone_bitwise_unchanged(self, digits_small, rng):
        bundle = build_model("adversarial", 0)
        cfg = quick_config(variant="adversarial")
        batch = small_batch(digits_small, rng)
        backbone_before = {p.name: p.data.copy() for p in bundle.task.parameters()}
        head_before = {p.name: p.data.copy() for p in bundle.adversary_head.parameters()}
        parts = adversarial_train_step(bundle, batch, cfg, AdamState(), AdamState(),
                                       step_index=0)
        assert parts["task_ce"] is None and parts["domain_ce"] is not None
        for p in bundle.task.parameters():
            assert np.array_equal(p.data, backbone_before[p.name])
        assert any(not np.array_equal(p.data, head_before[p.name])
                   for p in bundle.adversary_head.parameters())

    def test_backbone_update_leaves_head_unchanged(self, digits_small, rng):
        bundle = build_model("adversarial", 0)
        cfg = quick_config(variant="adversarial")
        batch = small_batch(digits_small, rng)
        head_before = {p.name: p.data.copy() for p in bundle.adversary_head.parameters()}
        parts = adversarial_train_step(bundle, batch, cfg, AdamState(), AdamState(),
                                       step_index=1)
        assert parts["domain_ce"] is None and parts["task_ce"] is not None
        for p in bundle.adversary_head.parameters():
            assert np.array_equal(p.data, head_before[p.name])

    def test_zero_entropy_weight_is_plain_task_training(self, digits_small, rng):
        batch = small_batch(digits_small, rng)
        cfg = quick_config(variant="adversarial", entropy_weight=0.0)
        a = build_model("adversarial", 3)
        adversarial_train_step(a, batch, cfg, AdamState(), AdamState(), step_index=1)

        b = build_model("adversarial", 3)
        for p in b.task.parameters():
            p.zero_grad()
        from domcond.tensor import backward, softmax_cross_entropy
        from domcond.models import task_forward
        from domcond.training import _with_l2
        logits, _, _ = task_forward(b.task, Tensor(batch.x), None)
        loss = _with_l2(softmax_cross_entropy(logits, batch.labels), b.task.parameters(),
                        cfg.l2_weight)
        backward(loss)
        adam_update(b.task.parameters(), AdamState(), cfg)
        for pa, pb in zip(a.task.parameters(), b.task.parameters()):
            assert np.array_equal(pa.data, pb.data)


class TestEvaluate:
    def test_untrained_model_near_chance(self, digits_test):
        acc = evaluate(build_model("unconditional", 0), digits_test, "out_of_domain")
        assert abs(acc - 10.0) < 3.0 or acc < 20.0  # chance level on 10 classes

    def test_constant_predictor_scores_class_prior(self, digits_test):
        bundle = build_model("unconditional", 0)
        bundle.task.head.weight.data[...] = 0.0
        bundle.task.head.bias.data[...] = 0.0
        bundle.task.head.bias.data[4] = 100.0
        acc = evaluate(bundle, digits_test, "out_of_domain")
        prior = 100.0 * (digits_test.labels == 4).mean()
        assert acc == pytest.approx(prior, abs=1e-12)

    def test_in_domain_consumes_ten_passes(self, digits_test):
        bundle = build_model("conditional", 0)
        seen = []
        original = bundle.forward

        def counting_forward(x, domain_ids=None):
            seen.append(x.shape[0])
            return original(x, domain_ids=domain_ids)

        bundle.forward = counting_forward
        evaluate(bundle, digits_test, "in_domain", np.random.default_rng(0))
        assert sum(seen) == 10 * len(digits_test)

    def test_embedding_out_of_domain_unsupported(self, digits_test):
        with pytest.raises(UnsupportedModeError):
            evaluate(build_model("embedding_conditioned", 0), digits_test, "out_of_domain")

    def test_unknown_mode(self, digits_test):
        with pytest.raises(ValidationError):
            evaluate(build_model("unconditional", 0), digits_test, "nonsense")


class TestRunTraining:
    @pytest.fixture(scope="class")
    def tiny_run(self, digits_small, digits_test, tmp_path_factory):
        run_dir = tmp_path_factory.mktemp("run")
        cfg = TrainConfig(variant="conditional", epochs=3, batch_size=128, seed=0)
        history, selection = run_training(cfg, digits_small, digits_test, run_dir=run_dir)
        return cfg, history, selection, run_dir

    def test_history_length_matches_epochs(self, tiny_run):
        _, history, _, _ = tiny_run
        assert len(history) == 3
        assert [h.epoch for h in history] == [0, 1, 2]

    def test_oracle_at_least_criterion_checkpoints(self, tiny_run):
        _, _, selection, _ = tiny_run
        assert selection.oracle.ood_acc >= selection.best_val_acc.ood_acc
        assert selection.oracle.ood_acc >= selection.best_val_loss.ood_acc

    def test_metrics_jsonl_schema(self, tiny_run):
        _, history, _, run_dir = tiny_run
        lines = (run_dir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == len(history)
        row = json.loads(lines[0])
        assert set(row) == {"epoch", "task_ce", "domain_ce", "omega",
                            "val_acc", "val_loss", "ood_acc"}

    def test_checkpoint_files_written(self, tiny_run):
        _, _, _, run_dir = tiny_run
        for name in ("val_acc", "val_loss", "oracle"):
            assert (run_dir / f"checkpoint_{name}.npz").exists()

    def test_selection_summary_reports_gap(self, tiny_run):
        _, _, selection, _ = tiny_run
        summary = selection.summary()
        assert {"best_val_acc", "best_val_loss", "oracle"} <= set(summary)
        assert summary["oracle_gap"]["vs_val_acc"] == pytest.approx(
            selection.oracle.ood_acc - selection.best_val_acc.ood_acc)

    def test_restore_snapshot_round_trip(self, tiny_run):
        cfg, _, selection, _ = tiny_run
        bundle = build_model(cfg.variant, cfg.seed)
        restore_snapshot(bundle, selection.oracle.params)
        for p in bundle.parameters():
            assert np.array_equal(p.data, selection.oracle.params[p.name])

    def test_embedding_variant_has_no_oracle(self, digits_small, digits_test, tmp_path):
        cfg = TrainConfig(variant="embedding_conditioned", epochs=1, seed=0)
        history, selection = run_training(cfg, digits_small, digits_test, run_dir=tmp_path)
        assert selection.oracle is None
        assert history[0].ood_acc is None
        assert selection.evaluation_checkpoint() is selection.best_val_acc
        assert not (tmp_path / "checkpoint_oracle.npz").exists()

    def test_self_modulated_never_updates_domain_head(self, digits_small, digits_test):
        cfg = TrainConfig(variant="self_modulated", epochs=1, seed=0, l2_weight=0.0)
        bundle = build_model(cfg.variant, cfg.seed)
        head_before = {p.name: p.data.copy() for p in bundle.domain.head.parameters()}
        state = AdamState()
        sampler_rng = np.random.default_rng(0)
        batch = sample_minibatch(digits_small, 64, sampler_rng)
        train_step(bundle, batch, cfg, state)
        for p in bundle.domain.head.parameters():
            assert np.array_equal(p.data, head_before[p.name])


def test_zero_penalty_weight_is_bit_exact_with_no_penalty_computation(
        digits_small, digits_test, monkeypatch):
    """gamma=0 must match a build that never computes the penalty at all."""
    cfg = TrainConfig(variant="conditional", epochs=1, seed=4, film_penalty_weight=0.0)
    hist_with, sel_with = run_training(cfg, digits_small, digits_test)
    with monkeypatch.context() as m:
        m.setattr(training, "film_penalty", lambda pairs: None)
        hist_without, sel_without = run_training(cfg, digits_small, digits_test)
    assert [h.task_ce for h in hist_with] == [h.task_ce for h in hist_without]
    assert [h.val_acc for h in hist_with] == [h.val_acc for h in hist_without]
    assert all(h.omega is None for h in hist_without)
    # single epoch: the selected checkpoint holds the final parameters
    for name, arr in sel_with.best_val_acc.params.items():
        assert np.array_equal(arr, sel_without.best_val_acc.params[name]), name


def test_moving_average_training_loss_mostly_non_increasing(digits_small, digits_test):
    """Window-10 smoothed loss over the first 2 epochs descends >= 90% of steps."""
    cfg = TrainConfig(variant="conditional", epochs=2, seed=0)
    losses = []
    original = training.train_step

    def recording(bundle, batch, c, state):
        parts = original(bundle, batch, c, state)
        losses.append(parts["loss"])
        return parts

    training.train_step = recording
    try:
        run_training(cfg, digits_small, digits_test)
    finally:
        training.train_step = original
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    drops = np.diff(ma) <= 0
    assert drops.mean() >= 0.9
