"""Training tests: losses, schedule, clipping, AdamW, packing, the loop."""

import math

import numpy as np
import pytest

from conftest import fd_grad_arrays, max_rel_err, toy_config
from symboliclight.model import SymbolicLightModel
from symboliclight.training import (
    AuxCESettings,
    LOG_FIELDS,
    OptimState,
    Schedule,
    TrainingDivergenceError,
    adamw_step,
    auxce_total,
    clip_gradients,
    cross_entropy,
    cross_entropy_backward,
    cyclic_batches,
    format_log_line,
    lr_at,
    measure_sparsity,
    no_decay_param,
    train_loop,
)

TINY = dict(d_model=8, n_heads=2, d_ff=16, vocab_size=16, seq_len=6,
            chunk_size=3, window=3, n_global=1)


class TestCrossEntropy:
    """Token-mean NLL with optional pad exclusion."""

    def test_two_way_tie_costs_ln_two(self):
        loss, count, _ = cross_entropy(np.zeros((1, 2)), np.array([0]))
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)
        assert count == 1

    def test_uniform_logits_cost_ln_vocab(self):
        loss, _, _ = cross_entropy(np.full((3, 7), 2.5), np.array([0, 3, 6]))
        assert loss == pytest.approx(math.log(7.0), rel=1e-12)

    def test_hand_computed_two_class_example(self):
        """logits [1, 2] with target 1: NLL = log(1 + e^-1)."""
        loss, _, _ = cross_entropy(np.array([[1.0, 2.0]]), np.array([1]))
        assert loss == pytest.approx(math.log(1.0 + math.exp(-1.0)), rel=1e-12)

    def test_pad_positions_are_excluded_from_mean_and_count(self):
        logits = np.array([[1.0, 2.0], [50.0, -50.0]])
        loss_all, count_all, _ = cross_entropy(logits, np.array([1, 0]))
        loss_pad, count_pad, _ = cross_entropy(logits, np.array([1, 0]), pad_id=0)
        only_first, _, _ = cross_entropy(logits[:1], np.array([1]))
        assert count_all == 2 and count_pad == 1
        assert loss_pad == pytest.approx(only_first, rel=1e-12)
        assert loss_all != pytest.approx(loss_pad)

    def test_all_pad_batch_is_rejected(self):
        with pytest.raises(ValueError, match="empty non-pad"):
            cross_entropy(np.zeros((2, 4)), np.array([1, 1]), pad_id=1)

    def test_extreme_logits_stay_finite(self):
        loss, _, _ = cross_entropy(np.array([[1e4, -1e4]]), np.array([0]))
        assert loss == 0.0

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(80)
        logits = rng.standard_normal((6, 5))
        targets = rng.integers(0, 5, size=6)
        targets[2] = 4  # pad some rows
        targets[5] = 4

        def loss():
            value, _, _ = cross_entropy(logits, targets, pad_id=4)
            return value

        _, _, cache = cross_entropy(logits, targets, pad_id=4)
        grad = cross_entropy_backward(cache)
        fd = fd_grad_arrays(loss, {"logits": logits})
        assert max_rel_err({"logits": grad}, fd) < 1e-6
        np.testing.assert_array_equal(grad[2], 0.0)
        np.testing.assert_array_equal(grad[5], 0.0)

    def test_gradient_rows_sum_to_zero(self):
        """(softmax - onehot) always sums to zero per token."""
        rng = np.random.default_rng(81)
        _, _, cache = cross_entropy(rng.standard_normal((4, 6)), rng.integers(0, 6, size=4))
        grad = cross_entropy_backward(cache)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


class TestAuxceTotal:
    """Deep supervision: exponentially down-weighted exit losses."""

    def test_worked_example(self):
        """main 1.0 with two unit exits at lam 0.3, rho 0.5 gives
        1 + 0.3 * (0.5 + 1.0) = 1.45."""
        assert auxce_total(1.0, [1.0, 1.0], 0.3, 0.5) == pytest.approx(1.45, rel=1e-12)

    def test_deepest_exit_carries_full_lambda(self):
        assert auxce_total(0.0, [0.0, 0.0, 2.0], 0.3, 0.5) == pytest.approx(0.6, rel=1e-12)
        assert auxce_total(0.0, [2.0, 0.0, 0.0], 0.3, 0.5) == pytest.approx(0.15, rel=1e-12)

    def test_zero_lambda_returns_main(self):
        assert auxce_total(3.25, [9.0, 9.0], 0.0, 0.5) == 3.25

    def test_empty_exit_list_is_rejected(self):
        with pytest.raises(ValueError, match="at least one exit"):
            auxce_total(1.0, [], 0.3, 0.5)


class TestSchedule:
    """Linear warmup, cosine decay to a floor."""

    SCHED = Schedule(peak_lr=1e-3, warmup_steps=100, total_steps=1100, floor_lr=1e-4)

    def test_anchor_points(self):
        assert lr_at(0, self.SCHED) == 0.0
        assert lr_at(50, self.SCHED) == pytest.approx(5e-4, rel=1e-12)
        assert lr_at(100, self.SCHED) == pytest.approx(1e-3, rel=1e-12)
        # cosine midpoint: floor + half the span
        assert lr_at(600, self.SCHED) == pytest.approx(5.5e-4, rel=1e-12)
        assert lr_at(1100, self.SCHED) == 1e-4
        assert lr_at(5000, self.SCHED) == 1e-4

    def test_monotone_up_then_down(self):
        values = [lr_at(s, self.SCHED) for s in range(0, 1101, 10)]
        warm = values[:11]
        decay = values[10:]
        assert all(a < b for a, b in zip(warm, warm[1:]))
        assert all(a >= b for a, b in zip(decay, decay[1:]))

    def test_negative_step_is_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, self.SCHED)


class TestClipGradients:
    """Global-norm scaling with pre-clip reporting."""

    def test_three_four_five_triangle(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        preclip = clip_gradients(grads, max_norm=1.0)
        assert preclip == pytest.approx(5.0, rel=1e-12)
        assert grads["a"][0] == pytest.approx(0.6, rel=1e-12)
        assert grads["b"][0] == pytest.approx(0.8, rel=1e-12)

    def test_below_threshold_is_untouched(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        preclip = clip_gradients(grads, max_norm=10.0)
        assert preclip == pytest.approx(5.0, rel=1e-12)
        np.testing.assert_array_equal(grads["a"], [3.0])
        np.testing.assert_array_equal(grads["b"], [4.0])

    def test_non_finite_norm_is_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            clip_gradients({"a": np.array([np.inf])})

    def test_nonpositive_max_norm_is_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            clip_gradients({"a": np.array([1.0])}, max_norm=0.0)


class TestNoDecayPartition:
    """Weight decay skips gains, biases, and scalar control logits."""

    @pytest.mark.parametrize("name", ["blocks.0.ln1_gain", "enc_ln_bias",
                                      "blocks.1.gamma", "blocks.0.w_g",
                                      "head.log_pi", "final_ln_bias"])
    def test_excluded(self, name):
        assert no_decay_param(name)

    @pytest.mark.parametrize("name", ["embedding", "blocks.0.w_tcam",
                                      "blocks.1.w_q", "head.w_vocab",
                                      "head.w1", "blocks.0.w_up"])
    def test_decayed(self, name):
        assert not no_decay_param(name)


def reference_adamw(theta, grads, lr, beta1, beta2, eps, wd):
    """Scalar AdamW in pure Python floats, written independently."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        theta = theta - lr * (mhat / (math.sqrt(vhat) + eps) + wd * theta)
        out.append(theta)
    return out


class TestAdamw:
    """In-place decoupled-decay updates against a scalar oracle."""

    def test_hundred_steps_match_scalar_reference(self):
        rng = np.random.default_rng(82)
        grad_seq = rng.standard_normal(100).tolist()
        lr = 0.01
        params = {"embedding": np.array([0.5])}
        state = OptimState.for_params(params)
        trajectory = []
        for g in grad_seq:
            adamw_step(params, {"embedding": np.array([g])}, state, lr)
            trajectory.append(float(params["embedding"][0]))
        expect = reference_adamw(0.5, grad_seq, lr, 0.9, 0.95, 1e-8, 0.1)
        np.testing.assert_allclose(trajectory, expect, rtol=1e-12)

    def test_zero_gradients_still_decay_decayed_params(self):
        """With g = 0 the update is pure decay: theta * (1 - lr*wd)^k."""
        params = {"embedding": np.array([2.0])}
        state = OptimState.for_params(params)
        for _ in range(5):
            adamw_step(params, {"embedding": np.zeros(1)}, state, lr=0.1)
        assert params["embedding"][0] == pytest.approx(2.0 * (1.0 - 0.01) ** 5, rel=1e-12)

    def test_zero_gradients_leave_no_decay_params_unchanged(self):
        params = {"blocks.0.gamma": np.array([1.5, 2.5])}
        state = OptimState.for_params(params)
        for _ in range(5):
            adamw_step(params, {"blocks.0.gamma": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["blocks.0.gamma"], [1.5, 2.5])

    def test_shape_mismatch_is_rejected(self):
        params = {"w": np.zeros((2, 2))}
        state = OptimState.for_params(params)
        with pytest.raises(ValueError, match="mismatch"):
            adamw_step(params, {"w": np.zeros(3)}, state, lr=0.1)

    def test_defaults_match_training_recipe(self):
        state = OptimState()
        assert (state.beta1, state.beta2, state.eps, state.weight_decay) == (0.9, 0.95, 1e-8, 0.1)


class TestInstrumentation:
    """Sparsity metrics and the telemetry line format."""

    def test_measure_sparsity_hand_example(self):
        s = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        per_element, token_allzero = measure_sparsity(s)
        assert per_element == 0.75
        assert token_allzero == 0.5

    def test_format_log_line_exact_text(self):
        rec = {"step": 3, "lr": 0.0003, "main_loss": 5.1234564, "total_loss": 6.5,
               "grad_norm_preclip": 1.25, "sparsity_encoder": 0.875,
               "token_allzero_rate": 0.0}
        expect = ("step=3 lr=0.00030000 main_loss=5.123456 total_loss=6.500000 "
                  "grad_norm_preclip=1.250000 sparsity_encoder=0.875000 "
                  "token_allzero_rate=0.000000")
        assert format_log_line(rec) == expect

    def test_log_fields_are_the_documented_seven(self):
        assert LOG_FIELDS == ("step", "lr", "main_loss", "total_loss",
                              "grad_norm_preclip", "sparsity_encoder",
                              "token_allzero_rate")


class TestCyclicBatches:
    """Pad-free packing with a cursor advancing seq_len per row."""

    def test_hand_verified_wraparound(self):
        gen = cyclic_batches([0, 1, 2, 3, 4], batch_size=2, seq_len=3)
        xs, ys = next(gen)
        np.testing.assert_array_equal(xs, [[0, 1, 2], [3, 4, 0]])
        np.testing.assert_array_equal(ys, [[1, 2, 3], [4, 0, 1]])
        xs, ys = next(gen)
        np.testing.assert_array_equal(xs, [[1, 2, 3], [4, 0, 1]])
        np.testing.assert_array_equal(ys, [[2, 3, 4], [0, 1, 2]])

    def test_targets_are_inputs_shifted_by_one(self):
        gen = cyclic_batches(np.arange(10), batch_size=3, seq_len=4)
        for _ in range(5):
            xs, ys = next(gen)
            np.testing.assert_array_equal(xs[:, 1:], ys[:, :-1])

    def test_empty_corpus_is_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            next(cyclic_batches([], batch_size=1, seq_len=2))


class TestTrainLoop:
    """End-to-end optimizer loop on a tiny model."""

    def run_tiny(self, seed=21, steps=4, **kw):
        model = SymbolicLightModel(toy_config(**TINY), seed=seed)
        stream = np.random.default_rng(83).integers(0, 16, size=300)
        sched = Schedule(peak_lr=1e-3, warmup_steps=2, total_steps=10)
        records = train_loop(model, stream, sched, steps, batch_size=2, **kw)
        return model, records

    def test_emits_one_record_per_step_with_schedule_lrs(self):
        _, records = self.run_tiny()
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        sched = Schedule(peak_lr=1e-3, warmup_steps=2, total_steps=10)
        for r in records:
            assert r["lr"] == lr_at(r["step"], sched)
            for key in LOG_FIELDS:
                assert key in r

    def test_aux_losses_only_add(self):
        _, records = self.run_tiny(auxce=AuxCESettings(lam=0.3, rho=0.5))
        for r in records:
            assert r["total_loss"] >= r["main_loss"]

    def test_without_aux_total_equals_main(self):
        _, records = self.run_tiny()
        for r in records:
            assert r["total_loss"] == r["main_loss"]

    def test_two_runs_are_byte_identical(self):
        _, a = self.run_tiny(auxce=AuxCESettings())
        _, b = self.run_tiny(auxce=AuxCESettings())
        assert [format_log_line(r) for r in a] == [format_log_line(r) for r in b]

    def test_log_fn_receives_formatted_lines(self):
        lines = []
        _, records = self.run_tiny(log_fn=lines.append)
        assert lines == [format_log_line(r) for r in records]

    def test_attention_overflow_raises_divergence_error(self):
        """Blown-up projections overflow the float32 score products to
        nan, surfacing as a divergence with the failing step attached."""
        model = SymbolicLightModel(toy_config(**TINY), seed=22)
        model.params["blocks.0.w_q"] *= np.float32(1e25)
        model.params["blocks.0.w_k"] *= np.float32(1e25)
        stream = np.random.default_rng(84).integers(0, 16, size=200)
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingDivergenceError) as info:
                train_loop(model, stream, Schedule(peak_lr=1e-3, warmup_steps=2,
                                                   total_steps=10), steps=3)
        assert info.value.step == 1

    def test_checkpoints_written_at_interval_and_end(self, tmp_path):
        from symboliclight.checkpoint import load_checkpoint
        path = tmp_path / "run.ckpt"
        model, _ = self.run_tiny(checkpoint_path=path, checkpoint_interval=2)
        cfg, params = load_checkpoint(path)
        assert cfg == model.config
        for k in params:  # final write reflects the end state
            np.testing.assert_array_equal(params[k], model.params[k])

    def test_final_checkpoint_even_without_interval(self, tmp_path):
        path = tmp_path / "run.ckpt"
        self.run_tiny(checkpoint_path=path, checkpoint_interval=0)
        assert path.exists()
