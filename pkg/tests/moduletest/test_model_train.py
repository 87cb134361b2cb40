"""
Tests for the model readout, losses, Adam updates, early stopping and fit().
"""

import numpy as np
import pytest

from quantized_rnn.data import batches, load_task_data
from quantized_rnn.model import RecurrentModel
from quantized_rnn.models import QuantizerSpec, TrainConfig
from quantized_rnn.numerics import make_rng, softmax_rows
from quantized_rnn.cells import WeightGroup
from quantized_rnn.train import (
    CONTINUE,
    METRICS_HEADER,
    STOP,
    TrainState,
    adam_step,
    bpc,
    clip_global_norm,
    cross_entropy,
    early_stop,
    evaluate,
    evaluate_metrics,
    fit,
    read_metrics,
    train_epoch,
)
from quantized_rnn.exceptions import DataError, NonFiniteGradientError, ShapeMismatchError, TraceMismatchError


def _with_train(cfg, **changes):
    return cfg.model_copy(update={"train": cfg.train.model_copy(update=changes)})


def _model(cfg, data):
    return RecurrentModel.create(cfg, data.input_size, data.output_size, make_rng(cfg.seed, "init"))


class TestCrossEntropy:
    """Test the loss and its logit gradient."""

    @pytest.mark.unit
    def test_perfect_prediction(self):
        """One-hot predictions on the targets cost nothing."""
        p = np.eye(4)[[0, 2, 3]]
        loss, _ = cross_entropy(p, np.array([0, 2, 3]))
        assert loss == 0.0

    @pytest.mark.unit
    def test_uniform_over_27(self):
        """Uniform predictions over 27 symbols cost ln 27 nats, log2 27 bits."""
        p = np.full((5, 3, 27), 1.0 / 27)
        loss, _ = cross_entropy(p, np.zeros((5, 3), dtype=np.int64))
        assert loss == pytest.approx(np.log(27.0))
        assert bpc(loss) == pytest.approx(np.log2(27.0))

    @pytest.mark.unit
    def test_logit_gradient(self, rng):
        """The returned gradient matches central differences through softmax."""
        logits = rng.standard_normal((4, 2, 5))
        targets = rng.integers(0, 5, size=(4, 2))
        mask = np.ones((4, 2))
        mask[0, 1] = 0.0
        _, grad = cross_entropy(softmax_rows(logits), targets, mask)

        numeric = np.zeros_like(logits)
        step = 1e-6
        for index in np.ndindex(logits.shape):
            shifted = logits.copy()
            shifted[index] += step
            plus, _ = cross_entropy(softmax_rows(shifted), targets, mask)
            shifted[index] -= 2 * step
            minus, _ = cross_entropy(softmax_rows(shifted), targets, mask)
            numeric[index] = (plus - minus) / (2 * step)
        np.testing.assert_allclose(grad, numeric, atol=1e-8)
        assert np.all(grad[0, 1] == 0.0)

    @pytest.mark.unit
    def test_mask_excludes_positions(self):
        """Masked positions change neither the loss nor the count."""
        p = np.array([[0.5, 0.5], [0.9, 0.1]])
        loss, _ = cross_entropy(p, np.array([0, 1]), np.array([1.0, 0.0]))
        assert loss == pytest.approx(np.log(2.0))

    @pytest.mark.unit
    def test_non_finite_probabilities(self):
        """NaN predictions cost -ln(tiny) nats instead of poisoning the loss."""
        p = np.array([[np.nan, np.nan], [0.5, 0.5]])
        with np.errstate(invalid="ignore"):
            loss, _ = cross_entropy(p, np.array([0, 1]))
        expected = (-np.log(np.finfo(np.float64).tiny) + np.log(2.0)) / 2
        assert np.isfinite(loss)
        assert loss == pytest.approx(expected)

    @pytest.mark.unit
    def test_out_of_vocabulary(self):
        """A target outside the vocabulary is a data error."""
        with pytest.raises(DataError, match="vocabulary"):
            cross_entropy(np.full((2, 3), 1.0 / 3), np.array([0, 3]))

    @pytest.mark.unit
    def test_shape_mismatch(self):
        """Targets must match the leading shape of the predictions."""
        with pytest.raises(ShapeMismatchError):
            cross_entropy(np.full((2, 3), 1.0 / 3), np.array([0, 1, 2]))


class TestAdam:
    """Test the Adam update on master weights."""

    def _state(self):
        return TrainState(step=1)

    @pytest.mark.unit
    def test_first_step_size(self):
        """The first bias-corrected step moves each entry by about the learning rate."""
        group = WeightGroup("W", "input", np.zeros((2, 3)))
        grad = np.array([[1.0, -2.0, 0.5], [3.0, -0.1, 10.0]])
        adam_step(self._state(), group, grad, TrainConfig())
        np.testing.assert_allclose(group.master, -1e-4 * np.sign(grad), rtol=1e-6)

    @pytest.mark.unit
    def test_zero_gradient(self):
        """A zero gradient leaves the master unchanged."""
        master = np.linspace(-1, 1, 6).reshape(2, 3)
        group = WeightGroup("W", "input", master.copy())
        adam_step(self._state(), group, np.zeros((2, 3)), TrainConfig())
        np.testing.assert_array_equal(group.master, master)

    @pytest.mark.unit
    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_gradient(self, bad):
        """NaN or Inf in the gradient stops the update."""
        group = WeightGroup("W_hh", "recurrent", np.zeros(3))
        with pytest.raises(NonFiniteGradientError, match="W_hh"):
            adam_step(self._state(), group, np.array([0.0, bad, 0.0]), TrainConfig())
        assert np.all(group.master == 0.0)

    @pytest.mark.unit
    def test_binary_masters_clipped(self):
        """Binary and ternary masters stay in [-1, 1]; others are free."""
        cfg = TrainConfig(learning_rate=0.5)
        clipped = WeightGroup("W", "input", np.array([0.9, -0.9]), QuantizerSpec(method="binary"))
        free = WeightGroup("V", "input", np.array([0.9, -0.9]), QuantizerSpec(method="expquant"))
        state = self._state()
        adam_step(state, clipped, np.array([-1.0, 1.0]), cfg)
        adam_step(state, free, np.array([-1.0, 1.0]), cfg)
        np.testing.assert_array_equal(clipped.master, [1.0, -1.0])
        np.testing.assert_allclose(free.master, [1.4, -1.4])

    @pytest.mark.unit
    def test_version_and_moments(self):
        """Each update bumps the group version and records moments."""
        group = WeightGroup("W", "input", np.zeros(2))
        state = self._state()
        adam_step(state, group, np.ones(2), TrainConfig())
        assert group.version == 1
        np.testing.assert_allclose(state.moments["W"].m, 0.1)
        np.testing.assert_allclose(state.moments["W"].v, 0.001)

    @pytest.mark.unit
    def test_needs_step(self):
        """The time step starts at 1."""
        with pytest.raises(ValueError):
            adam_step(TrainState(), WeightGroup("W", "input", np.zeros(2)), np.ones(2), TrainConfig())


class TestClipGlobalNorm:
    """Test global-norm gradient clipping."""

    @pytest.mark.unit
    def test_scales_down(self):
        """Gradients above the limit are scaled to it jointly."""
        grads, norm = clip_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(grads["a"], [0.6])
        np.testing.assert_allclose(grads["b"], [0.8])

    @pytest.mark.unit
    def test_below_limit_untouched(self):
        """Gradients within the limit are returned as they are."""
        original = {"a": np.array([0.3])}
        grads, _ = clip_global_norm(original, 1.0)
        assert grads is original


class TestEarlyStop:
    """Test the patience rule."""

    @pytest.mark.unit
    def test_flat_metric_stops_at_epoch_11(self):
        """A flat metric with patience 5 stops at epoch 11."""
        state = TrainState()
        decisions = []
        for epoch in range(1, 20):
            state.epoch = epoch
            decisions.append(early_stop(state, 1.0, 5))
            if decisions[-1] == STOP:
                break
        assert state.epoch == 11
        assert decisions[:-1] == [CONTINUE] * 10
        assert state.best_epoch == 1

    @pytest.mark.unit
    def test_improvement_resets(self):
        """An improving epoch resets the stale count."""
        state = TrainState()
        for epoch, value in enumerate([2.0, 2.0, 2.0, 2.0, 1.0], start=1):
            state.epoch = epoch
            early_stop(state, value, 2)
        assert state.stale == 0
        assert state.best == 1.0
        assert state.best_epoch == 5
        assert state.improved

    @pytest.mark.unit
    def test_higher_is_better(self):
        """Accuracy improves upwards."""
        state = TrainState(epoch=1)
        early_stop(state, 0.5, 3, higher_is_better=True)
        state.epoch = 2
        early_stop(state, 0.7, 3, higher_is_better=True)
        assert state.best == 0.7

    @pytest.mark.unit
    def test_zero_patience(self):
        """Patience 0 stops at the first non-improving epoch."""
        state = TrainState(epoch=1)
        assert early_stop(state, 1.0, 0) == CONTINUE
        state.epoch = 2
        assert early_stop(state, 1.0, 0) == STOP


class TestRecurrentModel:
    """Test the readout and end-to-end gradients."""

    def _numeric(self, model, batch, step=1e-6):
        def loss():
            output = model.forward(batch.inputs, batch.mask if batch.task == "seq_classify" else None)
            value, _ = cross_entropy(output.probs, batch.targets)
            return value

        grads = {}
        for group in model.weights:
            grad = np.zeros_like(group.master)
            for index in np.ndindex(group.master.shape):
                original = group.master[index]
                group.master[index] = original + step
                plus = loss()
                group.master[index] = original - step
                minus = loss()
                group.master[index] = original
                grad[index] = (plus - minus) / (2 * step)
            grads[group.name] = grad
        return grads

    @pytest.mark.unit
    @pytest.mark.parametrize("kind", ["vanilla", "gru", "lstm"])
    def test_lm_gradients(self, ab_corpus, lm_config, kind):
        """Language-model gradients match finite differences."""
        cfg = lm_config(cell={"kind": kind, "hidden_size": 3, "activation": "tanh"},
                        data={"path": str(ab_corpus), "seq_length": 5})
        data = load_task_data(cfg)
        model = RecurrentModel.create(cfg, data.input_size, data.output_size, make_rng(0, "init"), init_scale=0.5)
        batch = next(iter(batches(data.train, 3)))
        output = model.forward(batch.inputs)
        _, grad = cross_entropy(output.probs, batch.targets)
        analytic = model.backward(output, grad)
        numeric = self._numeric(model, batch)
        for name in model.weights.names():
            np.testing.assert_allclose(analytic[name], numeric[name], atol=1e-7, err_msg=name)

    @pytest.mark.unit
    def test_classifier_gradients(self, classify_config):
        """Classification gradients through the dense layer match finite differences."""
        cfg = classify_config(readout_hidden=4, cell={"kind": "gru", "hidden_size": 3})
        data = load_task_data(cfg)
        model = _model(cfg, data)
        assert model.has_dense
        batch = next(iter(batches(data.train, 4)))
        output = model.forward(batch.inputs, batch.mask)
        _, grad = cross_entropy(output.probs, batch.targets)
        analytic = model.backward(output, grad)
        numeric = self._numeric(model, batch)
        assert list(analytic) == model.weights.names()
        for name in model.weights.names():
            np.testing.assert_allclose(analytic[name], numeric[name], atol=1e-7, err_msg=name)

    @pytest.mark.unit
    def test_readout_biases_never_quantized(self, classify_config):
        """Output-scope quantizers reach W_hx and W_d but not the biases."""
        spec = QuantizerSpec(method="binary", variant="deterministic")
        cfg = classify_config(readout_hidden=4, cell={"kind": "gru", "hidden_size": 3, "scope": {"output": spec}})
        data = load_task_data(cfg)
        model = _model(cfg, data)
        assert model.readout["W_hx"].is_quantized and model.readout["W_d"].is_quantized
        assert not model.readout["b_x"].is_quantized and not model.readout["b_d"].is_quantized

    @pytest.mark.unit
    def test_masked_frames_ignored(self, classify_config):
        """Perturbing masked frames leaves the predictions bit-identical."""
        cfg = classify_config()
        data = load_task_data(cfg)
        model = _model(cfg, data)
        batch = next(iter(batches(data.train, 8)))
        assert np.any(batch.mask == 0.0)
        before = model.forward(batch.inputs, batch.mask).probs
        perturbed = batch.inputs.copy()
        perturbed[batch.mask == 0.0] = 123.0
        after = model.forward(perturbed, batch.mask).probs
        np.testing.assert_array_equal(before, after)

    @pytest.mark.unit
    def test_stale_readout_rejected(self, lm_config):
        """Refreshing the readout after the forward pass invalidates the output."""
        cfg = lm_config()
        data = load_task_data(cfg)
        model = _model(cfg, data)
        batch = next(iter(batches(data.train, 2)))
        output = model.forward(batch.inputs)
        model.refresh("full_precision")
        with pytest.raises(TraceMismatchError):
            model.backward(output, np.zeros_like(output.probs))


class TestTraining:
    """Test straight-through training and evaluation."""

    @pytest.mark.unit
    def test_zero_learning_rate_keeps_masters(self, lm_config):
        """With learning rate 0 the masters stay bit-identical to initialization."""
        spec = QuantizerSpec(method="binary", variant="stochastic")
        cfg = _with_train(lm_config(cell={"scope": {"input": spec, "bias": spec}}), learning_rate=0.0)
        data = load_task_data(cfg)
        model = _model(cfg, data)
        initial = {g.name: g.master.copy() for g in model.weights}
        state = TrainState.fresh(model)
        train_epoch(model, data.train, cfg, state, make_rng(0, "quantize"), make_rng(0, "shuffle"))
        assert state.step == 18
        for group in model.weights:
            np.testing.assert_array_equal(group.master, initial[group.name])

    @pytest.mark.unit
    def test_overflowing_batches_skipped(self, lm_config):
        """A recurrence that overflows to inf/NaN skips updates instead of raising."""
        cfg = lm_config()
        data = load_task_data(cfg)
        model = _model(cfg, data)
        hidden = cfg.cell.hidden_size
        model.weights["W_hh"].master[...] = 1e20 * np.eye(hidden)
        initial = {g.name: g.master.copy() for g in model.weights}
        state = TrainState.fresh(model)

        metrics = train_epoch(model, data.train, cfg, state, make_rng(0, "quantize"), make_rng(0, "shuffle"))

        assert state.step == 0
        assert state.skipped == 18
        assert state.schedule()["skipped"] == 18
        for group in model.weights:
            np.testing.assert_array_equal(group.master, initial[group.name])
        train_bpc = [m for m in metrics if m.kind == "bpc"][0].value
        assert np.isfinite(train_bpc)
        assert train_bpc > 10.0
        valid = evaluate(model, data.valid, cfg, "full_precision").value
        assert np.isfinite(valid) and valid > 10.0

    @pytest.mark.unit
    def test_identity_matches_unquantized(self, lm_config):
        """Identity quantizers on every role train exactly like no quantization."""
        identity = QuantizerSpec(method="identity")
        plain_cfg = lm_config()
        ident_cfg = lm_config(cell={"scope": {"input": identity, "recurrent": identity, "bias": identity,
                                              "output": identity}})
        data = load_task_data(plain_cfg)
        results = []
        for cfg in (plain_cfg, ident_cfg):
            model = _model(cfg, data)
            state = TrainState.fresh(model)
            metrics = train_epoch(model, data.train, cfg, state, make_rng(0, "quantize"), make_rng(0, "shuffle"))
            results.append((metrics, {g.name: g.master.copy() for g in model.weights}))
        assert [m.value for m in results[0][0]] == [m.value for m in results[1][0]]
        for name, master in results[0][1].items():
            np.testing.assert_array_equal(master, results[1][1][name])

    @pytest.mark.unit
    def test_evaluation_is_deterministic(self, lm_config):
        """Evaluation draws nothing: repeated calls agree in both modes."""
        spec = QuantizerSpec(method="ternary", variant="stochastic")
        cfg = lm_config(cell={"scope": {"recurrent": spec}})
        data = load_task_data(cfg)
        model = _model(cfg, data)
        for mode in ("full_precision", "deterministic_quantized"):
            first = evaluate(model, data.valid, cfg, mode)
            second = evaluate(model, data.valid, cfg, mode)
            assert first.value == second.value
            assert first.kind == "bpc" and first.mode == mode

    @pytest.mark.unit
    def test_evaluate_metrics_kinds(self, classify_config):
        """Classification evaluation reports cross-entropy and accuracy."""
        cfg = classify_config()
        data = load_task_data(cfg)
        metrics = evaluate_metrics(_model(cfg, data), data.valid, cfg, "full_precision", "valid", 3)
        assert [m.kind for m in metrics] == ["cross_entropy", "accuracy"]
        assert all(m.epoch == 3 and m.split == "valid" for m in metrics)
        assert 0.0 <= metrics[1].value <= 1.0

    @pytest.mark.integration
    def test_learns_alternating_sequence(self, ab_corpus, lm_config):
        """A small net learns 'abab...' far below the 1 bit of a coin flip."""
        cfg = lm_config(cell={"kind": "vanilla", "hidden_size": 8, "activation": "tanh"},
                        data={"path": str(ab_corpus), "seq_length": 10})
        cfg = _with_train(cfg, learning_rate=0.05, batch_size=10, max_epochs=40, patience=40)
        data = load_task_data(cfg)
        model = _model(cfg, data)
        state = TrainState.fresh(model)
        quant_rng, shuffle_rng = make_rng(0, "quantize"), make_rng(0, "shuffle")
        for epoch in range(1, 41):
            state.epoch = epoch
            train_epoch(model, data.train, cfg, state, quant_rng, shuffle_rng)
        assert evaluate(model, data.valid, cfg, "full_precision").value < 0.5

    @pytest.mark.integration
    def test_overfits_repeated_sequence(self, cycle_corpus, lm_config):
        """Two unquantized tanh units memorize a repeated 10-character sequence."""
        cfg = lm_config(cell={"kind": "vanilla", "hidden_size": 2, "activation": "tanh"},
                        data={"path": str(cycle_corpus), "seq_length": 10})
        cfg = _with_train(cfg, learning_rate=0.05, batch_size=8)
        data = load_task_data(cfg)
        model = _model(cfg, data)
        state = TrainState.fresh(model)
        quant_rng, shuffle_rng = make_rng(0, "quantize"), make_rng(0, "shuffle")
        train_bpc = []
        for epoch in range(1, 501):
            state.epoch = epoch
            metrics = train_epoch(model, data.train, cfg, state, quant_rng, shuffle_rng)
            train_bpc.append([m for m in metrics if m.kind == "bpc"][0].value)
            if train_bpc[-1] < 0.1:
                break
        assert min(train_bpc) < 0.1

    @pytest.mark.integration
    def test_binary_recurrence_fails_tiny_task(self, cycle_corpus, lm_config):
        """A binarized ReLU recurrence stays above half the uniform baseline on the same task."""
        spec = QuantizerSpec(method="binary", variant="stochastic")
        cfg = lm_config(cell={"kind": "vanilla", "hidden_size": 32, "activation": "relu",
                              "scope": {"recurrent": spec}},
                        data={"path": str(cycle_corpus), "seq_length": 10})
        cfg = _with_train(cfg, learning_rate=0.01, batch_size=8)
        data = load_task_data(cfg)
        model = _model(cfg, data)
        state = TrainState.fresh(model)
        quant_rng, shuffle_rng = make_rng(0, "quantize"), make_rng(0, "shuffle")
        for epoch in range(1, 101):
            state.epoch = epoch
            metrics = train_epoch(model, data.train, cfg, state, quant_rng, shuffle_rng)
        uniform = np.log2(data.output_size)
        assert [m for m in metrics if m.kind == "bpc"][0].value > 0.5 * uniform


class TestFit:
    """Test the training driver."""

    @pytest.mark.unit
    def test_outputs(self, lm_config, tmp_path):
        """fit() writes metrics rows for both eval modes plus both checkpoints."""
        cfg = lm_config()
        result = fit(cfg, load_task_data(cfg), tmp_path / "run")
        assert result.epochs == 2
        assert (tmp_path / "run" / "best.ckpt").exists()
        assert (tmp_path / "run" / "last.ckpt").exists()

        rows = read_metrics(tmp_path / "run" / "metrics.csv")
        assert tuple(rows[0]) == METRICS_HEADER
        assert len(rows) == 12
        names = {row["metric"] for row in rows if row["split"] == "valid"}
        assert names == {"cross_entropy.full_precision", "bpc.full_precision",
                         "cross_entropy.deterministic_quantized", "bpc.deterministic_quantized"}
        assert all(row["wallclock_s"] == "0.000" for row in rows)

    @pytest.mark.unit
    def test_deterministic(self, classify_config, tmp_path):
        """Two runs with the same seed write identical metrics."""
        spec = QuantizerSpec(method="binary", variant="stochastic")
        cfg = classify_config(cell={"kind": "gru", "hidden_size": 6, "scope": {"recurrent": spec}})
        fit(cfg, load_task_data(cfg), tmp_path / "a")
        fit(cfg, load_task_data(cfg), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()

    @pytest.mark.unit
    def test_resume_matches_straight_run(self, lm_config, tmp_path):
        """Stopping after 2 epochs and resuming for a third equals 3 epochs in one go."""
        spec = QuantizerSpec(method="ternary", variant="stochastic")
        cfg = lm_config(cell={"scope": {"recurrent": spec}})
        three = _with_train(cfg, max_epochs=3)
        data = load_task_data(cfg)

        straight = fit(three, data, tmp_path / "straight")
        fit(cfg, data, tmp_path / "split")
        resumed = fit(three, data, tmp_path / "split", resume=tmp_path / "split" / "last.ckpt")

        assert resumed.epochs == 3
        assert resumed.state.step == straight.state.step
        for group in straight.model.weights:
            np.testing.assert_array_equal(group.master, resumed.model.weights[group.name].master)
        assert len(read_metrics(tmp_path / "split" / "metrics.csv")) == 18
