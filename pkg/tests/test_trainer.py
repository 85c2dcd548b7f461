"""Optimizer updates, schedule, and the training loop."""

import hashlib

import numpy as np
import pytest

from beat.model import init_model
from beat.synth import SynthConfig, make_dataset
from beat.trainer import (
    OptimizerState,
    TrainHistory,
    adamw_step,
    clip_grads,
    cosine_lr,
    train,
)

from conftest import tiny_config


def scalar_params():
    config = tiny_config()
    params = init_model(config, seed=0)
    return params


class TestAdamwStep:
    def test_zero_grad_no_decay_is_identity(self):
        params = scalar_params()
        before = {n: params[n].copy() for n in params.learnable_names()}
        state = OptimizerState.for_params(params, lr=0.1, weight_decay=0.0)
        grads = {n: np.zeros_like(params[n]) for n in params.learnable_names()}
        adamw_step(params, grads, state)
        for name in before:
            np.testing.assert_array_equal(params[name], before[name])

    def test_decoupled_decay_with_zero_grad(self):
        params = scalar_params()
        before = {n: params[n].copy() for n in params.learnable_names()}
        state = OptimizerState.for_params(params, lr=0.1, weight_decay=0.01)
        grads = {n: np.zeros_like(params[n]) for n in params.learnable_names()}
        adamw_step(params, grads, state)
        for name in before:
            np.testing.assert_allclose(params[name], 0.999 * before[name], rtol=1e-12)

    def test_single_step_hand_computed(self):
        # one scalar parameter, g=1, defaults: m=0.1, v=0.001, bias-corrected
        # m_hat=1, v_hat=1, delta = -lr * 1/(1 + eps)
        params = scalar_params()
        name = "patch_b"
        params[name] = np.array([2.0] + [0.0] * (params[name].size - 1))
        state = OptimizerState.for_params(params, lr=1e-4)
        grads = {n: np.zeros_like(params[n]) for n in params.learnable_names()}
        grads[name][0] = 1.0
        adamw_step(params, grads, state)
        m_hat = (0.1 * 1.0) / (1 - 0.9)
        v_hat = (0.001 * 1.0) / (1 - 0.999)
        expected = 2.0 - 1e-4 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert params[name][0] == pytest.approx(expected, rel=1e-12)
        assert state.step == 1

    def test_shape_mismatch_rejected(self):
        params = scalar_params()
        state = OptimizerState.for_params(params)
        grads = {n: np.zeros_like(params[n]) for n in params.learnable_names()}
        grads["patch_b"] = np.zeros(3)
        with pytest.raises(ValueError, match="shape"):
            adamw_step(params, grads, state)


class TestCosineLr:
    def test_start_is_base(self):
        assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)

    def test_end_is_min(self):
        assert cosine_lr(100, 100, 1e-3, min_lr=1e-5) == pytest.approx(1e-5)

    def test_midpoint(self):
        assert cosine_lr(50, 100, 1e-3, min_lr=1e-5) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_monotone_nonincreasing(self):
        values = [cosine_lr(s, 200, 1e-3) for s in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_zero_total_steps(self):
        with pytest.raises(ValueError, match="total_steps"):
            cosine_lr(0, 0, 1e-3)


def test_clip_grads():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_grads(grads, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) == pytest.approx(1.0)
    grads = {"a": np.array([0.3])}
    clip_grads(grads, max_norm=1.0)
    assert grads["a"][0] == pytest.approx(0.3)  # under the cap: untouched


def small_datasets(n_train=12, n_eval=4):
    config = SynthConfig(duration=2.0, fs=250.0, n_leads=1, noise_std=0.02, seed=0)
    train_set = make_dataset(n_train, config, context_len=20, pred_len=10, seed=100)
    eval_set = make_dataset(n_eval, config, context_len=20, pred_len=10, seed=101)
    return train_set, eval_set


class TestTrainLoop:
    def test_zero_epochs(self):
        train_set, eval_set = small_datasets()
        config = tiny_config()
        params, history = train(config, train_set, eval_set, epochs=0, seed=1)
        assert history.rows == []
        # codebooks were replaced by k-means on encoder outputs
        raw = init_model(config, seed=1)
        assert not np.array_equal(params["codebook1"], raw["codebook1"])

    def test_loss_decreases_on_fixture(self):
        train_set, eval_set = small_datasets(24, 6)
        config = tiny_config(codebook_size1=8, codebook_size2=8)
        params, history = train(
            config, train_set, eval_set, epochs=20, seed=2,
            base_lr=3e-3, batch_size=4,
        )
        first = history.rows[0]["l_total"]
        last = history.rows[-1]["l_total"]
        assert last < first

    def test_seed_determinism(self):
        train_set, eval_set = small_datasets()
        config = tiny_config()
        params_a, hist_a = train(config, train_set, eval_set, epochs=3, seed=5,
                                 base_lr=1e-3, batch_size=4)
        params_b, hist_b = train(config, train_set, eval_set, epochs=3, seed=5,
                                 base_lr=1e-3, batch_size=4)
        assert hist_a.rows == hist_b.rows
        for name in params_a.arrays:
            np.testing.assert_array_equal(params_a[name], params_b[name])

    def test_eval_set_not_mutated(self):
        train_set, eval_set = small_datasets()

        def digest(pairs):
            h = hashlib.sha256()
            for pair in pairs:
                h.update(pair.context.samples.tobytes())
                h.update(pair.future.tobytes())
            return h.hexdigest()

        before = digest(eval_set)
        train(tiny_config(), train_set, eval_set, epochs=2, seed=3, batch_size=4)
        assert digest(eval_set) == before

    def test_history_rows_per_epoch(self):
        train_set, eval_set = small_datasets()
        _, history = train(tiny_config(), train_set, eval_set, epochs=4, seed=4,
                           batch_size=4)
        assert [row["epoch"] for row in history.rows] == [1, 2, 3, 4]
        for row in history.rows:
            for key in ("l_recon", "l_pred", "l_vq", "l_total", "utilization_pct", "lr"):
                assert np.isfinite(row[key])

    def test_empty_sets_rejected(self):
        train_set, eval_set = small_datasets()
        with pytest.raises(ValueError, match="train_set"):
            train(tiny_config(), [], eval_set, epochs=1, seed=0)
        with pytest.raises(ValueError, match="eval_set"):
            train(tiny_config(), train_set, [], epochs=1, seed=0)


def test_history_csv_round_trip(tmp_path):
    history = TrainHistory()
    history.append(epoch=1, l_recon=1.0, l_pred=2.0, l_vq=0.5, l_total=3.5,
                   utilization_pct=50.0, lr=1e-3)
    history.append(epoch=2, l_recon=0.9, l_pred=1.9, l_vq=0.4, l_total=3.2,
                   utilization_pct=60.0, lr=9e-4)
    path = tmp_path / "history.csv"
    history.write_csv(path)
    loaded = TrainHistory.read_csv(path)
    assert loaded.rows == history.rows
