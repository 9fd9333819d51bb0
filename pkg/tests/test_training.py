import dataclasses

import numpy as np
import pytest

from hfmca import objective
from hfmca.augment import AugPolicy
from hfmca.data import Dataset, EegSegment, SynthConfig, loso_splits, synth_dataset
from hfmca.model import ModelConfig, PARAM_FIELDS, init_params
from hfmca.objective import LossConfig
from hfmca.training import (
    DivergenceError,
    OptimizerState,
    TrainConfig,
    clip_global_norm,
    init_optimizer_state,
    load_training_checkpoint,
    optimizer_step,
    pretrain,
    pretrain_loso,
)

TINY_MODEL = ModelConfig(
    channels=2, time=64, views=2, d_low=4, d_high=4,
    conv_width=9, conv_maps=4, pool=2, enc_hidden=16, proj_hidden=16,
)
TINY_POLICY = AugPolicy(views_t=2)


def tiny_config(**kw):
    base = dict(
        model=TINY_MODEL,
        policy=TINY_POLICY,
        loss=LossConfig(),
        batch_size=4,
        epochs=2,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_dataset(subjects=2, per_subject=4, seed=0):
    cfg = SynthConfig(
        class_count=2, subjects=subjects, segments_per_class=per_subject // 2 or 1,
        channels=2, window=64, rate_hz=64.0, noise_sigma=0.3,
        freq_base_hz=6.0, freq_class_step_hz=10.0, freq_channel_step_hz=0.5,
    )
    return synth_dataset(cfg, seed)


def params_equal(a, b):
    return all(np.array_equal(getattr(a, n), getattr(b, n)) for n in PARAM_FIELDS)


class TestOptimizerStep:
    def _scalar_setup(self):
        params = init_params(TINY_MODEL, 0)
        grads = dataclasses.replace(params)
        for name in PARAM_FIELDS:
            setattr(grads, name, np.zeros_like(getattr(params, name)))
        return params, grads

    def test_zero_gradients_leave_params(self):
        params, grads = self._scalar_setup()
        state = init_optimizer_state(params)
        new_params, new_state = optimizer_step(params, grads, state, lr=1e-3)
        assert params_equal(new_params, params)
        assert new_state.step == 1

    def test_first_step_hand_value(self):
        # grad 1 everywhere: bias-corrected m_hat = v_hat = 1 at t = 1,
        # so the parameter moves by lr / (1 + eps)
        params, grads = self._scalar_setup()
        for name in PARAM_FIELDS:
            setattr(grads, name, np.ones_like(getattr(params, name)))
        state = init_optimizer_state(params)
        new_params, _ = optimizer_step(params, grads, state, lr=1e-3)
        delta = params.conv_w - new_params.conv_w
        expected = 1e-3 / (1.0 + 1e-8)
        np.testing.assert_allclose(delta, expected, rtol=0, atol=1e-18)

    def test_ten_steps_deterministic(self):
        results = []
        for _ in range(2):
            params = init_params(TINY_MODEL, 1)
            state = init_optimizer_state(params)
            rng = np.random.default_rng(7)
            for _ in range(10):
                grads = dataclasses.replace(params)
                for name in PARAM_FIELDS:
                    setattr(grads, name, rng.normal(size=getattr(params, name).shape))
                params, state = optimizer_step(params, grads, state, lr=1e-2)
            results.append(params)
        assert params_equal(results[0], results[1])

    def test_non_finite_gradient_raises(self):
        params, grads = self._scalar_setup()
        grads.conv_w[0, 0, 0] = np.nan
        with pytest.raises(DivergenceError, match="divergence at step 0"):
            optimizer_step(params, grads, init_optimizer_state(params), lr=1e-3)


class TestClip:
    def test_norm_reduced_to_bound(self):
        params = init_params(TINY_MODEL, 0)
        grads = dataclasses.replace(params)
        for name in PARAM_FIELDS:
            setattr(grads, name, np.full_like(getattr(params, name), 10.0))
        clip_global_norm(grads, 5.0)
        total = sum(float(np.sum(a * a)) for a in grads.arrays())
        assert abs(np.sqrt(total) - 5.0) < 1e-9

    def test_small_gradients_untouched(self):
        params = init_params(TINY_MODEL, 0)
        grads = dataclasses.replace(params)
        for name in PARAM_FIELDS:
            setattr(grads, name, np.full_like(getattr(params, name), 1e-6))
        before = [a.copy() for a in grads.arrays()]
        clip_global_norm(grads, 5.0)
        for a, b in zip(grads.arrays(), before):
            assert np.array_equal(a, b)


class TestPretrain:
    def test_step_count(self):
        ds = tiny_dataset(subjects=2, per_subject=4)  # 8 segments
        _, metrics = pretrain(ds.segments, tiny_config(epochs=1))
        assert len(metrics) == 2  # floor(8 / 4) batches
        assert [m["step"] for m in metrics] == [0, 1]

    def test_metrics_schema(self):
        ds = tiny_dataset()
        _, metrics = pretrain(ds.segments, tiny_config(epochs=1))
        required = {
            "epoch", "step", "lr", "loss_total", "loss_logdet", "loss_cont",
            "rho_max", "offdiag_rms_r1", "offdiag_rms_r2", "z_var_min",
            "cca_residual",
        }
        assert required <= set(metrics[0])

    def test_same_seed_bit_identical(self):
        ds = tiny_dataset()
        p1, m1 = pretrain(ds.segments, tiny_config())
        p2, m2 = pretrain(ds.segments, tiny_config())
        assert params_equal(p1, p2)
        assert m1 == m2

    def test_workers_do_not_change_results(self):
        ds = tiny_dataset()
        p1, m1 = pretrain(ds.segments, tiny_config(workers=1))
        p2, m2 = pretrain(ds.segments, tiny_config(workers=3))
        assert params_equal(p1, p2)
        assert m1 == m2

    def test_checkpoint_resume_matches_straight_run(self, tmp_path):
        ds = tiny_dataset()
        straight, _ = pretrain(ds.segments, tiny_config(epochs=4))
        first = tmp_path / "first"
        pretrain(ds.segments, tiny_config(epochs=2), out_dir=first)
        resumed, _ = pretrain(
            ds.segments, tiny_config(epochs=4), resume_from=first / "checkpoint.bin"
        )
        assert params_equal(straight, resumed)

    def test_interval_checkpoints_written(self, tmp_path):
        ds = tiny_dataset()
        out = tmp_path / "run"
        pretrain(ds.segments, tiny_config(epochs=4, checkpoint_interval=2), out_dir=out)
        assert (out / "checkpoint_ep0002.bin").is_file()
        assert (out / "checkpoint.bin").is_file()
        assert (out / "metrics.jsonl").is_file()

    def test_final_checkpoint_reloads(self, tmp_path):
        ds = tiny_dataset()
        out = tmp_path / "run"
        params, _ = pretrain(ds.segments, tiny_config(), out_dir=out)
        loaded, state, epochs_done = load_training_checkpoint(out / "checkpoint.bin")
        assert params_equal(loaded, params)
        assert epochs_done == 2
        assert state.step == len(tiny_dataset().segments) // 4 * 2

    def test_divergence_aborts_with_checkpoint_path(self, tmp_path, monkeypatch):
        ds = tiny_dataset()
        calls = {"n": 0}
        real = objective.total_loss

        def sabotage(batch, cfg):
            calls["n"] += 1
            if calls["n"] > 3:
                return float("nan"), (float("nan"), float("nan"))
            return real(batch, cfg)

        monkeypatch.setattr(objective, "total_loss", sabotage)
        out = tmp_path / "run"
        with pytest.raises(DivergenceError) as err:
            pretrain(ds.segments, tiny_config(epochs=4, checkpoint_interval=1), out_dir=out)
        assert "divergence at step 3" in str(err.value)
        assert err.value.checkpoint_path is not None
        assert "checkpoint_ep0001" in err.value.checkpoint_path

    def test_batch_bigger_than_dataset_rejected(self):
        ds = tiny_dataset(subjects=2, per_subject=2)
        with pytest.raises(ValueError, match="batch_size"):
            pretrain(ds.segments, tiny_config(batch_size=32))

    def test_loss_decreases_on_synthetic_data(self):
        # 20-step moving average of the total loss drops over 200 steps
        ds = tiny_dataset(subjects=2, per_subject=24, seed=1)
        steps_per_epoch = len(ds.segments) // 8
        epochs = -(-200 // steps_per_epoch)
        cfg = tiny_config(batch_size=8, epochs=epochs, seed=1)
        _, metrics = pretrain(ds.segments, cfg)
        losses = np.array([m["loss_total"] for m in metrics])[:200]
        moving = np.convolve(losses, np.ones(20) / 20, mode="valid")
        assert moving[-1] < moving[0]
        assert losses[-1] < 0.0


class _TrackedSegment:
    def __init__(self, seg):
        object.__setattr__(self, "_seg", seg)
        object.__setattr__(self, "samples_reads", 0)
        object.__setattr__(self, "label_reads", 0)

    @property
    def samples(self):
        object.__setattr__(self, "samples_reads", self.samples_reads + 1)
        return self._seg.samples

    @property
    def label(self):
        object.__setattr__(self, "label_reads", self.label_reads + 1)
        return self._seg.label

    @property
    def subject_id(self):
        return self._seg.subject_id


class TestPretrainLoso:
    def test_one_params_set_per_subject(self):
        ds = tiny_dataset(subjects=3)
        result = pretrain_loso(ds, tiny_config(epochs=1))
        assert sorted(result.params_by_subject) == [0, 1, 2]

    def test_held_out_segments_never_read(self):
        ds = tiny_dataset(subjects=3)
        cfg = tiny_config(epochs=1)
        for split in loso_splits(ds):
            tracked = [_TrackedSegment(seg) for seg in ds.segments]
            train = [tracked[i] for i in split.train_indices]
            pretrain(train, cfg)
            for i in split.test_indices:
                assert tracked[i].samples_reads == 0
            assert all(t.label_reads == 0 for t in tracked)

    def test_loso_deterministic(self):
        ds = tiny_dataset(subjects=2)
        a = pretrain_loso(ds, tiny_config(epochs=1))
        b = pretrain_loso(ds, tiny_config(epochs=1))
        for sid in a.params_by_subject:
            assert params_equal(a.params_by_subject[sid], b.params_by_subject[sid])


class TestConfigValidation:
    def test_policy_views_must_match_model(self):
        with pytest.raises(ValueError, match="views_t"):
            tiny_config(policy=AugPolicy(views_t=4)).validate()

    def test_batch_size_minimum(self):
        with pytest.raises(ValueError, match="batch_size"):
            tiny_config(batch_size=1).validate()
