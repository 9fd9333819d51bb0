import numpy as np
import pytest

from hfmca.data import (
    Dataset,
    DatasetError,
    EegSegment,
    SynthConfig,
    load_dataset,
    loso_splits,
    save_dataset,
    segment_trials,
    synth_dataset,
    window_samples,
    zscore_channels,
)
from oracles import dft_power


def make_segment(subject=0, label=0, trial=0, channels=2, time=16, fill=None, rate=100.0):
    if fill is None:
        rng = np.random.default_rng(subject * 1000 + trial)
        samples = rng.normal(size=(channels, time)).astype(np.float32)
    else:
        samples = np.full((channels, time), fill, dtype=np.float32)
    return EegSegment(
        samples=samples, rate_hz=rate, subject_id=subject, label=label, trial_id=trial
    )


class TestSegmentTrials:
    def test_floor_count_and_coverage(self):
        rec = np.arange(3000, dtype=np.float32).reshape(3, 1000)
        segs = segment_trials(rec, 400, rate_hz=200.0, subject_id=1)
        assert len(segs) == 2
        np.testing.assert_array_equal(segs[0].samples, rec[:, 0:400])
        np.testing.assert_array_equal(segs[1].samples, rec[:, 400:800])

    def test_exact_fit(self):
        rec = np.zeros((1, 400), dtype=np.float32)
        assert len(segment_trials(rec, 400, rate_hz=200.0, subject_id=0)) == 1

    def test_window_longer_than_recording(self):
        rec = np.zeros((1, 100), dtype=np.float32)
        assert segment_trials(rec, 400, rate_hz=200.0, subject_id=0) == []

    def test_conservation(self):
        rng = np.random.default_rng(0)
        rec = rng.normal(size=(4, 130)).astype(np.float32)
        segs = segment_trials(rec, 32, rate_hz=64.0, subject_id=0)
        rebuilt = np.concatenate([s.samples for s in segs], axis=1)
        np.testing.assert_array_equal(rebuilt, rec[:, : 32 * len(segs)])

    def test_two_second_window_at_200hz(self):
        assert window_samples(200.0, 2.0) == 400

    def test_metadata_attached(self):
        rec = np.zeros((2, 64), dtype=np.float32)
        segs = segment_trials(rec, 32, rate_hz=128.0, subject_id=7, label=2, trial_id=5)
        assert all(s.subject_id == 7 and s.label == 2 and s.trial_id == 5 for s in segs)


class TestSaveLoad:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = Dataset.from_segments(
            [make_segment(subject=s, label=l, trial=t) for s in (0, 1) for l in (0, 1) for t in (0, 1)]
        )
        save_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d", normalize=False)
        assert len(loaded.segments) == len(ds.segments)
        for a, b in zip(loaded.segments, ds.segments):
            assert np.array_equal(a.samples, b.samples)
            assert (a.rate_hz, a.subject_id, a.label, a.trial_id) == (
                b.rate_hz, b.subject_id, b.label, b.trial_id
            )

    def test_empty_dataset(self, tmp_path):
        save_dataset(Dataset(segments=(), class_count=0, subject_ids=()), tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert loaded.segments == ()

    def test_two_saves_identical_bytes(self, tmp_path):
        ds = Dataset.from_segments([make_segment(trial=t) for t in range(3)])
        save_dataset(ds, tmp_path / "a")
        save_dataset(ds, tmp_path / "b")
        for name in ("manifest", "rec_00000.bin", "rec_00001.bin", "rec_00002.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="missing manifest"):
            load_dataset(tmp_path / "nowhere")

    def test_missing_recording_file(self, tmp_path):
        ds = Dataset.from_segments([make_segment()])
        save_dataset(ds, tmp_path / "d")
        (tmp_path / "d" / "rec_00000.bin").unlink()
        with pytest.raises(DatasetError, match="missing recording file"):
            load_dataset(tmp_path / "d")

    def test_non_finite_sample(self, tmp_path):
        ds = Dataset.from_segments([make_segment()])
        save_dataset(ds, tmp_path / "d")
        rec = tmp_path / "d" / "rec_00000.bin"
        blob = bytearray(rec.read_bytes())
        blob[5:9] = np.array([np.nan], dtype="<f4").tobytes()
        rec.write_bytes(bytes(blob))
        with pytest.raises(DatasetError, match="non-finite sample"):
            load_dataset(tmp_path / "d")

    def test_shape_mismatch(self, tmp_path):
        ds = Dataset.from_segments([make_segment()])
        save_dataset(ds, tmp_path / "d")
        rec = tmp_path / "d" / "rec_00000.bin"
        rec.write_bytes(rec.read_bytes()[:-4])
        with pytest.raises(DatasetError, match="shape mismatch"):
            load_dataset(tmp_path / "d")

    def test_bad_magic(self, tmp_path):
        ds = Dataset.from_segments([make_segment()])
        save_dataset(ds, tmp_path / "d")
        rec = tmp_path / "d" / "rec_00000.bin"
        blob = bytearray(rec.read_bytes())
        blob[:4] = b"XXXX"
        rec.write_bytes(bytes(blob))
        with pytest.raises(DatasetError, match="bad magic"):
            load_dataset(tmp_path / "d")

    def test_normalization_applied_on_load(self, tmp_path):
        ds = Dataset.from_segments([make_segment(trial=t) for t in range(2)])
        save_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d", normalize=True)
        for seg in loaded.segments:
            x = seg.samples.astype(np.float64)
            np.testing.assert_allclose(x.mean(axis=1), 0.0, atol=1e-6)
            np.testing.assert_allclose(x.std(axis=1), 1.0, atol=1e-5)

    def test_zscore_constant_channel(self):
        x = np.ones((2, 16), dtype=np.float32)
        out = zscore_channels(x)
        np.testing.assert_array_equal(out, np.zeros_like(x))


class TestSynthDataset:
    def test_noiseless_classes_recoverable_by_peak_detector(self):
        cfg = SynthConfig(
            class_count=2, subjects=2, segments_per_class=3, channels=2,
            window=256, rate_hz=128.0, noise_sigma=0.0, amplitude_jitter=0.0,
            freq_base_hz=8.0, freq_class_step_hz=16.0, freq_channel_step_hz=0.0,
        )
        ds = synth_dataset(cfg, seed=0)
        hits = 0
        for seg in ds.segments:
            powers = [
                dft_power(seg.samples[0].astype(np.float64), cfg.class_frequency(k, 0), cfg.rate_hz)
                for k in range(cfg.class_count)
            ]
            hits += int(np.argmax(powers) == seg.label)
        assert hits == len(ds.segments)

    def test_same_seed_bit_identical(self):
        a = synth_dataset(SynthConfig(segments_per_class=2), seed=5)
        b = synth_dataset(SynthConfig(segments_per_class=2), seed=5)
        assert len(a.segments) == len(b.segments)
        for x, y in zip(a.segments, b.segments):
            assert np.array_equal(x.samples, y.samples)

    def test_different_seed_differs(self):
        a = synth_dataset(SynthConfig(segments_per_class=1), seed=1)
        b = synth_dataset(SynthConfig(segments_per_class=1), seed=2)
        assert not np.array_equal(a.segments[0].samples, b.segments[0].samples)

    def test_default_config_class_power_dominates(self):
        # periodogram oracle: mean power at the class frequency beats the
        # same channel's power at the other classes' frequencies
        cfg = SynthConfig()
        ds = synth_dataset(cfg, seed=3)
        for klass in range(cfg.class_count):
            segs = [s for s in ds.segments if s.label == klass]
            own, other = [], []
            for seg in segs:
                for c in range(cfg.channels):
                    x = seg.samples[c].astype(np.float64)
                    own.append(dft_power(x, cfg.class_frequency(klass, c), cfg.rate_hz))
                    other.extend(
                        dft_power(x, cfg.class_frequency(k, c), cfg.rate_hz)
                        for k in range(cfg.class_count) if k != klass
                    )
            assert np.mean(own) > 2.0 * np.mean(other)

    def test_labels_and_counts(self):
        cfg = SynthConfig(class_count=3, subjects=2, segments_per_class=4)
        ds = synth_dataset(cfg, seed=0)
        assert len(ds.segments) == 3 * 2 * 4
        assert ds.class_count == 3
        assert ds.subject_ids == (0, 1)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError, match="class_count"):
            synth_dataset(SynthConfig(class_count=1), seed=0)

    def test_rejects_frequency_above_nyquist(self):
        with pytest.raises(ValueError, match="Nyquist"):
            synth_dataset(SynthConfig(rate_hz=30.0), seed=0)


class TestLosoSplits:
    def _dataset(self, subjects=3, per_subject=4):
        segs = [
            make_segment(subject=s, label=t % 2, trial=t)
            for s in range(subjects)
            for t in range(per_subject)
        ]
        return Dataset.from_segments(segs)

    def test_one_split_per_subject(self):
        ds = self._dataset(subjects=3)
        splits = loso_splits(ds)
        assert [s.held_out_subject for s in splits] == [0, 1, 2]
        for split in splits:
            test_subjects = {ds.segments[i].subject_id for i in split.test_indices}
            assert test_subjects == {split.held_out_subject}

    def test_partition_property(self):
        ds = self._dataset(subjects=4)
        for split in loso_splits(ds):
            train, test = set(split.train_indices), set(split.test_indices)
            assert not train & test
            assert train | test == set(range(len(ds.segments)))
            assert all(ds.segments[i].subject_id != split.held_out_subject for i in train)

    def test_fifteen_subjects(self):
        ds = self._dataset(subjects=15, per_subject=2)
        assert len(loso_splits(ds)) == 15

    def test_single_subject_rejected(self):
        ds = self._dataset(subjects=1)
        with pytest.raises(ValueError, match="two subjects"):
            loso_splits(ds)

    def test_unlabeled_segments_stay_out_of_test(self):
        segs = [make_segment(subject=s, label=None, trial=t) for s in (0, 1) for t in (0, 1)]
        segs += [make_segment(subject=s, label=0, trial=t + 2) for s in (0, 1) for t in (0, 1)]
        ds = Dataset.from_segments(segs)
        for split in loso_splits(ds):
            assert all(ds.segments[i].label is not None for i in split.test_indices)


class TestValidation:
    def test_heterogeneous_shapes_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            Dataset.from_segments([make_segment(time=16), make_segment(time=32)])

    def test_non_finite_segment_rejected(self):
        seg = make_segment()
        seg.samples[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite sample"):
            Dataset.from_segments([seg])

    def test_short_segment_rejected(self):
        seg = EegSegment(
            samples=np.zeros((1, 4), dtype=np.float32),
            rate_hz=10.0, subject_id=0, label=None, trial_id=0,
        )
        with pytest.raises(ValueError, match="at least 8 samples"):
            seg.validate()
