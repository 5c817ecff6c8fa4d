"""Training machinery: balanced batches, early stopping, AUC, noise, benchmark."""

import numpy as np
import numpy.testing as npt
import pytest

from avasd import data_io, train_eval
from avasd.errors import ConfigError, DataFormatError
from avasd.model_asd import AsdModel, ModelConfig
from avasd.tensor_core import Prng
from avasd.train_eval import (
    EvalReport,
    PreparedSequence,
    TrainConfig,
    add_gaussian_noise,
    balanced_batches,
    benchmark_inference,
    benchmark_models,
    compute_auc,
    evaluate,
    prepare_dataset,
    train,
)


def auc_pairwise_oracle(scores, labels):
    """O(n^2) pairwise statistic with half credit for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def fake_seq(i, majority):
    labels = np.ones(4, dtype=int) if majority else np.zeros(4, dtype=int)
    return PreparedSequence(id=f"s{i}", split="train", labels=labels, video_path="",
                            tiles=np.zeros((4, 13, 20)), majority_label=majority)


class TestBalancedBatches:
    def test_even_classes_cover_once(self):
        seqs = [fake_seq(i, 1) for i in range(10)] + [fake_seq(10 + i, 0) for i in range(10)]
        batches = list(balanced_batches(seqs, 4, Prng(1)))
        assert len(batches) == 5
        seen = []
        for batch in batches:
            assert sum(s.majority_label for s in batch) == 2
            seen.extend(s.id for s in batch)
        assert sorted(seen) == sorted(s.id for s in seqs)  # no resampling needed

    def test_minority_resampled(self):
        seqs = [fake_seq(i, 1) for i in range(2)] + [fake_seq(10 + i, 0) for i in range(100)]
        batches = list(balanced_batches(seqs, 4, Prng(2)))
        assert len(batches) == 50
        neg_seen = []
        for batch in batches:
            assert sum(s.majority_label for s in batch) == 2
            neg_seen.extend(s.id for s in batch if s.majority_label == 0)
        assert sorted(neg_seen) == sorted(f"s{10 + i}" for i in range(100))  # negatives exactly once

    def test_same_seed_same_composition(self):
        seqs = [fake_seq(i, i % 2) for i in range(20)]
        a = [[s.id for s in b] for b in balanced_batches(seqs, 4, Prng(3))]
        b = [[s.id for s in b] for b in balanced_batches(seqs, 4, Prng(3))]
        assert a == b

    def test_missing_class_rejected(self):
        seqs = [fake_seq(i, 1) for i in range(4)]
        with pytest.raises(DataFormatError, match="both classes"):
            list(balanced_batches(seqs, 4, Prng(4)))

    def test_odd_batch_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            list(balanced_batches([fake_seq(0, 0), fake_seq(1, 1)], 3, Prng(5)))


class TestAuc:
    def test_perfect_separation(self):
        assert compute_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert compute_auc([0.5] * 10, [1, 0] * 5) == 0.5

    def test_reversed(self):
        assert compute_auc([0.1, 0.9], [1, 0]) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_pairwise_oracle(self, seed):
        rng = Prng(100 + seed)
        n = 200
        scores = np.round(rng.uniform(size=n), 2)  # coarse grid forces ties
        labels = (rng.uniform(size=n) > 0.4).astype(int)
        labels[:2] = [0, 1]
        assert abs(compute_auc(scores, labels) - auc_pairwise_oracle(scores, labels)) <= 1e-9

    def test_single_class_rejected(self):
        with pytest.raises(DataFormatError, match="both classes"):
            compute_auc([0.1, 0.9], [1, 1])


class TestNoise:
    def test_zero_signal_unchanged(self):
        noisy, sigma = add_gaussian_noise(np.zeros(1000), Prng(6))
        assert sigma == 0.0
        npt.assert_array_equal(noisy, np.zeros(1000))

    def test_unit_square_wave_moments(self):
        wave = np.tile([1.0, -1.0], 500_000)  # RMS exactly 1
        noisy, sigma = add_gaussian_noise(wave, Prng(7))
        assert sigma == 1.0
        noise = noisy - wave
        assert 0.99 <= noise.std() <= 1.01
        assert abs(noise.mean()) <= 0.01

    def test_snr_zero_db(self):
        rng = Prng(8)
        wave = rng.normal(scale=0.3, size=200_000)
        noisy, sigma = add_gaussian_noise(wave, Prng(9))
        signal_power = np.mean(wave ** 2)
        noise_power = np.mean((noisy - wave) ** 2)
        assert abs(10 * np.log10(signal_power / noise_power)) < 0.1  # ~0 dB

    def test_noise_regenerated_per_record(self):
        wave = np.ones(1000)
        a, _ = add_gaussian_noise(wave, Prng(10).child(0))
        b, _ = add_gaussian_noise(wave, Prng(10).child(1))
        assert not np.array_equal(a, b)


def fabricated_scores(auc_tenths):
    """Validation scores whose AV-head AUC is exactly auc_tenths/10."""
    labels = np.array([1] * 10 + [0] * 10)
    neg = np.where(np.arange(10) < 10 - auc_tenths, 0.7, 0.5)
    scores = np.concatenate([np.full(10, 0.6), neg])
    return scores, labels


class TestEarlyStopping:
    def _run(self, monkeypatch, auc_schedule, max_epochs=30):
        cfg_model = ModelConfig.tiny("m1", seq_len=4, audio_shape=(13, 20), image_hw=100,
                                     visual_table=(("conv3d", 2, (5, 7, 7), (1, 4, 4), (0, 0, 0)),
                                                   ("pool", (3, 3), (3, 3))))
        model = AsdModel(cfg_model, seed=11)
        seqs = [fake_seq(i, i % 2) for i in range(8)]
        prepared = train_eval.PreparedDataset(
            train=seqs, val=seqs[:4],
            video_stats=train_eval.FeatureStats(0.0, 1.0),
            audio_stats=train_eval.FeatureStats(0.0, 1.0),
            mfcc_cfg=None)
        calls = {"epoch": 0}

        def fake_scores(model_, seqs_, stats_, chunk=32):
            calls["epoch"] += 1
            tenths = auc_schedule(min(calls["epoch"], max_epochs))
            scores, labels = fabricated_scores(tenths)
            return {"av": scores, "a": scores, "v": scores}, labels

        def fake_batch_arrays(batch, stats, dtype=np.float64):
            b = len(batch)
            rng = Prng(200)
            return (rng.normal(size=(b, 4, 5, 100, 100)), rng.normal(size=(b, 4, 13, 20)),
                    np.stack([s.labels for s in batch]))

        monkeypatch.setattr(train_eval, "_scores_over", fake_scores)
        monkeypatch.setattr(train_eval, "batch_arrays", fake_batch_arrays)
        cfg = TrainConfig(lr=0.0, momentum=0.0, batch_size=4, max_epochs=max_epochs, patience=5, seed=0)
        return train(model, prepared, cfg)

    def test_constant_auc_stops_after_exactly_six_epochs(self, monkeypatch):
        result = self._run(monkeypatch, lambda epoch: 5)
        assert result.epochs_run == 6  # 1 best + 5 non-improving
        assert result.stopped_early
        assert result.best_epoch == 1

    def test_strict_improvement_never_stops(self, monkeypatch):
        result = self._run(monkeypatch, lambda epoch: min(epoch, 10), max_epochs=8)
        assert result.epochs_run == 8
        assert not result.stopped_early
        assert result.best_epoch == 8

    def test_recovery_resets_counter(self, monkeypatch):
        # dips for 4 epochs, recovers, then plateaus: stops 5 after the recovery
        schedule = {1: 5, 2: 3, 3: 3, 4: 3, 5: 3, 6: 7, 7: 7, 8: 7, 9: 7, 10: 7, 11: 7}
        result = self._run(monkeypatch, lambda epoch: schedule.get(epoch, 7))
        assert result.best_epoch == 6
        assert result.epochs_run == 11


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return data_io.gen_synthetic(out, n_sequences=10, seq_len=4, confuser_fraction=0.25, seed=20)


class TestPreparedPipeline:
    def test_prepare_shapes_and_stats(self, dataset):
        prepared = prepare_dataset(dataset.out_dir)
        assert len(prepared.train) == 8 and len(prepared.val) == 2
        seq = prepared.train[0]
        assert seq.tiles.shape == (4, 13, 20)
        # normalized audio features: roughly centered
        all_tiles = np.concatenate([s.tiles.ravel() for s in prepared.train])
        assert abs(all_tiles.mean()) < 0.05
        assert prepared.video_stats.var > 0

    def test_stats_reuse(self, dataset):
        prepared = prepare_dataset(dataset.out_dir)
        again = prepare_dataset(dataset.out_dir, video_stats=prepared.video_stats,
                                audio_stats=prepared.audio_stats)
        npt.assert_allclose(again.train[0].tiles, prepared.train[0].tiles, atol=0)

    def test_noise_changes_tiles(self, dataset):
        clean = prepare_dataset(dataset.out_dir)
        noisy = prepare_dataset(dataset.out_dir, noise=True, noise_seed=1,
                                video_stats=clean.video_stats, audio_stats=clean.audio_stats)
        assert noisy.noise_condition == "noisy"
        assert not np.allclose(noisy.train[0].tiles, clean.train[0].tiles)

    def test_label_count_mismatch_rejected(self, dataset, tmp_path):
        records = data_io.read_manifest(dataset.manifest_path)
        records[0].labels = np.array([0, 1])  # video has 4 steps
        bad_manifest = tmp_path / "manifest.txt"
        data_io.write_manifest(bad_manifest, records)
        import shutil

        for sub in ("video", "audio"):
            shutil.copytree(f"{dataset.out_dir}/{sub}", tmp_path / sub)
        with pytest.raises(DataFormatError, match="labels"):
            prepare_dataset(tmp_path)

    def test_evaluate_report(self, dataset):
        prepared = prepare_dataset(dataset.out_dir)
        model = AsdModel(ModelConfig.desk("m1", seq_len=4), seed=21)
        report = evaluate(model, prepared.val, prepared.video_stats)
        assert 0.0 <= report.auc_av <= 1.0
        assert report.n_steps == 2 * 4
        assert report.noise_condition == "clean"
        mapping = report.to_mapping()
        assert "auc_av" in mapping and "latency.mean_ms" not in mapping


class TestTrainIntegration:
    def test_two_runs_bit_identical(self, tmp_path):
        ds = data_io.gen_synthetic(tmp_path / "d", n_sequences=12, seq_len=3,
                                   confuser_fraction=0.0, seed=22)
        prepared = prepare_dataset(ds.out_dir)
        cfg = TrainConfig(lr=0.01, momentum=0.9, batch_size=4, max_epochs=2, patience=5, seed=5)
        states = []
        for _ in range(2):
            model = AsdModel(ModelConfig.desk("m1", seq_len=3), seed=9)
            train(model, prepared, cfg)
            states.append({name: arr.copy() for name, arr in model.state_items()})
        for name in states[0]:
            npt.assert_array_equal(states[0][name], states[1][name])

    def test_checkpoint_carries_norm_stats(self, tmp_path):
        ds = data_io.gen_synthetic(tmp_path / "d2", n_sequences=10, seq_len=3,
                                   confuser_fraction=0.0, seed=23)
        prepared = prepare_dataset(ds.out_dir)
        model = AsdModel(ModelConfig.desk("m2", seq_len=3), seed=10)
        train(model, prepared, TrainConfig(batch_size=4, max_epochs=1, seed=1))
        path = tmp_path / "m.avck"
        data_io.save_checkpoint(model, path)
        back = data_io.load_checkpoint(path)
        assert float(back.buffers["norm.video_mean"][0]) == prepared.video_stats.mean
        assert float(back.buffers["norm.audio_var"][0]) == prepared.audio_stats.var


class TestBenchmark:
    def test_reps_validation(self):
        model = AsdModel(ModelConfig.tiny("m1"), seed=0)
        with pytest.raises(ConfigError, match="reps"):
            benchmark_inference(model, reps=5, warmup=0)

    def test_counts_and_fields(self):
        model = AsdModel(ModelConfig.tiny("m1"), seed=0)
        stats = benchmark_inference(model, reps=12, warmup=2, seed=1)
        assert stats.reps == 12 and stats.warmup == 2
        assert stats.mean_ms > 0 and stats.median_ms > 0 and stats.p95_ms > 0

    def test_interleaved_models(self):
        models = {v: AsdModel(ModelConfig.tiny(v), seed=0) for v in ("m1", "m3")}
        stats = benchmark_models(models, reps=10, warmup=2, seed=2)
        assert set(stats) == {"m1", "m3"}
        assert all(s.reps == 10 for s in stats.values())
