import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from melkit.catalog import TrackRecord, Vocabulary
from melkit.dsp import MelFeature, write_feature
from melkit.errors import EmptyCatalog, TooShort
from melkit.sampler import (
    BatchFeeder,
    ContrastiveBatch,
    FeatureStore,
    MixupConfig,
    SupervisedBatch,
    _mixup_arrays,
    build_contrastive_batch,
    build_supervised_batch,
    mixup,
    positive_pair_starts,
    sample_positive_pair,
    sample_snippet,
    snippet_start,
)


@pytest.fixture(scope="module")
def store_and_records(tmp_path_factory):
    """Ten tracks of varying length whose feature cell (m, t) encodes t,
    so window placement is directly observable."""
    root = tmp_path_factory.mktemp("feats")
    records = []
    rng = np.random.default_rng(0)
    for i in range(10):
        frames = int(rng.integers(300, 1200))
        ramp = np.tile(np.arange(frames, dtype=np.float32), (96, 1))
        write_feature(MelFeature(ramp, 0.010, f"t{i}"), root / f"t{i}.maf")
        records.append(TrackRecord(
            track_id=f"t{i}", duration_frames=frames, labels={f"lab{i % 3}"},
            split="train", feature_path=f"t{i}.maf"))
    return FeatureStore(root), records


class TestSnippetStart:
    def test_single_position(self):
        rng = np.random.default_rng(0)
        assert all(snippet_start(300, rng) == 0 for _ in range(20))

    def test_too_short(self):
        with pytest.raises(TooShort):
            snippet_start(299, np.random.default_rng(0))

    def test_uniform_start_chi_square(self):
        # paper-length track: 18300 frames -> 18001 positions
        rng = np.random.default_rng(42)
        draws = np.array([snippet_start(18300, rng) for _ in range(100_000)])
        assert draws.min() >= 0 and draws.max() <= 18000
        counts, _ = np.histogram(draws, bins=20, range=(0, 18001))
        chi2 = ((counts - 5000.0) ** 2 / 5000.0).sum()
        # chi2 with 19 dof: 0.999 quantile ~ 43.8
        assert chi2 < 43.8

    @given(st.integers(300, 5000), st.integers(0, 2 ** 16))
    @settings(max_examples=60, deadline=None)
    def test_start_stays_in_bounds(self, duration, seed):
        start = snippet_start(duration, np.random.default_rng(seed))
        assert 0 <= start <= duration - 300


class TestPositivePairs:
    def test_single_position_pair_is_identical(self, store_and_records):
        store, _ = store_and_records
        rec = TrackRecord("t0", 300, set(), "train", feature_path="t0.maf")
        a, b = sample_positive_pair(rec, np.random.default_rng(1), store)
        np.testing.assert_array_equal(a, b)

    def test_pair_distance_bound_100k_draws(self):
        rng = np.random.default_rng(7)
        for _ in range(100_000):
            a, b = positive_pair_starts(2000, rng, max_pair_distance_frames=500)
            assert abs(a - b) < 500
            assert 0 <= b <= 1700

    def test_unbounded_distance_gives_uniform_marginal(self):
        rng = np.random.default_rng(9)
        duration = 800
        seconds = np.array([
            positive_pair_starts(duration, rng, max_pair_distance_frames=duration)[1]
            for _ in range(60_000)])
        # second start uniform on [0, 500]
        counts, _ = np.histogram(seconds, bins=10, range=(0, duration - 300 + 1))
        expect = len(seconds) / 10
        chi2 = ((counts - expect) ** 2 / expect).sum()
        assert chi2 < 27.9  # chi2(9 dof) 0.999 quantile

    def test_snippet_never_reads_outside_track(self, store_and_records):
        store, records = store_and_records
        rng = np.random.default_rng(3)
        for _ in range(300):
            rec = records[int(rng.integers(len(records)))]
            snip = sample_snippet(rec, rng, store)
            assert snip.shape == (96, 300)
            # ramp features encode the frame index
            first = int(snip[0, 0])
            assert 0 <= first <= rec.duration_frames - 300
            np.testing.assert_array_equal(snip[0], np.arange(first, first + 300))


class TestSupervisedBatch:
    def test_shapes_and_multi_hot(self, store_and_records):
        store, records = store_and_records
        vocab = Vocabulary(["lab0", "lab1", "lab2"])
        batch = build_supervised_batch(
            records, 16, vocab, MixupConfig(enabled=False), np.random.default_rng(0), store)
        assert batch.features.shape == (16, 96, 300)
        assert batch.labels.shape == (16, 3)
        for row, tid in zip(batch.labels, batch.track_ids):
            want = vocab.multi_hot({f"lab{int(tid[1:]) % 3}"})
            np.testing.assert_array_equal(row, want)

    def test_single_track_catalog(self, store_and_records):
        store, records = store_and_records
        vocab = Vocabulary(["lab0"])
        batch = build_supervised_batch(
            records[:1], 8, vocab, MixupConfig(enabled=False), np.random.default_rng(1), store)
        assert set(batch.track_ids) == {"t0"}

    def test_empty_catalog(self, store_and_records):
        store, _ = store_and_records
        short = [TrackRecord("s", 100, set(), "train", feature_path="t0.maf")]
        with pytest.raises(EmptyCatalog):
            build_supervised_batch(short, 4, Vocabulary(["a"]),
                                   MixupConfig(enabled=False), np.random.default_rng(0), store)

    def test_with_replacement_appearance_probability(self, store_and_records):
        store, records = store_and_records
        vocab = Vocabulary(["lab0", "lab1", "lab2"])
        rng = np.random.default_rng(11)
        trials = 800
        hits = 0
        for _ in range(trials):
            batch = build_supervised_batch(records, 32, vocab,
                                           MixupConfig(enabled=False), rng, store)
            hits += "t3" in batch.track_ids
        p = 1.0 - (1.0 - 1.0 / 10) ** 32
        sigma = (p * (1 - p) / trials) ** 0.5
        assert abs(hits / trials - p) < 3 * sigma


class TestContrastiveBatch:
    def test_row_count_and_interleaving(self, store_and_records):
        store, records = store_and_records
        batch = build_contrastive_batch(records, 12, np.random.default_rng(2), store)
        assert batch.features.shape == (24, 96, 300)
        assert batch.n_pairs == 12
        for i in range(12):
            assert batch.track_ids[2 * i] == batch.track_ids[2 * i + 1]

    def test_pair_rows_share_track(self, store_and_records):
        store, records = store_and_records
        durations = {r.track_id: r.duration_frames for r in records}
        batch = build_contrastive_batch(records, 20, np.random.default_rng(5), store)
        for i in range(20):
            a = batch.features[2 * i]
            b = batch.features[2 * i + 1]
            dur = durations[batch.track_ids[2 * i]]
            # ramp features: starts must be within the shared track
            assert 0 <= int(a[0, 0]) <= dur - 300
            assert 0 <= int(b[0, 0]) <= dur - 300
            assert abs(int(a[0, 0]) - int(b[0, 0])) < 500


class TestMixup:
    def test_identity_permutation_scales_features(self):
        feats = np.random.default_rng(0).normal(size=(4, 6, 5)).astype(np.float32)
        labels = np.eye(4, dtype=np.float32)
        gains = np.array([0.5, 0.25, 1.0, 0.75], dtype=np.float32)
        mixed, mixed_labels = _mixup_arrays(feats, labels, np.arange(4), gains)
        np.testing.assert_allclose(mixed, feats * (1 + gains)[:, None, None], rtol=1e-6)
        np.testing.assert_array_equal(mixed_labels, labels)

    def test_disjoint_labels_union(self):
        feats = np.zeros((2, 3, 3), dtype=np.float32)
        labels = np.array([[1, 0], [0, 1]], dtype=np.float32)
        _, mixed = _mixup_arrays(feats, labels, np.array([1, 0]), np.ones(2))
        np.testing.assert_array_equal(mixed, [[1, 1], [1, 1]])

    def test_gain_mean_matches_beta_and_rejection_oracle(self):
        # all-ones features make the applied gain directly observable:
        # mixed[i] = 1 + g[i]
        cfg = MixupConfig()
        rng = np.random.default_rng(123)
        feats = np.ones((100_000, 1, 1), dtype=np.float32)
        batch = SupervisedBatch(feats, np.zeros((100_000, 1), np.float32),
                                ["x"] * 100_000)
        gains = mixup(batch, cfg, rng).features[:, 0, 0] - 1.0
        assert (gains > 0).all() and (gains < 1).all()
        assert abs(gains.mean() - 5.0 / 7.0) < 0.01

        # independent rejection-sampling oracle for Beta(5, 2)
        orng = np.random.default_rng(7)
        density_max = (0.8 ** 4) * 0.2  # mode of x^4 (1-x) at x = 4/5
        samples = []
        while len(samples) < 60_000:
            x = orng.random(10_000)
            u = orng.random(10_000)
            accept = u * density_max <= x ** 4 * (1 - x)
            samples.extend(x[accept].tolist())
        oracle_mean = np.mean(samples[:60_000])
        assert abs(oracle_mean - 5.0 / 7.0) < 0.01
        assert abs(gains.mean() - oracle_mean) < 0.02

    def test_mixup_preserves_shape_and_pairing(self, store_and_records):
        store, records = store_and_records
        batch = build_contrastive_batch(records, 6, np.random.default_rng(0), store,
                                        mixup_cfg=MixupConfig())
        assert batch.features.shape == (12, 96, 300)
        assert isinstance(batch, ContrastiveBatch)
        assert len(batch.track_ids) == 12

    def test_bad_config(self):
        with pytest.raises(Exception):
            MixupConfig(alpha=0.0)


class TestBatchFeeder:
    def test_batches_never_partial_and_deterministic(self, store_and_records):
        store, records = store_and_records
        vocab = Vocabulary(["lab0", "lab1", "lab2"])

        def batch_fn(rng):
            return build_supervised_batch(records, 4, vocab,
                                          MixupConfig(enabled=False), rng, store)

        def collect(workers):
            with BatchFeeder(batch_fn, seed=99, workers=workers) as feeder:
                out = []
                for _ in range(12):
                    b = feeder.get()
                    assert b.features.shape == (4, 96, 300)
                    assert np.isfinite(b.features).all()
                    out.append(b.features.copy())
                return out

        first = collect(2)
        second = collect(2)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_single_worker_matches_direct_stream(self, store_and_records):
        store, records = store_and_records
        vocab = Vocabulary(["lab0", "lab1", "lab2"])

        def batch_fn(rng):
            return build_supervised_batch(records, 3, vocab,
                                          MixupConfig(enabled=False), rng, store)

        with BatchFeeder(batch_fn, seed=5, workers=1) as feeder:
            fed = [feeder.get().features for _ in range(5)]
        rng = np.random.default_rng(np.random.SeedSequence((5, 0)))
        direct = [batch_fn(rng).features for _ in range(5)]
        for a, b in zip(fed, direct):
            np.testing.assert_array_equal(a, b)
