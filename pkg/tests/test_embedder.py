import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from melkit.dsp import MelFeature
from melkit.embedder import (
    EmbedConfig,
    TrackEmbedding,
    embed_nsynth,
    embed_track,
    read_embeddings,
    window_starts,
    write_embeddings,
)
from melkit.errors import FormatError, InvalidInput
from melkit.model import EncoderConfig, ProjectorConfig, init_model


@pytest.fixture(scope="module")
def model():
    return init_model(EncoderConfig(), ProjectorConfig(), seed=31)


def feature_of(frames, value=None, seed=0, track_id="t"):
    if value is not None:
        values = np.full((96, frames), value, dtype=np.float32)
    else:
        values = np.random.default_rng(seed).normal(size=(96, frames)).astype(np.float32)
    return MelFeature(values, 0.010, track_id)


class TestWindows:
    def test_46s_track_has_22_windows(self):
        starts = window_starts(4600, 300, 200)
        assert len(starts) == 22
        assert starts[0] == 0 and starts[-1] == 4200
        np.testing.assert_array_equal(np.diff(starts), 200)

    def test_3s_track_single_window(self):
        np.testing.assert_array_equal(window_starts(300, 300, 200), [0])

    def test_short_track_padded_to_one_window(self, model):
        emb = embed_track(model, feature_of(150, seed=1))
        assert emb.vector.shape == (64,)

    def test_per_window_matrix_mode(self, model):
        emb = embed_track(model, feature_of(700, seed=2), EmbedConfig(aggregate="none"))
        assert emb.vector.shape == (3, 64)  # starts 0, 200, 400

    def test_constant_track_mean_equals_any_window(self, model):
        emb_all = embed_track(model, feature_of(900, value=0.3), EmbedConfig(aggregate="none"))
        emb_mean = embed_track(model, feature_of(900, value=0.3))
        for row in emb_all.vector:
            np.testing.assert_allclose(row, emb_all.vector[0], atol=1e-6)
        np.testing.assert_allclose(emb_mean.vector, emb_all.vector[0], atol=1e-6)

    def test_empty_feature_rejected(self, model):
        with pytest.raises(InvalidInput):
            embed_track(model, feature_of(0))

    def test_deterministic(self, model):
        feat = feature_of(800, seed=5)
        a = embed_track(model, feat).vector
        b = embed_track(model, feat).vector
        assert a.tobytes() == b.tobytes()


class TestNsynthVariants:
    def test_pitch_variant_averages_four_windows(self, model):
        feat = feature_of(400, seed=3)
        emb = embed_nsynth(model, feat, "nsynth_pitch")
        assert emb.vector.shape == (64,)
        # oracle: mean of the four 100-frame window embeddings
        from melkit.model import encode
        from melkit import autodiff as ad
        with ad.no_grad():
            parts = [encode(model, feat.values[None, :, k * 100:(k + 1) * 100]).data[0]
                     for k in range(4)]
        np.testing.assert_allclose(emb.vector, np.mean(parts, axis=0), atol=1e-6)

    def test_instrument_variant_single_window(self, model):
        emb = embed_nsynth(model, feature_of(400, seed=4), "nsynth_instrument")
        assert emb.vector.shape == (64,)

    def test_constant_input_windows_agree(self, model):
        feat = feature_of(400, value=0.5)
        from melkit.model import encode
        from melkit import autodiff as ad
        with ad.no_grad():
            parts = [encode(model, feat.values[None, :, k * 100:(k + 1) * 100]).data[0]
                     for k in range(4)]
        for p in parts[1:]:
            np.testing.assert_allclose(p, parts[0], atol=1e-6)

    def test_short_note_zero_padded(self, model):
        emb = embed_nsynth(model, feature_of(250, seed=6), "nsynth_pitch")
        assert emb.vector.shape == (64,)

    def test_variant_through_embed_track(self, model):
        feat = feature_of(400, seed=7)
        a = embed_track(model, feat, EmbedConfig(variant="nsynth_instrument")).vector
        b = embed_nsynth(model, feat, "nsynth_instrument").vector
        np.testing.assert_array_equal(a, b)


class TestEmbeddingFiles:
    def test_round_trip_100_random_vectors(self, tmp_path):
        rng = np.random.default_rng(8)
        embs = [TrackEmbedding(f"trk{i:03d}", rng.normal(size=16).astype(np.float32))
                for i in range(100)]
        path = tmp_path / "e.mae"
        write_embeddings(embs, path)
        back = read_embeddings(path)
        assert [e.track_id for e in back] == [e.track_id for e in embs]
        for a, b in zip(back, embs):
            np.testing.assert_array_equal(a.vector, b.vector)

    def test_output_sorted_by_track_id(self, tmp_path):
        rng = np.random.default_rng(9)
        embs = [TrackEmbedding(tid, rng.normal(size=4).astype(np.float32))
                for tid in ("zz", "aa", "mm")]
        path = tmp_path / "e.mae"
        write_embeddings(embs, path)
        assert [e.track_id for e in read_embeddings(path)] == ["aa", "mm", "zz"]

    def test_matrix_embeddings_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        embs = [
            TrackEmbedding("a", rng.normal(size=(3, 8)).astype(np.float32)),
            TrackEmbedding("b", rng.normal(size=8).astype(np.float32)),
        ]
        path = tmp_path / "m.mae"
        write_embeddings(embs, path)
        back = read_embeddings(path)
        assert back[0].vector.shape == (3, 8)
        np.testing.assert_array_equal(back[0].vector, embs[0].vector)
        assert back[1].vector.shape == (8,)

    def test_empty_set_valid_file(self, tmp_path):
        path = tmp_path / "empty.mae"
        write_embeddings([], path)
        assert read_embeddings(path) == []

    def test_dim_mismatch_on_read(self, tmp_path):
        path = tmp_path / "bad.mae"
        blob = b"MAE1" + np.array([1, 8], "<u4").tobytes()
        blob += np.array([2], "<u2").tobytes() + b"ab" + b"\x00" * 12  # 3 floats, not 8
        path.write_bytes(blob)
        with pytest.raises(FormatError):
            read_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mae"
        path.write_bytes(b"WHAT" + b"\x00" * 8)
        with pytest.raises(FormatError):
            read_embeddings(path)

    def test_write_read_write_byte_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        embs = [TrackEmbedding(f"t{i}", rng.normal(size=6).astype(np.float32)) for i in range(9)]
        p1, p2 = tmp_path / "a.mae", tmp_path / "b.mae"
        write_embeddings(embs, p1)
        write_embeddings(read_embeddings(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mixed_dims_rejected(self, tmp_path):
        embs = [TrackEmbedding("a", np.zeros(4, np.float32)),
                TrackEmbedding("b", np.zeros(6, np.float32))]
        with pytest.raises(InvalidInput):
            write_embeddings(embs, tmp_path / "x.mae")

    @settings(max_examples=20, deadline=None,
              suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(count=st.integers(0, 12), dim=st.integers(1, 16), seed=st.integers(0, 999))
    def test_round_trip_property(self, tmp_path, count, dim, seed):
        rng = np.random.default_rng(seed)
        embs = [TrackEmbedding(f"id{i}", rng.normal(size=dim).astype(np.float32))
                for i in range(count)]
        path = tmp_path / "p.mae"
        write_embeddings(embs, path)
        back = read_embeddings(path)
        assert len(back) == count
        for a, b in zip(back, sorted(embs, key=lambda e: e.track_id)):
            assert a.track_id == b.track_id
            np.testing.assert_array_equal(a.vector, b.vector)


class TestStorageEfficiency:
    def test_embedding_much_smaller_than_features(self, tmp_path, model):
        # 60 s track at m=64: timeline-averaged embedding vs feature bytes
        feat = feature_of(6000, seed=12, track_id="long")
        emb = embed_track(model, feat)
        from melkit.dsp import write_feature
        write_feature(feat, tmp_path / "long.maf")
        write_embeddings([emb], tmp_path / "long.mae")
        ratio = (tmp_path / "long.mae").stat().st_size / (tmp_path / "long.maf").stat().st_size
        assert ratio < 0.01
