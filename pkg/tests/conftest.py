"""Shared corpus fixtures: synthetic audio rendered to feature stores."""

import numpy as np
import pytest

from melkit.catalog import SynthConfig, read_wav, synth_corpus, write_manifest
from melkit.dsp import FrontendConfig, AudioClip, log_mel, write_feature
from melkit.sampler import FeatureStore


def build_feature_store(records, corpus_dir, out_dir):
    """Extract log-mel features for every corpus track into out_dir."""
    cfg = FrontendConfig()
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        samples = read_wav(corpus_dir / rec.audio_path)
        feat = log_mel(AudioClip(samples, 16000, rec.track_id), cfg)
        write_feature(feat, out_dir / f"{rec.track_id}.maf")
        rec.feature_path = f"{rec.track_id}.maf"
        rec.duration_frames = feat.n_frames
    write_manifest(records, out_dir / "manifest.jsonl")
    return FeatureStore(out_dir)


class Corpus:
    def __init__(self, records, vocab, store, corpus_dir, feature_dir):
        self.records = records
        self.vocab = vocab
        self.store = store
        self.corpus_dir = corpus_dir
        self.feature_dir = feature_dir
        self.manifest_path = feature_dir / "manifest.jsonl"

    def split(self, name):
        return [r for r in self.records if r.split == name]


def _make_corpus(tmp_root, synth_cfg):
    records, vocab, _ = synth_corpus(synth_cfg, tmp_root / "corpus")
    store = build_feature_store(records, tmp_root / "corpus", tmp_root / "features")
    return Corpus(records, vocab, store, tmp_root / "corpus", tmp_root / "features")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """40 quick tracks for smoke-level training and probing tests."""
    cfg = SynthConfig(n_tracks=40, duration_range=(4.0, 6.0),
                      n_pitch_classes=4, n_timbre_classes=2, seed=23)
    return _make_corpus(tmp_path_factory.mktemp("small"), cfg)


@pytest.fixture(scope="session")
def acceptance_corpus(tmp_path_factory):
    """The 500-track, 8 pitch x 4 timbre corpus used by the acceptance gate."""
    cfg = SynthConfig(n_tracks=500, duration_range=(6.0, 10.0),
                      n_pitch_classes=8, n_timbre_classes=4, seed=17)
    return _make_corpus(tmp_path_factory.mktemp("acceptance"), cfg)


def pytest_addoption(parser):
    parser.addoption("--runtime-report", action="store_true", default=False,
                     help="print acceptance wall-clock timings")
