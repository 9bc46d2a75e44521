"""Track manifests, label vocabularies, synthetic corpora and label statistics.

Manifests are JSONL, one track per line, with fields track_id,
audio_path/feature_path, duration_frames, labels, split and optional
scalar_targets. The synthetic corpus generator writes 16 kHz mono PCM WAV
files whose content is a seeded mixture of harmonics: the fundamental is
drawn from one of ``n_pitch_classes`` disjoint log-spaced frequency bands
and the harmonic amplitude envelope from one of ``n_timbre_classes``
templates, so tracks carry separable pitch:<c> and timbre:<t> tags plus
scalar regression targets.
"""

from __future__ import annotations

import json
import logging
import math
import wave
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, IoError, ParseError, VocabError

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class Vocabulary:
    """Ordered set of label strings with a stable label -> index map."""

    def __init__(self, labels):
        labels = list(labels)
        if len(set(labels)) != len(labels):
            raise VocabError("vocabulary contains duplicate labels")
        if not labels:
            log.warning("empty vocabulary")
        self.labels = tuple(labels)
        self._index = {lab: i for i, lab in enumerate(labels)}

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.labels == other.labels

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise VocabError(f"label {label!r} not in vocabulary")

    def multi_hot(self, labels) -> np.ndarray:
        vec = np.zeros(len(self.labels), dtype=np.float32)
        for lab in labels:
            vec[self.index(lab)] = 1.0
        return vec

    def subset(self, prefix: str) -> "Vocabulary":
        return Vocabulary([lab for lab in self.labels if lab.startswith(prefix)])

    @staticmethod
    def from_file(path) -> "Vocabulary":
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise IoError(f"cannot read vocabulary file {path}: {exc}") from exc
        return Vocabulary([ln.strip() for ln in lines if ln.strip()])


@dataclass
class TrackRecord:
    track_id: str
    duration_frames: int
    labels: set = field(default_factory=set)
    split: str = "train"
    feature_path: str | None = None
    audio_path: str | None = None
    scalar_targets: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.track_id:
            raise InvalidInput("track_id must be non-empty")
        if self.duration_frames <= 0:
            raise InvalidInput(f"{self.track_id}: duration_frames must be > 0")
        if self.split not in SPLITS:
            raise InvalidInput(f"{self.track_id}: bad split {self.split!r}")
        self.labels = set(self.labels)

    def to_json(self) -> str:
        doc = {
            "track_id": self.track_id,
            "duration_frames": self.duration_frames,
            "labels": sorted(self.labels),
            "split": self.split,
        }
        if self.feature_path:
            doc["feature_path"] = self.feature_path
        if self.audio_path:
            doc["audio_path"] = self.audio_path
        if self.scalar_targets:
            doc["scalar_targets"] = {k: float(v) for k, v in sorted(self.scalar_targets.items())}
        return json.dumps(doc, sort_keys=True)


_RECORD_KEYS = {"track_id", "duration_frames", "labels", "split",
                "feature_path", "audio_path", "scalar_targets"}


def _record_from_doc(doc: dict, lineno: int) -> TrackRecord:
    unknown = set(doc) - _RECORD_KEYS
    if unknown:
        raise ParseError(f"line {lineno}: unknown manifest keys {sorted(unknown)}")
    try:
        return TrackRecord(
            track_id=doc["track_id"],
            duration_frames=int(doc["duration_frames"]),
            labels=set(doc.get("labels", [])),
            split=doc.get("split", "train"),
            feature_path=doc.get("feature_path"),
            audio_path=doc.get("audio_path"),
            scalar_targets=dict(doc.get("scalar_targets", {})),
        )
    except (KeyError, TypeError, ValueError, InvalidInput) as exc:
        raise ParseError(f"line {lineno}: {exc}") from exc


def load_manifest(path, vocab_path=None) -> tuple[list[TrackRecord], Vocabulary]:
    """Read a JSONL manifest; vocabulary is the sorted union of labels
    unless an explicit vocabulary file is given."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc

    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        records.append(_record_from_doc(doc, lineno))

    if not records:
        log.warning("manifest %s is empty", path)

    if vocab_path is not None:
        vocab = Vocabulary.from_file(vocab_path)
        for rec in records:
            for lab in rec.labels:
                if lab not in vocab:
                    raise VocabError(f"{rec.track_id}: label {lab!r} outside vocabulary")
    else:
        vocab = Vocabulary(sorted(set().union(*[r.labels for r in records]) if records else []))
    return records, vocab


def write_manifest(records, path) -> None:
    path = Path(path)
    try:
        with open(path, "w") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# WAV helpers (16-bit PCM mono at 16 kHz)
# ---------------------------------------------------------------------------

def write_wav(samples: np.ndarray, path) -> None:
    pcm = np.asarray(samples, dtype=np.float64) * 32768.0
    pcm = np.clip(pcm.round(), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(16000)
            fh.writeframes(pcm.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write wav {path}: {exc}") from exc


def read_wav(path) -> np.ndarray:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise InvalidInput(f"{path}: expected 16-bit mono PCM")
            rate = fh.getframerate()
            if rate != 16000:
                from .errors import SampleRateError
                raise SampleRateError(f"{path}: {rate} Hz, expected 16000")
            raw = fh.readframes(fh.getnframes())
    except (OSError, wave.Error) as exc:
        raise IoError(f"cannot read wav {path}: {exc}") from exc
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_tracks: int = 500
    duration_range: tuple = (6.0, 10.0)
    n_pitch_classes: int = 8
    n_timbre_classes: int = 4
    noise_floor: float = 0.003
    seed: int = 17
    f0_low_hz: float = 110.0
    f0_high_hz: float = 880.0
    # amplitude of the wandering interference voices relative to the
    # harmonic stack; they move every ~0.5-1 s, so they dominate any single
    # snippet while averaging out along the full track timeline
    distractor_gain: float = 2.0

    def __post_init__(self):
        if self.n_tracks < 1:
            raise InvalidInput("n_tracks must be >= 1")
        if self.n_pitch_classes < 2 or self.n_timbre_classes < 2:
            raise InvalidInput("need at least 2 pitch and 2 timbre classes")
        if self.duration_range[0] < 3.0:
            raise InvalidInput("tracks must be at least one 3 s snippet long")
        if self.distractor_gain < 0:
            raise InvalidInput("distractor_gain must be non-negative")


def pitch_band(cfg: SynthConfig, c: int) -> tuple[float, float]:
    """Frequency band of pitch class c: log-spaced, with guard gaps."""
    edges = np.geomspace(cfg.f0_low_hz, cfg.f0_high_hz, cfg.n_pitch_classes + 1)
    lo, hi = edges[c], edges[c + 1]
    center = math.sqrt(lo * hi)
    return center / 1.04, center * 1.04


N_HARMONICS = 10


def timbre_template(t: int, n_timbre_classes: int) -> np.ndarray:
    """Harmonic amplitude envelope for timbre class t (fundamental dominates)."""
    h = np.arange(1, N_HARMONICS + 1, dtype=np.float64)
    kind = t % 4
    if kind == 0:  # dark: steep decay
        amps = h ** -2.0
    elif kind == 1:  # bright: shallow decay
        amps = h ** -0.7
    elif kind == 2:  # hollow: odd harmonics only
        amps = np.where(h % 2 == 1, h ** -1.0, 0.0)
    else:  # sparse: octave-spaced partials
        amps = np.where(np.isin(h, (1, 2, 4, 8)), h ** -1.0, 0.0)
    return amps / amps[0]


def _wander_voice(rng: np.random.Generator, n: int) -> np.ndarray:
    """One interference voice: a continuous-phase tone whose frequency and
    gain glide between random waypoints every ~0.5-1 s. Any 3 s snippet
    sees it loud and clear, but its long-run average spectrum is diffuse."""
    sr = 16000
    seg = int(rng.uniform(0.5, 1.0) * sr)
    n_pts = n // seg + 2
    freqs = np.exp(rng.uniform(np.log(150.0), np.log(6000.0), size=n_pts))
    gains = rng.uniform(0.3, 1.0, size=n_pts)
    anchor = np.arange(n_pts) * seg
    tgrid = np.arange(n)
    freq = np.interp(tgrid, anchor, freqs)
    gain = np.interp(tgrid, anchor, gains)
    phase = np.cumsum(2 * np.pi * freq / sr) + rng.uniform(0, 2 * np.pi)
    return gain * np.sin(phase)


def _synth_track(cfg: SynthConfig, index: int) -> tuple[np.ndarray, dict]:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    c = int(rng.integers(cfg.n_pitch_classes))
    t = int(rng.integers(cfg.n_timbre_classes))
    lo, hi = pitch_band(cfg, c)
    f0 = float(rng.uniform(lo, hi))
    seconds = float(rng.uniform(*cfg.duration_range))
    n = int(round(seconds * 16000))

    time = np.arange(n) / 16000.0
    amps = timbre_template(t, cfg.n_timbre_classes)
    x = np.zeros(n, dtype=np.float64)
    for k, amp in enumerate(amps, start=1):
        if amp == 0.0 or k * f0 >= 7800.0:
            continue
        x += amp * np.sin(2 * np.pi * k * f0 * time + rng.uniform(0, 2 * np.pi))

    harmonic_rms = float(np.sqrt((x ** 2).mean()))
    if cfg.distractor_gain > 0:
        voices = _wander_voice(rng, n) + _wander_voice(rng, n)
        voice_rms = float(np.sqrt((voices ** 2).mean()))
        x += voices * (cfg.distractor_gain * harmonic_rms / max(voice_rms, 1e-9))

    x += cfg.noise_floor * rng.standard_normal(n)
    # short attack/release ramps avoid clicks at the file edges
    ramp = min(800, n // 4)
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    x *= env
    x *= 0.5 / max(1e-9, np.abs(x).max())

    brightness = float((amps * np.arange(1, N_HARMONICS + 1)).sum() / amps.sum())
    meta = {
        "pitch_class": c,
        "timbre_class": t,
        "f0_hz": f0,
        "targets": {"log_f0": math.log(f0), "brightness": brightness},
    }
    return x.astype(np.float32), meta


def synth_corpus(cfg: SynthConfig, out_dir) -> tuple[list[TrackRecord], Vocabulary, Path]:
    """Write the corpus WAVs and manifest; returns (records, vocab, manifest path).

    Deterministic per seed: every track derives its own rng from
    (seed, track index). Splits are assigned round-robin 8:1:1.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    try:
        audio_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create corpus dir {out_dir}: {exc}") from exc

    records = []
    for i in range(cfg.n_tracks):
        samples, meta = _synth_track(cfg, i)
        track_id = f"synth{i:05d}"
        wav_path = audio_dir / f"{track_id}.wav"
        write_wav(samples, wav_path)
        split = ("test" if i % 10 == 0 else "valid" if i % 10 == 1 else "train")
        records.append(TrackRecord(
            track_id=track_id,
            duration_frames=len(samples) // 160,
            labels={f"pitch:{meta['pitch_class']}", f"timbre:{meta['timbre_class']}"},
            split=split,
            audio_path=str(wav_path.relative_to(out_dir)),
            scalar_targets=meta["targets"],
        ))
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    vocab = Vocabulary(sorted(set().union(*[r.labels for r in records])))
    return records, vocab, manifest_path


# ---------------------------------------------------------------------------
# label statistics (catalog report)
# ---------------------------------------------------------------------------

@dataclass
class LabelStats:
    counts: list  # (label, count), descending by count
    items_per_label_count: dict  # labels-per-item -> number of items
    n_items: int

    def write_csv(self, counts_path, histogram_path) -> None:
        try:
            with open(counts_path, "w") as fh:
                fh.write("label,count\n")
                for label, count in self.counts:
                    fh.write(f"{label},{count}\n")
            with open(histogram_path, "w") as fh:
                fh.write("labels_per_item,items\n")
                for k in sorted(self.items_per_label_count):
                    fh.write(f"{k},{self.items_per_label_count[k]}\n")
        except OSError as exc:
            raise IoError(f"cannot write label stats: {exc}") from exc


def label_stats(records) -> LabelStats:
    """Sorted per-label counts plus the labels-per-item histogram."""
    if not records:
        raise InvalidInput("label_stats needs at least one record")
    counter = Counter()
    hist = Counter()
    for rec in records:
        counter.update(rec.labels)
        hist[len(rec.labels)] += 1
    ordered = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    return LabelStats(counts=ordered, items_per_label_count=dict(hist), n_items=len(records))
