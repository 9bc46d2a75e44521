"""Real-time training batch assembly.

Tracks are sampled uniformly with replacement; a 96x300 snippet is cut
from each at a uniform start position (tracks shorter than one snippet
are never padded — they are ineligible). Contrastive batches interleave
positive pairs, two snippets of the same track whose centers lie within
``max_pair_distance_frames`` of each other. Mixup adds a Beta(alpha, beta)
scaled copy of a shuffled batch row to each row and unions the labels.

Batches can be built inline or by a pool of worker threads that feed a
single consumer through bounded FIFOs; the consumer drains the workers
round-robin, so the batch sequence is a pure function of the seed and the
worker count.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import TrackRecord, Vocabulary
from .dsp import read_feature
from .errors import EmptyCatalog, InvalidInput, TooShort

SNIPPET_FRAMES = 300


class FeatureStore:
    """Read-only access to per-track feature files, with an in-memory cache."""

    def __init__(self, root: str | Path = ".", cache: bool = True):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}
        self._use_cache = cache
        self._lock = threading.Lock()

    def _load(self, rec: TrackRecord) -> np.ndarray:
        if rec.feature_path is None:
            raise InvalidInput(f"{rec.track_id}: record has no feature_path")
        key = rec.feature_path
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        values = read_feature(self.root / rec.feature_path, rec.track_id).values
        if self._use_cache:
            with self._lock:
                self._cache[key] = values
        return values

    def window(self, rec: TrackRecord, start: int, n_frames: int) -> np.ndarray:
        values = self._load(rec)
        if start < 0 or start + n_frames > values.shape[1]:
            raise InvalidInput(
                f"{rec.track_id}: window [{start}, {start + n_frames}) outside 0..{values.shape[1]}")
        return values[:, start:start + n_frames].copy()

    def full(self, rec: TrackRecord) -> np.ndarray:
        return self._load(rec)


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 5.0
    beta: float = 2.0
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidInput("mixup alpha and beta must be positive")


@dataclass
class SupervisedBatch:
    features: np.ndarray  # (N, 96, 300) float32
    labels: np.ndarray    # (N, K) float32 in [0, 1]
    track_ids: list

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class ContrastiveBatch:
    features: np.ndarray  # (2N, 96, 300); rows (2i, 2i+1) are a positive pair
    track_ids: list

    @property
    def n_pairs(self) -> int:
        return self.features.shape[0] // 2


def snippet_start(duration_frames: int, rng: np.random.Generator,
                  snippet_frames: int = SNIPPET_FRAMES) -> int:
    if duration_frames < snippet_frames:
        raise TooShort(f"track of {duration_frames} frames < snippet {snippet_frames}")
    return int(rng.integers(0, duration_frames - snippet_frames + 1))


def positive_pair_starts(duration_frames: int, rng: np.random.Generator,
                         max_pair_distance_frames: int = 500,
                         snippet_frames: int = SNIPPET_FRAMES) -> tuple[int, int]:
    """Two snippet starts whose centers are strictly less than the maximum
    pair distance apart; the second start is uniform on the intersection of
    that window with the track bounds."""
    first = snippet_start(duration_frames, rng, snippet_frames)
    lo = max(0, first - max_pair_distance_frames + 1)
    hi = min(duration_frames - snippet_frames, first + max_pair_distance_frames - 1)
    second = int(rng.integers(lo, hi + 1))
    return first, second


def sample_snippet(rec: TrackRecord, rng: np.random.Generator,
                   store: FeatureStore) -> np.ndarray:
    """One uniformly placed 96x300 window from the track's feature file."""
    start = snippet_start(rec.duration_frames, rng)
    return store.window(rec, start, SNIPPET_FRAMES)


def sample_positive_pair(rec: TrackRecord, rng: np.random.Generator, store: FeatureStore,
                         max_pair_distance_frames: int = 500) -> tuple[np.ndarray, np.ndarray]:
    a, b = positive_pair_starts(rec.duration_frames, rng, max_pair_distance_frames)
    return store.window(rec, a, SNIPPET_FRAMES), store.window(rec, b, SNIPPET_FRAMES)


def eligible_tracks(records, split: str | None = None) -> list:
    """Tracks long enough to sample, optionally restricted to one split."""
    return [r for r in records
            if r.duration_frames >= SNIPPET_FRAMES and (split is None or r.split == split)]


def _mixup_arrays(features: np.ndarray, labels: np.ndarray | None,
                  perm: np.ndarray, gains: np.ndarray):
    """out[i] = features[i] + g[i] * features[perm[i]]; labels are unioned."""
    shaped = gains.reshape(-1, *([1] * (features.ndim - 1))).astype(features.dtype)
    mixed = features + shaped * features[perm]
    if labels is None:
        return mixed, None
    return mixed, np.minimum(1.0, labels + labels[perm]).astype(labels.dtype)


def mixup(batch, cfg: MixupConfig, rng: np.random.Generator):
    """Shuffled additive mixup with per-row Beta(alpha, beta) gains."""
    if not cfg.enabled:
        return batch
    n = batch.features.shape[0]
    perm = rng.permutation(n)
    gains = rng.beta(cfg.alpha, cfg.beta, size=n)
    if isinstance(batch, SupervisedBatch):
        feats, labels = _mixup_arrays(batch.features, batch.labels, perm, gains)
        return SupervisedBatch(feats, labels, batch.track_ids)
    feats, _ = _mixup_arrays(batch.features, None, perm, gains)
    return ContrastiveBatch(feats, batch.track_ids)


def build_supervised_batch(records, n: int, vocab: Vocabulary, mixup_cfg: MixupConfig,
                           rng: np.random.Generator, store: FeatureStore) -> SupervisedBatch:
    """N tracks with replacement, multi-hot labels, optional mixup."""
    pool = eligible_tracks(records)
    if not pool:
        raise EmptyCatalog("no eligible tracks of at least one snippet")
    feats = np.empty((n, 96, SNIPPET_FRAMES), dtype=np.float32)
    labels = np.empty((n, len(vocab)), dtype=np.float32)
    ids = []
    for i in range(n):
        rec = pool[int(rng.integers(len(pool)))]
        feats[i] = sample_snippet(rec, rng, store)
        labels[i] = vocab.multi_hot(rec.labels & set(vocab.labels))
        ids.append(rec.track_id)
    batch = SupervisedBatch(feats, labels, ids)
    return mixup(batch, mixup_cfg, rng) if mixup_cfg.enabled else batch


def build_contrastive_batch(records, n_pairs: int, rng: np.random.Generator,
                            store: FeatureStore, max_pair_distance_frames: int = 500,
                            mixup_cfg: MixupConfig | None = None) -> ContrastiveBatch:
    """2N interleaved rows; negatives are implicitly the rest of the batch."""
    pool = eligible_tracks(records)
    if not pool:
        raise EmptyCatalog("no eligible tracks of at least one snippet")
    feats = np.empty((2 * n_pairs, 96, SNIPPET_FRAMES), dtype=np.float32)
    ids = []
    for i in range(n_pairs):
        rec = pool[int(rng.integers(len(pool)))]
        a, b = sample_positive_pair(rec, rng, store, max_pair_distance_frames)
        feats[2 * i] = a
        feats[2 * i + 1] = b
        ids.extend([rec.track_id, rec.track_id])
    batch = ContrastiveBatch(feats, ids)
    if mixup_cfg is not None and mixup_cfg.enabled:
        batch = mixup(batch, mixup_cfg, rng)
    return batch


class BatchFeeder:
    """Worker threads build batches into per-worker bounded FIFOs; a single
    consumer drains them round-robin, so the sequence seen by training is
    deterministic for a given (seed, workers) regardless of scheduling."""

    def __init__(self, batch_fn, seed: int, workers: int = 1, depth: int = 2):
        if workers < 1:
            raise InvalidInput("need at least one worker")
        self._queues = [queue.Queue(maxsize=depth) for _ in range(workers)]
        self._stop = threading.Event()
        self._threads = []
        for w in range(workers):
            rng = np.random.default_rng(np.random.SeedSequence((seed, w)))
            t = threading.Thread(target=self._run, args=(w, batch_fn, rng), daemon=True)
            t.start()
            self._threads.append(t)
        self._next = 0

    def _run(self, w: int, batch_fn, rng):
        while not self._stop.is_set():
            batch = batch_fn(rng)
            while not self._stop.is_set():
                try:
                    self._queues[w].put(batch, timeout=0.05)
                    break
                except queue.Full:
                    continue

    def get(self):
        q = self._queues[self._next]
        self._next = (self._next + 1) % len(self._queues)
        while True:
            try:
                return q.get(timeout=0.5)
            except queue.Empty:
                if self._stop.is_set():
                    raise RuntimeError("feeder stopped")

    def close(self):
        self._stop.set()
        for q in self._queues:
            while True:
                try:
                    q.get_nowait()
                except queue.Empty:
                    break
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
