"""Log-mel spectrogram frontend.

Audio at 16 kHz mono is framed with a 25 ms periodic Hann window every
10 ms, transformed with a 2048-point FFT, and projected onto 96 triangular
filters spaced uniformly on the HTK mel scale between 0 and 8 kHz. Filter
rows are L1-normalized and applied to the power spectrum; the result is
floored at ``log_floor`` and log-compressed.

Framing convention: windows are centered at t*hop over a reflect-padded
signal, so a clip of n samples yields exactly floor(n / hop_samples)
frames — a 3 s clip maps to a 96x300 feature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput, IoError, SampleRateError

SAMPLE_RATE = 16000
FEATURE_MAGIC = b"MAF1"


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 96
    window_seconds: float = 0.025
    fft_size: int = 2048
    hop_seconds: float = 0.010
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.fmax_hz > SAMPLE_RATE / 2:
            raise InvalidInput(f"fmax {self.fmax_hz} above Nyquist {SAMPLE_RATE / 2}")
        if self.window_samples > self.fft_size:
            raise InvalidInput(
                f"window of {self.window_samples} samples exceeds fft_size {self.fft_size}")
        if self.n_mels < 1 or self.log_floor <= 0:
            raise InvalidInput("n_mels must be >= 1 and log_floor > 0")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_seconds * SAMPLE_RATE))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_seconds * SAMPLE_RATE))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class AudioClip:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int
    track_id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidInput(f"clip '{self.track_id}' must be non-empty mono audio")
        if self.sample_rate != SAMPLE_RATE:
            raise SampleRateError(
                f"clip '{self.track_id}' is {self.sample_rate} Hz, expected {SAMPLE_RATE}")
        peak = float(np.abs(self.samples).max())
        if peak > 1.0 + 1e-4:
            raise InvalidInput(f"clip '{self.track_id}' has samples outside [-1, 1] (peak {peak:.3f})")


@dataclass
class MelFeature:
    values: np.ndarray  # (n_mels, frames) float32 log energies
    frame_hop: float
    track_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise InvalidInput(f"feature '{self.track_id}' must be 2-d")
        if not np.isfinite(self.values).all():
            raise InvalidInput(f"feature '{self.track_id}' contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    """HTK mel scale: mel(f) = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _hann_periodic(n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def stft_magnitude(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    """Magnitude spectrogram, shape (frames, fft_size//2 + 1)."""
    hop = cfg.hop_samples
    win = cfg.window_samples
    x = clip.samples.astype(np.float64)
    n_frames = len(x) // hop
    if n_frames == 0:
        return np.zeros((0, cfg.n_bins), dtype=np.float32)
    half = win // 2
    padded = np.pad(x, half, mode="reflect") if len(x) > 1 else np.repeat(x, win + 2 * half)
    starts = np.arange(n_frames) * hop
    frames = padded[starts[:, None] + np.arange(win)[None, :]]
    spec = np.fft.rfft(frames * _hann_periodic(win), n=cfg.fft_size, axis=1)
    return np.abs(spec).astype(np.float32)


@lru_cache(maxsize=8)
def _filterbank_cached(cfg: FrontendConfig) -> np.ndarray:
    edges_mel = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    edges_hz = mel_to_hz(edges_mel)
    bin_hz = np.arange(cfg.n_bins) * (SAMPLE_RATE / cfg.fft_size)
    fb = np.zeros((cfg.n_mels, cfg.n_bins), dtype=np.float64)
    for k in range(cfg.n_mels):
        lo, center, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        fb[k] = np.clip(np.minimum(up, down), 0.0, None)
        total = fb[k].sum()
        if total > 0:
            fb[k] /= total
    return fb.astype(np.float32)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """L1-normalized triangular filters on the HTK mel scale, (n_mels, n_bins)."""
    return _filterbank_cached(cfg).copy()


def filter_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    edges_mel = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(edges_mel)[1:-1]


def log_mel(clip: AudioClip, cfg: FrontendConfig | None = None) -> MelFeature:
    """Power-spectrum mel projection followed by a floored natural log."""
    cfg = cfg or FrontendConfig()
    mag = stft_magnitude(clip, cfg).astype(np.float64)
    fb = _filterbank_cached(cfg).astype(np.float64)
    energies = fb @ (mag * mag).T  # (n_mels, frames)
    values = np.log(np.maximum(energies, cfg.log_floor)).astype(np.float32)
    return MelFeature(values=values, frame_hop=cfg.hop_seconds, track_id=clip.track_id)


def snippet_position_count(duration_frames: int, snippet_frames: int = 300) -> int:
    """Number of distinct snippet start positions in a track."""
    if duration_frames < 0:
        raise InvalidInput(f"negative duration {duration_frames}")
    return max(0, duration_frames - snippet_frames + 1)


# ---------------------------------------------------------------------------
# feature store: one little-endian binary file per track
# ---------------------------------------------------------------------------

def write_feature(feature: MelFeature, path: str | Path) -> None:
    """MAF1 container: magic, u32 rows, u32 cols, row-major f32 data."""
    values = np.ascontiguousarray(feature.values, dtype="<f4")
    rows, cols = values.shape
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(values.tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write feature file {path}: {exc}") from exc


def read_feature(path: str | Path, track_id: str | None = None) -> MelFeature:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read feature file {path}: {exc}") from exc
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    rows, cols = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * rows * cols
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=12).reshape(rows, cols)
    return MelFeature(values=values.copy(), frame_hop=0.010,
                      track_id=track_id or path.stem)


def read_feature_header(path: str | Path) -> tuple[int, int]:
    """(rows, cols) of a stored feature without loading the data."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
    except OSError as exc:
        raise IoError(f"cannot read feature file {path}: {exc}") from exc
    if head[:4] != FEATURE_MAGIC or len(head) < 12:
        raise FormatError(f"{path}: bad header")
    rows, cols = struct.unpack_from("<II", head, 4)
    return rows, cols
