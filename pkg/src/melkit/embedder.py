"""Frozen-model embedding extraction over full track timelines.

Windows of 3 s (300 frames) are taken at 0.5 Hz (every 200 frames),
anchored at frame 0, wherever they fit fully; per-window embeddings are
the encoder's pooled activations and are optionally averaged along the
timeline. Note-level variants: the pitch variant averages four
non-overlapping consecutive 1 s windows, the instrument variant encodes a
single 4 s window. Tracks shorter than one window are zero-padded on the
right (inference only; training never pads).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dsp import MelFeature
from .errors import FormatError, InvalidInput, IoError
from .model import EncoderModel, encode

EMBEDDING_MAGIC = b"MAE1"
FRAMES_PER_SECOND = 100


@dataclass(frozen=True)
class EmbedConfig:
    window_seconds: float = 3.0
    sample_rate_hz: float = 0.5
    aggregate: str = "mean"        # "mean" | "none"
    variant: str = "default"       # "default" | "nsynth_pitch" | "nsynth_instrument"
    batch_rows: int = 32

    def __post_init__(self):
        if self.window_seconds <= 0 or self.sample_rate_hz <= 0:
            raise InvalidInput("window and sample rate must be positive")
        if self.aggregate not in ("mean", "none"):
            raise InvalidInput(f"unknown aggregate {self.aggregate!r}")
        if self.variant not in ("default", "nsynth_pitch", "nsynth_instrument"):
            raise InvalidInput(f"unknown variant {self.variant!r}")

    @property
    def window_frames(self) -> int:
        return int(round(self.window_seconds * FRAMES_PER_SECOND))

    @property
    def hop_frames(self) -> int:
        return int(round(FRAMES_PER_SECOND / self.sample_rate_hz))


@dataclass
class TrackEmbedding:
    track_id: str
    vector: np.ndarray  # (m,) timeline-averaged or (S, m) per window

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim not in (1, 2):
            raise InvalidInput(f"{self.track_id}: embedding must be 1-d or 2-d")
        if not np.isfinite(self.vector).all():
            raise InvalidInput(f"{self.track_id}: non-finite embedding")

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


def _pad_right(values: np.ndarray, frames: int) -> np.ndarray:
    if values.shape[1] >= frames:
        return values
    out = np.zeros((values.shape[0], frames), dtype=values.dtype)
    out[:, :values.shape[1]] = values
    return out


def _encode_windows(model: EncoderModel, windows: np.ndarray, batch_rows: int) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for i in range(0, len(windows), batch_rows):
            outs.append(encode(model, windows[i:i + batch_rows]).data)
    return np.concatenate(outs, axis=0)


def window_starts(total_frames: int, window_frames: int, hop_frames: int) -> np.ndarray:
    """Start frames 0, hop, 2*hop, ... while the window fits fully."""
    if total_frames < window_frames:
        return np.array([0])
    count = (total_frames - window_frames) // hop_frames + 1
    return np.arange(count) * hop_frames


def embed_track(model: EncoderModel, feature: MelFeature,
                cfg: EmbedConfig = EmbedConfig()) -> TrackEmbedding:
    """Timeline embeddings at the configured rate, averaged unless aggregate='none'."""
    if feature.n_frames == 0:
        raise InvalidInput(f"{feature.track_id}: empty feature")
    if cfg.variant != "default":
        return embed_nsynth(model, feature, cfg.variant, batch_rows=cfg.batch_rows)
    values = _pad_right(feature.values, cfg.window_frames)
    starts = window_starts(values.shape[1], cfg.window_frames, cfg.hop_frames)
    windows = np.stack([values[:, s:s + cfg.window_frames] for s in starts])
    z = _encode_windows(model, windows, cfg.batch_rows)
    if cfg.aggregate == "mean":
        return TrackEmbedding(feature.track_id, z.mean(axis=0))
    return TrackEmbedding(feature.track_id, z)


def embed_nsynth(model: EncoderModel, feature: MelFeature, variant: str,
                 batch_rows: int = 32) -> TrackEmbedding:
    """Note-level variants: pitch averages four consecutive 1 s windows,
    instrument encodes one 4 s window; short notes are zero-padded."""
    if feature.n_frames == 0:
        raise InvalidInput(f"{feature.track_id}: empty feature")
    values = _pad_right(feature.values, 4 * FRAMES_PER_SECOND)
    if variant == "nsynth_pitch":
        windows = np.stack([values[:, k * 100:(k + 1) * 100] for k in range(4)])
        z = _encode_windows(model, windows, batch_rows)
        return TrackEmbedding(feature.track_id, z.mean(axis=0))
    if variant == "nsynth_instrument":
        z = _encode_windows(model, values[None, :, :400], batch_rows)
        return TrackEmbedding(feature.track_id, z[0])
    raise InvalidInput(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------

def write_embeddings(embeddings, path) -> None:
    """MAE1 container: magic, u32 record count, u32 dim, then per record a
    u16 id length, the id bytes, and dim little-endian f32 values. Records
    are sorted by track_id; a (S, m) embedding spans S consecutive records."""
    embeddings = sorted(embeddings, key=lambda e: e.track_id)
    dims = {e.dim for e in embeddings}
    if len(dims) > 1:
        raise InvalidInput(f"mixed embedding dims {sorted(dims)}")
    dim = dims.pop() if dims else 0
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    rows = []
    for emb in embeddings:
        mat = emb.vector.reshape(-1, emb.dim)
        for row in mat:
            rows.append((emb.track_id, row))
    try:
        with open(tmp, "wb") as fh:
            fh.write(EMBEDDING_MAGIC)
            fh.write(struct.pack("<II", len(rows), dim))
            for track_id, row in rows:
                ident = track_id.encode("utf-8")
                if len(ident) > 0xFFFF:
                    raise InvalidInput(f"track id too long: {track_id[:32]}...")
                fh.write(struct.pack("<H", len(ident)))
                fh.write(ident)
                fh.write(np.ascontiguousarray(row, dtype="<f4").tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write embeddings {path}: {exc}") from exc


def read_embeddings(path) -> list[TrackEmbedding]:
    """Inverse of write_embeddings; consecutive same-id rows regroup into a
    matrix embedding (a single row loads back as a vector)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read embeddings {path}: {exc}") from exc
    if blob[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    count, dim = struct.unpack_from("<II", blob, 4)
    offset = 12
    rows: list[tuple[str, np.ndarray]] = []
    for _ in range(count):
        if offset + 2 > len(blob):
            raise FormatError(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        ident = blob[offset:offset + id_len].decode("utf-8")
        offset += id_len
        end = offset + 4 * dim
        if end > len(blob):
            raise FormatError(f"{path}: truncated record data for {ident!r}")
        rows.append((ident, np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()))
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")

    out: list[TrackEmbedding] = []
    i = 0
    while i < len(rows):
        j = i
        while j + 1 < len(rows) and rows[j + 1][0] == rows[i][0]:
            j += 1
        if j == i:
            out.append(TrackEmbedding(rows[i][0], rows[i][1]))
        else:
            out.append(TrackEmbedding(rows[i][0], np.stack([r for _, r in rows[i:j + 1]])))
        i = j + 1
    return out


def embeddings_as_dict(embeddings) -> dict:
    return {e.track_id: e.vector for e in embeddings}
