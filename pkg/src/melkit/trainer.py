"""Losses, optimizer and the two pre-training loops.

The supervised loss is mean binary cross-entropy over an N x K batch of
multi-hot targets. The contrastive loss is normalized temperature-scaled
cross entropy over 2N interleaved rows: each anchor's positive is its
pair partner, negatives are every other row in the batch (self excluded
from the denominator), similarity is cosine scaled by 1/tau, and the per
anchor terms are summed over all 2N anchors (a mean reduction is
available for small-batch stability).

Optimization is Adam under a warmup-cosine schedule: the rate climbs
linearly to the peak over the warmup, then follows a half-cosine to zero
at the final step.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .catalog import Vocabulary
from .errors import EmptyCatalog, InvalidInput, NanError, NormError, ShapeError
from .model import EncoderModel, encode, project, save_checkpoint, supervised_probabilities
from .sampler import (
    FeatureStore,
    MixupConfig,
    build_contrastive_batch,
    build_supervised_batch,
    eligible_tracks,
)

BCE_CLIP = 1e-7


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 2e-4
    warmup_steps: int = 5000
    total_steps: int = 200_000

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise InvalidInput("need 0 < warmup_steps < total_steps")
        if self.peak_lr <= 0:
            raise InvalidInput("peak_lr must be positive")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    pairs: int = 1920

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidInput("temperature must be positive")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Warmup-cosine decay: 0 -> peak over the warmup, half-cosine to 0."""
    if step < 0:
        raise InvalidInput(f"negative step {step}")
    if step <= sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if step >= sched.total_steps:
        return 0.0
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def bce_loss(y, y_hat) -> Tensor:
    """Mean binary cross-entropy; predictions are clipped away from {0, 1}."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    if y.data.shape != y_hat.data.shape:
        raise ShapeError(f"bce_loss: targets {y.data.shape} vs predictions {y_hat.data.shape}")
    p = ad.clip(y_hat, BCE_CLIP, 1.0 - BCE_CLIP)
    one = Tensor(np.ones_like(y.data))
    term = ad.add(ad.mul(y, ad.log(p)), ad.mul(ad.sub(one, y), ad.log(ad.sub(one, p))))
    return ad.scale(ad.tmean(term), -1.0)


def ntxent_loss(v, temperature: float = 0.1, reduction: str = "sum") -> Tensor:
    """NT-Xent over (2N, n) rows interleaved as positive pairs."""
    v = v if isinstance(v, Tensor) else Tensor(v)  # float64 stays float64
    rows = v.data.shape[0]
    if v.data.ndim != 2 or rows % 2 != 0 or rows == 0:
        raise ShapeError(f"ntxent_loss: expected (2N, n) rows, got {v.data.shape}")
    norms = np.linalg.norm(v.data, axis=1)
    if (norms < 1e-12).any():
        raise NormError(f"ntxent_loss: zero-norm row at index {int(norms.argmin())}")

    unit = ad.l2_normalize(v, axis=1)
    sim = ad.scale(ad.matmul(unit, ad.transpose(unit)), 1.0 / temperature)

    diag_mask = Tensor(np.where(np.eye(rows, dtype=bool), -1e9, 0.0).astype(v.dtype))
    masked = ad.add(sim, diag_mask)

    # detached row max keeps the log-sum-exp stable without entering the graph
    row_max = Tensor(masked.data.max(axis=1, keepdims=True).copy())
    lse = ad.add(ad.log(ad.tsum(ad.exp(ad.sub(masked, row_max)), axis=1, keepdims=True)), row_max)

    partner = np.arange(rows) ^ 1  # 0<->1, 2<->3, ...
    pair_mask = np.zeros((rows, rows), dtype=v.dtype)
    pair_mask[np.arange(rows), partner] = 1.0
    positive = ad.tsum(ad.mul(sim, Tensor(pair_mask)), axis=1, keepdims=True)

    per_anchor = ad.sub(lse, positive)
    if reduction == "sum":
        return ad.tsum(per_anchor)
    if reduction == "mean":
        return ad.tmean(per_anchor)
    raise InvalidInput(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One in-place biased-moment update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NanError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# pre-training loops
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    mode: str = "contrastive"  # or "supervised"
    batch_size: int = 512      # supervised rows
    pairs: int = 1920          # contrastive pairs per batch
    schedule: ScheduleConfig = ScheduleConfig()
    mixup: MixupConfig = MixupConfig()
    temperature: float = 0.1
    loss_reduction: str = "sum"
    max_pair_distance_frames: int = 500
    label_filter: str | None = None  # train only on labels with this prefix
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.mode not in ("contrastive", "supervised"):
            raise InvalidInput(f"unknown pretrain mode {self.mode!r}")


def pretrain(records, vocab: Vocabulary, store: FeatureStore, model: EncoderModel,
             cfg: PretrainConfig, seed: int, out_dir) -> list[tuple[int, float, float]]:
    """Run the sampling -> forward -> loss -> backward -> Adam loop.

    Writes ``loss.csv`` (step, lr, loss), periodic ``step<k>.mck``
    checkpoints and a final ``final.mck``; returns the loss history.
    Checkpoint writes are atomic, so an interrupted run leaves the last
    completed checkpoint valid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = eligible_tracks(records, split="train")
    if not train:
        raise EmptyCatalog("no eligible training tracks")

    if cfg.mode == "supervised":
        train_vocab = vocab.subset(cfg.label_filter) if cfg.label_filter else vocab
        if len(train_vocab) == 0:
            raise EmptyCatalog(f"label filter {cfg.label_filter!r} leaves no labels")
        if model.n_labels != len(train_vocab):
            raise InvalidInput(
                f"model head has {model.n_labels} labels, vocabulary has {len(train_vocab)}")
    else:
        train_vocab = vocab

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7131)))
    state = AdamState()
    history: list[tuple[int, float, float]] = []
    sched = cfg.schedule
    t0 = time.time()

    with open(out_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step in range(sched.total_steps):
            lr = lr_at(step + 1, sched)
            if cfg.mode == "supervised":
                batch = build_supervised_batch(train, cfg.batch_size, train_vocab,
                                               cfg.mixup, rng, store)
                y_hat = supervised_probabilities(model, batch.features)
                loss = bce_loss(batch.labels, y_hat)
            else:
                batch = build_contrastive_batch(
                    train, cfg.pairs, rng, store,
                    max_pair_distance_frames=cfg.max_pair_distance_frames,
                    mixup_cfg=cfg.mixup)
                v = project(model, encode(model, batch.features))
                loss = ntxent_loss(v, cfg.temperature, reduction=cfg.loss_reduction)

            model.zero_grad()
            ad.backward(loss)
            grads = {name: p.grad for name, p in model.params.items()}
            adam_step(model.params, grads, state, lr)
            model.step += 1

            loss_val = float(loss.data)
            history.append((step, lr, loss_val))
            writer.writerow([step, f"{lr:.10g}", f"{loss_val:.8g}"])

            done = step + 1
            if done % cfg.checkpoint_interval == 0 and done < sched.total_steps:
                save_checkpoint(model, out_dir / f"step{done:06d}.mck")

    save_checkpoint(model, out_dir / "final.mck")
    history_seconds = time.time() - t0
    with open(out_dir / "train_meta.txt", "w") as fh:
        fh.write(f"mode={cfg.mode}\nsteps={sched.total_steps}\nseconds={history_seconds:.1f}\n")
    return history
