"""Evaluation metrics for tagging, classification, key detection and regression.

mAP is the unweighted mean of per-tag average precision over tags with at
least one test positive (tags without positives are excluded and listed).
ROC-AUC uses the rank-sum formulation with midrank tie handling. Key
accuracy grants the conventional partial credits: exact 1.0, perfect
fifth (same mode, either direction) 0.5, relative major/minor 0.3,
parallel major/minor 0.2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTarget, InvalidInput, ShapeError

PITCH_CLASS_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
KEY_VOCAB = tuple(f"{name}:{mode}" for mode in ("major", "minor") for name in PITCH_CLASS_NAMES)


def _check_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    return scores, labels.astype(bool)


def average_precision(scores, labels) -> float:
    """AP = sum over ranks k of precision@k * delta-recall@k, descending scores."""
    scores, labels = _check_pair(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InvalidInput("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    cum_pos = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum_pos[hits] / ranks[hits]).sum() / n_pos)


def mean_average_precision(scores, labels) -> tuple[float, dict, list]:
    """Macro mAP over tag columns; returns (mAP, per-tag AP, skipped tags).

    ``scores`` and ``labels`` are (items, tags); tags with no positive are
    skipped and reported by index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    per_tag = {}
    skipped = []
    for k in range(scores.shape[1]):
        if labels[:, k].sum() == 0:
            skipped.append(k)
            continue
        per_tag[k] = average_precision(scores[:, k], labels[:, k])
    if not per_tag:
        raise InvalidInput("no tag has a positive")
    return float(np.mean(list(per_tag.values()))), per_tag, skipped


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U statistic with midrank ties, in [0, 1]."""
    scores, labels = _check_pair(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInput("roc_auc needs both classes present")
    ranks = _midranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_roc_auc(scores, labels) -> tuple[float, dict, list]:
    """Macro AUC over tag columns, skipping single-class tags."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    per_tag = {}
    skipped = []
    for k in range(scores.shape[1]):
        pos = labels[:, k].sum()
        if pos == 0 or pos == len(labels):
            skipped.append(k)
            continue
        per_tag[k] = roc_auc(scores[:, k], labels[:, k])
    if not per_tag:
        raise InvalidInput("no tag has both classes")
    return float(np.mean(list(per_tag.values()))), per_tag, skipped


def accuracy(pred_class, true_class) -> float:
    pred = np.asarray(pred_class)
    true = np.asarray(true_class)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeError(f"pred {pred.shape} vs true {true.shape}")
    if len(pred) == 0:
        raise InvalidInput("accuracy of an empty set is undefined")
    return float((pred == true).mean())


@dataclass(frozen=True)
class KeyLabel:
    tonic: int  # semitone pitch class, 0 = C
    mode: str   # "major" | "minor"

    def __post_init__(self):
        if not 0 <= self.tonic < 12:
            raise InvalidInput(f"tonic {self.tonic} outside 0..11")
        if self.mode not in ("major", "minor"):
            raise InvalidInput(f"mode must be major or minor, got {self.mode!r}")

    @property
    def index(self) -> int:
        return self.tonic + (12 if self.mode == "minor" else 0)


_ENHARMONIC = {"Db": "C#", "Eb": "D#", "Fb": "E", "Gb": "F#", "Ab": "G#",
               "Bb": "A#", "Cb": "B", "E#": "F", "B#": "C"}


def key_from_label(label: str) -> KeyLabel:
    """Parse 'C:major', 'f# minor', 'Bb:min' and similar spellings."""
    parts = label.strip().replace(":", " ").split()
    if len(parts) != 2:
        raise InvalidInput(f"cannot parse key label {label!r}")
    name = parts[0][0].upper() + parts[0][1:].lower()
    name = _ENHARMONIC.get(name, name)
    mode = parts[1].lower()
    if name not in PITCH_CLASS_NAMES:
        raise InvalidInput(f"unknown pitch class in {label!r}")
    if mode.startswith("maj"):
        mode = "major"
    elif mode.startswith("min"):
        mode = "minor"
    else:
        raise InvalidInput(f"unknown mode in {label!r}")
    return KeyLabel(PITCH_CLASS_NAMES.index(name), mode)


def key_from_index(index: int) -> KeyLabel:
    if not 0 <= index < 24:
        raise InvalidInput(f"key index {index} outside 0..23")
    return KeyLabel(index % 12, "major" if index < 12 else "minor")


def key_score(pred: KeyLabel, truth: KeyLabel) -> float:
    """Partial-credit score for one prediction."""
    if pred == truth:
        return 1.0
    if pred.mode == truth.mode and (pred.tonic - truth.tonic) % 12 in (5, 7):
        return 0.5
    if pred.mode != truth.mode:
        if pred.mode == "major" and (pred.tonic + 9) % 12 == truth.tonic:
            return 0.3  # truth is pred's relative minor
        if pred.mode == "minor" and (pred.tonic + 3) % 12 == truth.tonic:
            return 0.3  # truth is pred's relative major
        if pred.tonic == truth.tonic:
            return 0.2  # parallel major/minor
    return 0.0


def weighted_key_accuracy(pred, truth) -> tuple[float, list]:
    """Mean partial-credit key score; returns (mean, per-item scores)."""
    if len(pred) != len(truth):
        raise ShapeError(f"{len(pred)} predictions vs {len(truth)} truths")
    if len(pred) == 0:
        raise InvalidInput("weighted_key_accuracy of an empty set is undefined")
    scores = [key_score(p, t) for p, t in zip(pred, truth)]
    return float(np.mean(scores)), scores


def r_squared(pred, truth) -> float:
    """Coefficient of determination; may be negative for bad predictors."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
    if len(pred) < 2:
        raise InvalidInput("r_squared needs at least two items")
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DegenerateTarget("target variance is zero")
    ss_res = float(((truth - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot
