"""Shallow MLP probes trained on frozen embeddings.

A probe is a stack of linear layers with ReLU in between, dropout applied
to the input of every layer while training, optimized with Adam under the
warmup-cosine schedule, with an optional L2 penalty on the weights.
Embeddings are standardized with train-split statistics; regression
targets are likewise standardized and predictions de-standardized, which
leaves the reported coefficient of determination unchanged.

Model selection: the validation metric is evaluated every tenth of the
run (and at the final step) and the best-scoring parameters are kept.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .catalog import TrackRecord
from .errors import EmptyDataset, InvalidInput, ShapeError, VocabError
from .metrics import (
    accuracy,
    key_from_label,
    macro_roc_auc,
    mean_average_precision,
    r_squared,
    weighted_key_accuracy,
)
from .trainer import AdamState, ScheduleConfig, adam_step, bce_loss, lr_at

TASKS = ("multilabel", "multiclass", "regression")


@dataclass(frozen=True)
class ProbeConfig:
    hidden_layers: tuple = ()      # () = linear probe
    dropout: float = 0.0
    batch_size: int = 256
    peak_lr: float = 1e-3
    total_steps: int = 2000
    warmup_steps: int = 1000
    l2: float = 0.0
    task: str = "multilabel"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidInput("dropout must be in [0, 1)")
        if self.total_steps <= self.warmup_steps:
            raise InvalidInput("total_steps must exceed warmup_steps")
        if self.task not in TASKS:
            raise InvalidInput(f"unknown task {self.task!r}")
        if self.l2 < 0:
            raise InvalidInput("l2 must be non-negative")


@dataclass
class Probe:
    config: ProbeConfig
    params: dict                    # name -> Tensor
    input_dim: int
    output_dim: int
    output_names: tuple
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0

    def layer_dims(self) -> list:
        return [self.input_dim, *self.config.hidden_layers, self.output_dim]


def _init_probe(cfg: ProbeConfig, input_dim: int, output_dim: int, output_names,
                rng: np.random.Generator) -> Probe:
    params: dict[str, Tensor] = {}
    dims = [input_dim, *cfg.hidden_layers, output_dim]
    for i, (cin, cout) in enumerate(zip(dims[:-1], dims[1:])):
        std = np.sqrt(2.0 / cin)
        params[f"l{i}.w"] = Tensor((rng.standard_normal((cin, cout)) * std).astype(np.float32),
                                   requires_grad=True)
        params[f"l{i}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return Probe(config=cfg, params=params, input_dim=input_dim, output_dim=output_dim,
                 output_names=tuple(output_names),
                 input_mean=np.zeros(input_dim, np.float32),
                 input_std=np.ones(input_dim, np.float32))


def _forward(probe: Probe, x: Tensor, dropout_rng=None) -> Tensor:
    cfg = probe.config
    n_layers = len(cfg.hidden_layers) + 1
    h = x
    for i in range(n_layers):
        if dropout_rng is not None and cfg.dropout > 0:
            h = ad.dropout(h, cfg.dropout, dropout_rng)
        h = ad.add(ad.matmul(h, probe.params[f"l{i}.w"]), probe.params[f"l{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def _loss(probe: Probe, logits: Tensor, y: np.ndarray) -> Tensor:
    cfg = probe.config
    if cfg.task == "multilabel":
        loss = bce_loss(Tensor(y), ad.sigmoid(logits))
    elif cfg.task == "multiclass":
        loss = ad.softmax_cross_entropy(logits, y)
    else:
        diff = ad.sub(logits, Tensor(y.reshape(-1, 1)))
        loss = ad.tmean(ad.mul(diff, diff))
    if cfg.l2 > 0:
        penalty = None
        for name, p in probe.params.items():
            if name.endswith(".w"):
                term = ad.tsum(ad.mul(p, p))
                penalty = term if penalty is None else ad.add(penalty, term)
        loss = ad.add(loss, ad.scale(penalty, cfg.l2))
    return loss


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(probe: Probe, embeddings: np.ndarray) -> np.ndarray:
    """Scores for a batch: per-tag sigmoids, softmax rows, or de-standardized reals."""
    x = np.asarray(embeddings, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != probe.input_dim:
        raise ShapeError(f"predict: expected (B, {probe.input_dim}), got {x.shape}")
    x = (x - probe.input_mean) / probe.input_std
    with ad.no_grad():
        logits = _forward(probe, Tensor(x)).data
    if probe.config.task == "multilabel":
        return 1.0 / (1.0 + np.exp(-logits))
    if probe.config.task == "multiclass":
        return _softmax(logits)
    return logits[:, 0] * probe.target_std + probe.target_mean


def _validation_score(probe: Probe, x: np.ndarray, y: np.ndarray) -> float:
    scores = predict(probe, x)
    task = probe.config.task
    try:
        if task == "multilabel":
            return mean_average_precision(scores, y)[0]
        if task == "multiclass":
            return accuracy(scores.argmax(axis=1), y)
        return r_squared(scores, y)
    except InvalidInput:
        return float("-inf")


def train_probe(embeddings, targets, cfg: ProbeConfig, output_names=None,
                valid_embeddings=None, valid_targets=None) -> tuple[Probe, list]:
    """Fit a probe; returns it with a (step, lr, loss, valid_score) log."""
    x = np.asarray(embeddings, dtype=np.float32)
    if x.ndim != 2 or len(x) == 0:
        raise EmptyDataset("no training embeddings")
    if cfg.task == "multilabel":
        y = np.asarray(targets, dtype=np.float32)
        if y.shape[0] != x.shape[0] or y.ndim != 2:
            raise ShapeError(f"targets {y.shape} do not match embeddings {x.shape}")
        out_dim = y.shape[1]
    elif cfg.task == "multiclass":
        y = np.asarray(targets, dtype=np.int64)
        if y.shape != (x.shape[0],):
            raise ShapeError(f"targets {y.shape} do not match embeddings {x.shape}")
        out_dim = int(y.max()) + 1 if output_names is None else len(output_names)
    else:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != (x.shape[0],):
            raise ShapeError(f"targets {y.shape} do not match embeddings {x.shape}")
        out_dim = 1
    if output_names is None:
        output_names = [f"out{i}" for i in range(out_dim)]
    if len(output_names) != out_dim:
        raise ShapeError(f"{len(output_names)} output names for {out_dim} outputs")

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xB0BE)))
    drop_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD0)))
    probe = _init_probe(cfg, x.shape[1], out_dim, output_names, rng)

    probe.input_mean = x.mean(axis=0)
    probe.input_std = np.where(x.std(axis=0) < 1e-8, 1.0, x.std(axis=0)).astype(np.float32)
    xs = (x - probe.input_mean) / probe.input_std
    if cfg.task == "regression":
        probe.target_mean = float(y.mean())
        probe.target_std = float(y.std()) if y.std() > 1e-12 else 1.0
        y_fit = ((y - probe.target_mean) / probe.target_std).astype(np.float32)
    else:
        y_fit = y

    sched = ScheduleConfig(peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps,
                           total_steps=cfg.total_steps)
    state = AdamState()
    batch = min(cfg.batch_size, len(xs))
    eval_every = max(1, cfg.total_steps // 10)
    has_valid = valid_embeddings is not None and len(valid_embeddings) > 0
    best_score = float("-inf")
    best_params = None
    log = []

    order = rng.permutation(len(xs))
    cursor = 0
    for step in range(cfg.total_steps):
        if cursor + batch > len(order):
            order = rng.permutation(len(xs))
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch

        lr = lr_at(step + 1, sched)
        logits = _forward(probe, Tensor(xs[idx]),
                          dropout_rng=drop_rng if cfg.dropout > 0 else None)
        loss = _loss(probe, logits, y_fit[idx])
        for p in probe.params.values():
            p.grad = None
        ad.backward(loss)
        adam_step(probe.params, {n: p.grad for n, p in probe.params.items()}, state, lr)

        score = None
        if (step + 1) % eval_every == 0 or step + 1 == cfg.total_steps:
            if has_valid:
                score = _validation_score(probe, valid_embeddings, valid_targets)
                if score > best_score:
                    best_score = score
                    best_params = {n: p.data.copy() for n, p in probe.params.items()}
        log.append((step, lr, float(loss.data), score))

    if best_params is not None:
        for n, p in probe.params.items():
            p.data = best_params[n]
    return probe, log


# ---------------------------------------------------------------------------
# end-to-end task runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskConfig:
    name: str
    kind: str = "multiclass"        # multilabel | multiclass | regression
    label_prefix: str | None = None  # None = all labels (multilabel/multiclass)
    target: str | None = None        # scalar target name for regression
    metrics: tuple = ()              # extra metrics, e.g. ("weighted_key_accuracy",)

    def __post_init__(self):
        if self.kind not in TASKS:
            raise InvalidInput(f"unknown task kind {self.kind!r}")
        if self.kind == "regression" and not self.target:
            raise InvalidInput("regression tasks need a target name")


def _task_labels(records, task: TaskConfig) -> list:
    labels = sorted(set().union(*[r.labels for r in records]) if records else set())
    if task.label_prefix:
        labels = [lab for lab in labels if lab.startswith(task.label_prefix)]
    if not labels:
        raise VocabError(f"task {task.name!r}: no labels match prefix {task.label_prefix!r}")
    return labels


def _targets_for(records, task: TaskConfig, labels: list):
    if task.kind == "multilabel":
        index = {lab: i for i, lab in enumerate(labels)}
        y = np.zeros((len(records), len(labels)), dtype=np.float32)
        for i, rec in enumerate(records):
            for lab in rec.labels:
                if lab in index:
                    y[i, index[lab]] = 1.0
        return y
    if task.kind == "multiclass":
        index = {lab: i for i, lab in enumerate(labels)}
        y = np.empty(len(records), dtype=np.int64)
        for i, rec in enumerate(records):
            matching = [lab for lab in rec.labels if lab in index]
            if len(matching) != 1:
                raise VocabError(
                    f"{rec.track_id}: multiclass task needs exactly one matching label, "
                    f"found {matching}")
            y[i] = index[matching[0]]
        return y
    values = []
    for rec in records:
        if task.target not in rec.scalar_targets:
            raise VocabError(f"{rec.track_id}: missing scalar target {task.target!r}")
        values.append(rec.scalar_targets[task.target])
    return np.asarray(values, dtype=np.float64)


def config_digest(*docs) -> str:
    blob = json.dumps(docs, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_task(embedding_map: dict, records, task: TaskConfig, cfg: ProbeConfig,
             model_tag: str = "model", config_hash: str | None = None,
             probe: Probe | None = None) -> tuple[dict, Probe]:
    """Train on the train split, select on valid, report test metrics.

    ``embedding_map`` is track_id -> (m,) array. Pass a pre-trained probe
    to skip training and only evaluate.
    """
    if cfg.task != task.kind:
        raise InvalidInput(f"probe task {cfg.task!r} != task kind {task.kind!r}")
    by_split = {name: [] for name in ("train", "valid", "test")}
    for rec in records:
        if rec.track_id in embedding_map:
            by_split[rec.split].append(rec)
    for name in ("train", "test"):
        if not by_split[name] and probe is None:
            raise EmptyDataset(f"task {task.name!r}: empty {name} split")

    labels = _task_labels(records, task) if task.kind != "regression" else []
    output_names = labels if labels else [task.target]
    if probe is not None and tuple(output_names) != probe.output_names:
        raise VocabError(
            f"task {task.name!r}: manifest labels {output_names[:4]}... do not match "
            f"the probe's outputs {list(probe.output_names[:4])}...")

    def xy(split_records):
        x = np.stack([embedding_map[r.track_id] for r in split_records]) \
            if split_records else np.zeros((0, 1), np.float32)
        return x, _targets_for(split_records, task, labels) if split_records else None

    if probe is None:
        x_train, y_train = xy(by_split["train"])
        x_valid, y_valid = xy(by_split["valid"])
        probe, _ = train_probe(x_train, y_train, cfg, output_names=output_names,
                               valid_embeddings=x_valid if len(x_valid) else None,
                               valid_targets=y_valid)

    x_test, y_test = xy(by_split["test"])
    if len(x_test) == 0:
        raise EmptyDataset(f"task {task.name!r}: empty test split")
    scores = predict(probe, x_test)

    results: dict[str, float] = {}
    per_tag: dict[str, float] = {}
    if task.kind == "multilabel":
        ap, ap_per_tag, skipped = mean_average_precision(scores, y_test)
        results["map"] = ap
        try:
            auc, auc_per_tag, _ = macro_roc_auc(scores, y_test)
            results["roc_auc"] = auc
        except InvalidInput:
            auc_per_tag = {}
        for k, v in ap_per_tag.items():
            per_tag[labels[k]] = v
        results["skipped_tags"] = len(skipped)
    elif task.kind == "multiclass":
        pred_idx = scores.argmax(axis=1)
        results["accuracy"] = accuracy(pred_idx, y_test)
        if "weighted_key_accuracy" in task.metrics:
            pred_keys = [key_from_label(labels[i]) for i in pred_idx]
            true_keys = [key_from_label(labels[i]) for i in y_test]
            results["weighted_key_accuracy"] = weighted_key_accuracy(pred_keys, true_keys)[0]
    else:
        results["r2"] = r_squared(scores, y_test)

    report = {
        "task": task.name,
        "task_type": task.kind,
        "model_tag": model_tag,
        "metrics": results,
        "per_tag": per_tag,
        "config_hash": config_hash or config_digest(task.__dict__, cfg.__dict__),
        "seed": cfg.seed,
        "n_train": len(by_split["train"]),
        "n_valid": len(by_split["valid"]),
        "n_test": len(by_split["test"]),
    }
    return report, probe


def save_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# probe files (same container layout as model checkpoints)
# ---------------------------------------------------------------------------

PROBE_MAGIC = b"MPB1"


def save_probe(probe: Probe, path) -> None:
    import struct

    from .errors import IoError
    names = sorted(probe.params)
    header = {
        "config": {**probe.config.__dict__,
                   "hidden_layers": list(probe.config.hidden_layers)},
        "input_dim": probe.input_dim,
        "output_dim": probe.output_dim,
        "output_names": list(probe.output_names),
        "target_mean": probe.target_mean,
        "target_std": probe.target_std,
        "tensors": [{"name": n, "shape": list(probe.params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(PROBE_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(probe.input_mean, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(probe.input_std, dtype="<f4").tobytes())
            for n in names:
                fh.write(np.ascontiguousarray(probe.params[n].data, dtype="<f4").tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write probe {path}: {exc}") from exc


def load_probe(path) -> Probe:
    import struct

    from .errors import FormatError, IoError
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read probe {path}: {exc}") from exc
    if blob[:4] != PROBE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode())
    cfg_doc = dict(header["config"])
    cfg_doc["hidden_layers"] = tuple(cfg_doc["hidden_layers"])
    cfg = ProbeConfig(**cfg_doc)
    dim = header["input_dim"]
    offset = 8 + hlen
    mean = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
    offset += 4 * dim
    std = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
    offset += 4 * dim
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if offset + 4 * count > len(blob):
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        params[entry["name"]] = Tensor(
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy(),
            requires_grad=True)
        offset += 4 * count
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    probe = Probe(config=cfg, params=params, input_dim=dim, output_dim=header["output_dim"],
                  output_names=tuple(header["output_names"]),
                  input_mean=mean, input_std=std,
                  target_mean=header["target_mean"], target_std=header["target_std"])
    return probe
