"""Run configuration: YAML loading, strict key validation, canonical hashing.

One config file drives the whole pipeline; each subcommand reads its own
section. Unknown keys are rejected everywhere. The config hash is the
SHA-256 of the canonicalized (sorted-key JSON) content after overrides,
so artifacts produced from byte-different but semantically identical
files share a hash.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError

SECTIONS = ("synth", "features", "stats", "model", "pretrain", "embed",
            "probe", "eval", "report")

_SECTION_KEYS = {
    "synth": {"n_tracks", "duration_range", "n_pitch_classes", "n_timbre_classes",
              "noise_floor", "f0_low_hz", "f0_high_hz", "out_dir"},
    "features": {"manifest", "out_dir", "frontend"},
    "frontend": {"n_mels", "window_seconds", "fft_size", "hop_seconds",
                 "fmin_hz", "fmax_hz", "log_floor"},
    "stats": {"manifest", "out_dir"},
    "model": {"encoder", "projector"},
    "encoder": {"widths", "strides", "embedding_dim", "activation", "residual_gain",
                "stem_kernel", "conv_kernel"},
    "projector": {"hidden_width", "output_dim", "depth"},
    "pretrain": {"manifest", "mode", "out_dir", "batch_size", "pairs", "schedule",
                 "mixup", "temperature", "loss_reduction", "max_pair_distance_frames",
                 "label_filter", "checkpoint_interval"},
    "schedule": {"peak_lr", "warmup_steps", "total_steps"},
    "mixup": {"alpha", "beta", "enabled"},
    "embed": {"manifest", "checkpoint", "out", "window_seconds", "sample_rate_hz",
              "aggregate", "variant", "batch_rows"},
    "probe": {"manifest", "embeddings", "out_dir", "model_tag", "task", "probe"},
    "task": {"name", "kind", "label_prefix", "target", "metrics"},
    "probe_params": {"hidden_layers", "dropout", "batch_size", "peak_lr", "total_steps",
                     "warmup_steps", "l2", "task", "seed"},
    "eval": {"manifest", "embeddings", "probe_file", "task", "out", "model_tag"},
    "report": {"inputs", "out_dir"},
}

_NESTED = {
    "features": {"frontend": "frontend"},
    "model": {"encoder": "encoder", "projector": "projector"},
    "pretrain": {"schedule": "schedule", "mixup": "mixup"},
    "probe": {"task": "task", "probe": "probe_params"},
    "eval": {"task": "task"},
}


def _validate(doc: dict, schema_name: str, path: str) -> None:
    allowed = _SECTION_KEYS[schema_name]
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)} "
                          f"(allowed: {sorted(allowed)})")
    for key, child_schema in _NESTED.get(schema_name, {}).items():
        if key in doc and doc[key] is not None:
            _validate(doc[key], child_schema, f"{path}.{key}")


class RunConfig:
    def __init__(self, doc: dict, source: str = "<memory>"):
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: top level must be a mapping")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")
        for name in doc:
            if doc[name] is not None:
                _validate(doc[name], name, name)
        self.doc = doc
        self.source = source

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.doc, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def section(self, name: str) -> dict:
        if name not in self.doc or self.doc[name] is None:
            raise ConfigError(f"{self.source}: missing config section {name!r}")
        return self.doc[name]

    def optional(self, name: str) -> dict:
        return self.doc.get(name) or {}

    def apply_override(self, dotted: str) -> None:
        """key.path=value with a YAML-parsed value, applied in place."""
        if "=" not in dotted:
            raise ConfigError(f"override {dotted!r} must look like key.path=value")
        key_path, raw = dotted.split("=", 1)
        keys = key_path.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {dotted!r}: bad value ({exc})")
        node = self.doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r}: {key} is not a mapping")
        node[keys[-1]] = value
        # re-validate the touched section
        RunConfig(self.doc, self.source)


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    cfg = RunConfig(doc or {}, source=str(path))
    for item in overrides:
        cfg.apply_override(item)
    return cfg
