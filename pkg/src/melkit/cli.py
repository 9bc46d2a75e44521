"""Command-line entry point orchestrating the pipeline.

Subcommands: synth, features, stats, pretrain, embed, probe, eval, report.
Every subcommand takes --config (required), --seed, --out and repeatable
--override key.path=value flags; relative paths in the config resolve
against --out. Each artifact gets a sidecar .meta.json recording the
config hash, seed and tool version; directories carry an .incomplete
marker while being written so aborted runs are recognizable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from . import __version__
from .catalog import (
    SynthConfig,
    Vocabulary,
    label_stats,
    load_manifest,
    read_wav,
    synth_corpus,
    write_manifest,
)
from .config import RunConfig, load_config
from .dsp import AudioClip, FrontendConfig, log_mel, read_feature, write_feature
from .embedder import EmbedConfig, embed_track, write_embeddings
from .errors import ConfigError, MelkitError
from .model import EncoderConfig, ProjectorConfig, init_model, load_checkpoint
from .prober import (
    ProbeConfig,
    TaskConfig,
    load_probe,
    run_task,
    save_probe,
    save_report,
)
from .sampler import FeatureStore, MixupConfig
from .trainer import PretrainConfig, ScheduleConfig, pretrain


def _resolve(root: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else root / p


def _write_sidecar(artifact: Path, cfg: RunConfig, seed: int, command: str) -> None:
    meta = {
        "config_hash": cfg.config_hash,
        "seed": seed,
        "version": __version__,
        "command": command,
    }
    side = artifact.with_name(artifact.name + ".meta.json")
    side.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


class _incomplete_marker:
    """Directory marker dropped while writing, removed on success."""

    def __init__(self, directory: Path):
        self.path = directory / ".incomplete"
        directory.mkdir(parents=True, exist_ok=True)

    def __enter__(self):
        self.path.write_text("")
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None and self.path.exists():
            self.path.unlink()
        return False


def _encoder_config(doc: dict) -> EncoderConfig:
    kw = dict(doc)
    if "widths" in kw:
        kw["widths"] = tuple(kw["widths"])
    if "strides" in kw:
        kw["strides"] = tuple(tuple(s) if isinstance(s, (list, tuple)) else s
                              for s in kw["strides"])
    if "stem_kernel" in kw:
        kw["stem_kernel"] = tuple(kw["stem_kernel"])
    return EncoderConfig(**kw).normalized()


def _model_configs(cfg: RunConfig) -> tuple[EncoderConfig, ProjectorConfig]:
    doc = cfg.optional("model")
    enc = _encoder_config(doc.get("encoder") or {})
    proj = ProjectorConfig(**(doc.get("projector") or {}))
    return enc, proj


def cmd_synth(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = dict(cfg.section("synth"))
    out_dir = _resolve(root, doc.pop("out_dir", "corpus"))
    if "duration_range" in doc:
        doc["duration_range"] = tuple(doc["duration_range"])
    synth_cfg = SynthConfig(seed=seed, **doc)
    with _incomplete_marker(out_dir):
        records, vocab, manifest = synth_corpus(synth_cfg, out_dir)
    _write_sidecar(manifest, cfg, seed, "synth")
    print(f"synth: {len(records)} tracks, {len(vocab)} labels -> {out_dir}")
    return 0


def cmd_features(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = cfg.section("features")
    manifest_path = _resolve(root, doc["manifest"])
    out_dir = _resolve(root, doc.get("out_dir", "features"))
    frontend = FrontendConfig(**(doc.get("frontend") or {}))
    records, _ = load_manifest(manifest_path)
    with _incomplete_marker(out_dir):
        for rec in records:
            if rec.audio_path is None:
                raise ConfigError(f"{rec.track_id}: manifest record has no audio_path")
            samples = read_wav(_resolve(manifest_path.parent, rec.audio_path))
            feat = log_mel(AudioClip(samples, 16000, rec.track_id), frontend)
            write_feature(feat, out_dir / f"{rec.track_id}.maf")
            rec.feature_path = f"{rec.track_id}.maf"
            rec.duration_frames = feat.n_frames
        write_manifest(records, out_dir / "manifest.jsonl")
    _write_sidecar(out_dir / "manifest.jsonl", cfg, seed, "features")
    print(f"features: {len(records)} tracks -> {out_dir}")
    return 0


def cmd_stats(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = cfg.section("stats")
    records, _ = load_manifest(_resolve(root, doc["manifest"]))
    out_dir = _resolve(root, doc.get("out_dir", "stats"))
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = label_stats(records)
    stats.write_csv(out_dir / "label_counts.csv", out_dir / "labels_per_item.csv")
    _write_sidecar(out_dir / "label_counts.csv", cfg, seed, "stats")
    print(f"stats: {len(stats.counts)} labels over {stats.n_items} items -> {out_dir}")
    return 0


def cmd_pretrain(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = dict(cfg.section("pretrain"))
    manifest_path = _resolve(root, doc.pop("manifest"))
    out_dir = _resolve(root, doc.pop("out_dir", "runs/pretrain"))
    records, vocab = load_manifest(manifest_path)

    sched = ScheduleConfig(**(doc.pop("schedule", None) or {}))
    mix = MixupConfig(**(doc.pop("mixup", None) or {}))
    train_cfg = PretrainConfig(schedule=sched, mixup=mix, **doc)

    enc, proj = _model_configs(cfg)
    n_labels = None
    if train_cfg.mode == "supervised":
        head_vocab = vocab.subset(train_cfg.label_filter) if train_cfg.label_filter else vocab
        n_labels = len(head_vocab)
    model = init_model(enc, proj, seed=seed, n_labels=n_labels)

    store = FeatureStore(manifest_path.parent)
    with _incomplete_marker(out_dir):
        history = pretrain(records, vocab, store, model, train_cfg, seed, out_dir)
    _write_sidecar(out_dir / "final.mck", cfg, seed, "pretrain")
    print(f"pretrain[{train_cfg.mode}]: {len(history)} steps, "
          f"final loss {history[-1][2]:.4f} -> {out_dir}")
    return 0


def cmd_embed(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = dict(cfg.section("embed"))
    manifest_path = _resolve(root, doc.pop("manifest"))
    checkpoint = _resolve(root, doc.pop("checkpoint"))
    out_path = _resolve(root, doc.pop("out", "embeddings.mae"))
    embed_cfg = EmbedConfig(**doc)

    records, _ = load_manifest(manifest_path)
    model = load_checkpoint(checkpoint)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    embeddings = []
    for rec in records:
        feat = read_feature(manifest_path.parent / rec.feature_path, rec.track_id)
        embeddings.append(embed_track(model, feat, embed_cfg))
    write_embeddings(embeddings, out_path)
    _write_sidecar(out_path, cfg, seed, "embed")
    print(f"embed: {len(embeddings)} tracks -> {out_path}")
    return 0


def _load_embedding_map(path) -> dict:
    from .embedder import embeddings_as_dict, read_embeddings
    return embeddings_as_dict(read_embeddings(path))


def _task_config(doc: dict) -> TaskConfig:
    kw = dict(doc)
    if "metrics" in kw:
        kw["metrics"] = tuple(kw["metrics"])
    return TaskConfig(**kw)


def cmd_probe(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = cfg.section("probe")
    manifest_path = _resolve(root, doc["manifest"])
    records, _ = load_manifest(manifest_path)
    embedding_map = _load_embedding_map(_resolve(root, doc["embeddings"]))
    task = _task_config(doc["task"])
    probe_doc = dict(doc.get("probe") or {})
    if "hidden_layers" in probe_doc:
        probe_doc["hidden_layers"] = tuple(probe_doc["hidden_layers"])
    probe_doc.setdefault("task", task.kind)
    probe_doc.setdefault("seed", seed)
    probe_cfg = ProbeConfig(**probe_doc)
    out_dir = _resolve(root, doc.get("out_dir", f"probes/{task.name}"))
    model_tag = doc.get("model_tag", "model")

    with _incomplete_marker(out_dir):
        report, probe = run_task(embedding_map, records, task, probe_cfg,
                                 model_tag=model_tag, config_hash=cfg.config_hash)
        save_probe(probe, out_dir / "probe.mpb")
        save_report(report, out_dir / "report.json")
    _write_sidecar(out_dir / "report.json", cfg, seed, "probe")
    print(f"probe[{task.name}]: {report['metrics']} -> {out_dir}")
    return 0


def cmd_eval(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = cfg.section("eval")
    manifest_path = _resolve(root, doc["manifest"])
    records, _ = load_manifest(manifest_path)
    embedding_map = _load_embedding_map(_resolve(root, doc["embeddings"]))
    probe = load_probe(_resolve(root, doc["probe_file"]))
    task = _task_config(doc["task"])
    out_path = _resolve(root, doc.get("out", f"reports/{task.name}.json"))
    out_path.parent.mkdir(parents=True, exist_ok=True)

    report, _ = run_task(embedding_map, records, task, probe.config,
                         model_tag=doc.get("model_tag", "model"),
                         config_hash=cfg.config_hash, probe=probe)
    save_report(report, out_path)
    _write_sidecar(out_path, cfg, seed, "eval")
    print(f"eval[{task.name}]: {report['metrics']} -> {out_path}")
    return 0


def cmd_report(cfg: RunConfig, root: Path, seed: int) -> int:
    doc = cfg.section("report")
    out_dir = _resolve(root, doc.get("out_dir", "report"))
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for item in doc.get("inputs", []):
        path = _resolve(root, item)
        candidates = sorted(path.glob("*.json")) if path.is_dir() else [path]
        for p in candidates:
            if p.name.endswith(".meta.json"):
                continue
            reports.append(json.loads(p.read_text()))
    if not reports:
        raise ConfigError("report: no input reports found")

    rows = []
    for rep in sorted(reports, key=lambda r: (r["task"], r["model_tag"])):
        for metric, value in sorted(rep["metrics"].items()):
            if isinstance(value, (int, float)):
                rows.append((rep["task"], metric, value, rep["model_tag"]))

    with open(out_dir / "results.csv", "w") as fh:
        fh.write("task,metric,value,model_tag\n")
        for task, metric, value, tag in rows:
            fh.write(f"{task},{metric},{value:.6g},{tag}\n")

    tags = sorted({r[3] for r in rows})
    keys = sorted({(r[0], r[1]) for r in rows})
    cell = {(r[0], r[1], r[3]): r[2] for r in rows}
    with open(out_dir / "results.md", "w") as fh:
        fh.write("| task | metric | " + " | ".join(tags) + " |\n")
        fh.write("|---|---|" + "---|" * len(tags) + "\n")
        for task, metric in keys:
            vals = [f"{cell[(task, metric, t)]:.4f}" if (task, metric, t) in cell else "-"
                    for t in tags]
            fh.write(f"| {task} | {metric} | " + " | ".join(vals) + " |\n")
    _write_sidecar(out_dir / "results.csv", cfg, seed, "report")
    print(f"report: {len(rows)} rows over {len(tags)} models -> {out_dir}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melkit",
        description="log-mel features, contrastive/supervised pre-training, "
                    "frozen embeddings, probes and tagging metrics")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=17)
        p.add_argument("--out", default=".", help="workspace root for relative paths")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="config override, repeatable")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.override)
        root = Path(args.out)
        root.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, root, args.seed)
    except MelkitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
