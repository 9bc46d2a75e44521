#!/usr/bin/env python3
"""Run the full desk pipeline from one script:

    synth -> features -> stats -> pretrain (contrastive + timbre-supervised)
    -> embed (trained / supervised / random-init) -> probe (pitch)
    -> eval -> report

Usage:
    python scripts/desk_pipeline.py [--out WORK_DIR] [--seed N] [--steps N]

The resulting report/results.md compares pitch-probe accuracy of the
contrastively trained encoder against a random-init baseline and a
timbre-supervised encoder, the desk-scale analog of the published
comparison between pre-training strategies.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from melkit.cli import main as melkit  # noqa: E402
from melkit.model import init_model, save_checkpoint  # noqa: E402
from melkit.cli import _model_configs  # noqa: E402
from melkit.config import load_config  # noqa: E402

CONFIG = str(Path(__file__).resolve().parent.parent / "configs" / "desk.yaml")


def run(args):
    t0 = time.time()
    assert melkit(args) == 0, f"step failed: {args}"
    print(f"  [{time.time() - t0:6.1f}s] {' '.join(args[:2])}")


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="work")
    ap.add_argument("--seed", type=int, default=17)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    out, seed = args.out, str(args.seed)
    base = ["--config", CONFIG, "--out", out, "--seed", seed]
    steps = f"pretrain.schedule.total_steps={args.steps}"

    run(["synth", *base])
    run(["features", *base])
    run(["stats", *base])

    # contrastive pre-training
    run(["pretrain", *base, "--override", steps])
    # timbre-only supervised pre-training
    run(["pretrain", *base, "--override", steps,
         "--override", "pretrain.mode=supervised",
         "--override", "pretrain.label_filter=timbre:",
         "--override", "pretrain.out_dir=runs/supervised-timbre"])
    # random-init baseline checkpoint
    cfg = load_config(CONFIG)
    enc, proj = _model_configs(cfg)
    baseline = init_model(enc, proj, seed=args.seed)
    ckpt_dir = Path(out) / "runs" / "random"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(baseline, ckpt_dir / "final.mck")

    for tag, ckpt in (("synth-contrastive", "runs/contrastive/final.mck"),
                      ("synth-sup-timbre", "runs/supervised-timbre/final.mck"),
                      ("synth-random", "runs/random/final.mck")):
        run(["embed", *base,
             "--override", f"embed.checkpoint={ckpt}",
             "--override", f"embed.out=embeddings/{tag}.mae"])
        run(["probe", *base,
             "--override", f"probe.embeddings=embeddings/{tag}.mae",
             "--override", f"probe.out_dir=probes/pitch-{tag}",
             "--override", f"probe.model_tag={tag}"])
        run(["eval", *base,
             "--override", f"eval.embeddings=embeddings/{tag}.mae",
             "--override", f"eval.probe_file=probes/pitch-{tag}/probe.mpb",
             "--override", f"eval.model_tag={tag}",
             "--override", f"eval.out=reports/pitch-{tag}.json"])

    run(["report", *base])
    print(f"\ndone; see {out}/report/results.md")
    return 0


if __name__ == "__main__":
    sys.exit(main())
