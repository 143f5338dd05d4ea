"""Run the whole pipeline on a small synthetic corpus.

gen-data -> train (bend, synthesis) -> estimate-bend -> synthesize ->
evaluate, all through the CLI entry points, so this doubles as a living
example of the command contracts. Budgets are sized for a laptop CPU;
expect a few minutes with the defaults below.
"""

import argparse
import dataclasses
import json
from pathlib import Path

from violindiff.cli import BEND_TENSOR_SUFFIX, main
from violindiff.config import PipelineConfig
from violindiff.synth_data import item_stem, read_manifest


def run(argv):
    print("+ violindiff " + " ".join(str(a) for a in argv))
    rc = main([str(a) for a in argv])
    if rc != 0:
        raise SystemExit(rc)


def small_config(steps_hint: int) -> PipelineConfig:
    cfg = PipelineConfig()
    return dataclasses.replace(
        cfg,
        audio=dataclasses.replace(cfg.audio, n_mels=16),
        diffusion=dataclasses.replace(cfg.diffusion, synthesis_steps=40,
                                      bend_steps=40),
        corpus=dataclasses.replace(cfg.corpus, n_pieces=2, n_performers=2,
                                   piece_len_s=2.0, note_min_s=0.4,
                                   note_max_s=0.8),
        training=dataclasses.replace(cfg.training, batch_size=8,
                                     crop_synthesis=48, crop_bend=64,
                                     log_every=max(1, steps_hint // 10)),
    )


def main_script():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    ap.add_argument("--steps", type=int, default=300,
                    help="training steps per stage")
    args = ap.parse_args()

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg = small_config(args.steps)
    cfg_path = out / "config.json"
    cfg.save(cfg_path)
    base = ["--config", cfg_path]

    corpus = out / "corpus"
    run(["gen-data", "--out", corpus] + base)
    run(["train", "--stage", "bend", "--data", corpus,
         "--out", out / "bend.vdt", "--steps", args.steps,
         "--log", out / "bend_log.jsonl"] + base)
    run(["train", "--stage", "synthesis", "--data", corpus,
         "--out", out / "synthesis.vdt", "--steps", args.steps,
         "--log", out / "synthesis_log.jsonl"] + base)

    gen = out / "generated"
    gen.mkdir(exist_ok=True)
    for doc in read_manifest(corpus)["items"]:
        stem = item_stem(doc["piece_id"], doc["performer_id"])
        midi = corpus / doc["midi"]
        run(["estimate-bend", "--ckpt", out / "bend.vdt", "--midi", midi,
             "--out", gen / f"{stem}{BEND_TENSOR_SUFFIX}",
             "--performer", doc["performer_id"]] + base)
        run(["synthesize", "--ckpt", out / "synthesis.vdt", "--midi", midi,
             "--out", gen / f"{stem}.wav", "--performer", doc["performer_id"],
             "--bend-from", "file",
             "--bend-file", gen / f"{stem}{BEND_TENSOR_SUFFIX}"] + base)

    report = out / "report.json"
    run(["evaluate", "--corpus", corpus, "--generated", gen, "--out", report,
         "--csv", out / "labels.csv"] + base)
    print(json.dumps(json.loads(report.read_text()), indent=2))


if __name__ == "__main__":
    main_script()
