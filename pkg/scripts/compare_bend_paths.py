"""Two-stage bend-roll pipeline vs. a no-bend baseline on one toy corpus.

Trains three models on the same synthetic corpus with identical budgets:
a bend-roll estimator, a synthesis model conditioned on bend rolls, and a
synthesis model trained --no-bend. Every item is rendered through both
routes and scored against the corpus; the summary compares vibrato F1.
"""

import argparse
import json
import dataclasses
from pathlib import Path

from violindiff.cli import BEND_TENSOR_SUFFIX, main
from violindiff.config import PipelineConfig
from violindiff.synth_data import item_stem, read_manifest


def run(argv):
    print("+ violindiff " + " ".join(str(a) for a in argv))
    rc = main([str(a) for a in argv])
    if rc != 0:
        raise SystemExit(rc)


def toy_config(pieces: int, performers: int) -> PipelineConfig:
    cfg = PipelineConfig()
    return dataclasses.replace(
        cfg,
        audio=dataclasses.replace(cfg.audio, n_mels=16),
        diffusion=dataclasses.replace(cfg.diffusion, synthesis_steps=60,
                                      bend_steps=60),
        corpus=dataclasses.replace(cfg.corpus, n_pieces=pieces,
                                   n_performers=performers, piece_len_s=2.4,
                                   note_min_s=0.5, note_max_s=0.9,
                                   rest_prob=0.1, double_stop_prob=0.05,
                                   seed=31),
        training=dataclasses.replace(cfg.training, batch_size=12,
                                     crop_synthesis=64, crop_bend=96,
                                     log_every=200, ckpt_every=10 ** 9),
    )


def main_script():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/bend_vs_nobend"))
    ap.add_argument("--pieces", type=int, default=6)
    ap.add_argument("--performers", type=int, default=4)
    ap.add_argument("--bend-steps", type=int, default=2500,
                    help="training steps for the bend stage")
    ap.add_argument("--synth-steps", type=int, default=1000,
                    help="training steps for each synthesis model")
    args = ap.parse_args()

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg = toy_config(args.pieces, args.performers)
    cfg_path = out / "config.json"
    cfg.save(cfg_path)
    base = ["--config", cfg_path]

    corpus = out / "corpus"
    run(["gen-data", "--out", corpus] + base)
    run(["train", "--stage", "bend", "--data", corpus,
         "--out", out / "bend.vdt", "--steps", args.bend_steps] + base)
    run(["train", "--stage", "synthesis", "--data", corpus,
         "--out", out / "synthesis.vdt", "--steps", args.synth_steps] + base)
    run(["train", "--stage", "synthesis", "--data", corpus,
         "--out", out / "synthesis_nobend.vdt", "--steps", args.synth_steps,
         "--no-bend"] + base)

    two_stage = out / "gen_two_stage"
    baseline = out / "gen_baseline"
    two_stage.mkdir(exist_ok=True)
    baseline.mkdir(exist_ok=True)
    for doc in read_manifest(corpus)["items"]:
        stem = item_stem(doc["piece_id"], doc["performer_id"])
        midi = corpus / doc["midi"]
        bend_path = two_stage / f"{stem}{BEND_TENSOR_SUFFIX}"
        run(["estimate-bend", "--ckpt", out / "bend.vdt", "--midi", midi,
             "--out", bend_path, "--performer", doc["performer_id"]] + base)
        run(["synthesize", "--ckpt", out / "synthesis.vdt", "--midi", midi,
             "--out", two_stage / f"{stem}.wav",
             "--performer", doc["performer_id"], "--bend-from", "file",
             "--bend-file", bend_path] + base)
        run(["synthesize", "--ckpt", out / "synthesis_nobend.vdt",
             "--midi", midi, "--out", baseline / f"{stem}.wav",
             "--performer", doc["performer_id"], "--no-bend"] + base)

    summary = {}
    for name, gen_dir in (("two_stage", two_stage), ("baseline", baseline)):
        report_path = out / f"report_{name}.json"
        run(["evaluate", "--corpus", corpus, "--generated", gen_dir,
             "--out", report_path] + base)
        report = json.loads(report_path.read_text())
        summary[name] = {
            "all_fad": report["fad"]["all_fad"],
            "vibrato": report["vibrato"],
        }

    # headline comparison: bend-path F1 for the two-stage route, audio-path
    # F1 for the baseline (it has no bend tensors to read)
    ts = summary["two_stage"]["vibrato"].get("bend")
    bl = summary["baseline"]["vibrato"].get("audio")
    summary["vibrato_f1_two_stage"] = ts["f1"] if ts else None
    summary["vibrato_f1_baseline"] = bl["f1"] if bl else None
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main_script()
