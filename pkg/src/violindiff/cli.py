"""Command-line pipeline.

Subcommands: gen-data, encode, train, estimate-bend, synthesize, evaluate.
Every command accepts --config (JSON, falling back to the VIOLINDIFF_CONFIG
environment variable, then to built-in defaults) and --seed. Errors are
reported as one JSON object on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, resolve_config
from .diffusion import ConditionedSampler, DiffusionSchedule, long_sample
from .dsp import (MelSpec, denormalize_mel, griffin_lim, mel_spectrogram,
                  normalize_mel, read_wav, write_wav)
from .evaluation import (FadReport, TaggedEmbedding, embed_clip, extract_f0,
                         fad_suite, note_contour_from_bend,
                         note_contour_from_track, perf_mae, vibrato_f1,
                         vibrato_value)
from .midi_io import parse_smf
from .roll_codec import BEND_CLAMP, FrameGrid, N_PITCHES, encode_rolls, rolls_to_array
from .synth_data import gen_corpus, item_stem, read_manifest, write_corpus
from .tensor_io import read_tensor, write_tensor
from .training import TrainItem, load_model, save_model, train_stage
from .neural import StageModel

BEND_TENSOR_SUFFIX = ".bend.vdt"


def _emit_error(exc: BaseException) -> None:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(doc), file=sys.stderr)


def _config(args) -> PipelineConfig:
    cfg = resolve_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _grid(cfg: PipelineConfig, duration_s: float) -> FrameGrid:
    return FrameGrid.for_duration(duration_s, sample_rate=cfg.audio.sample_rate,
                                  hop=cfg.audio.hop_length)


def _rolls_for_midi(midi_path, cfg: PipelineConfig, n_frames: int | None = None):
    perf = parse_smf(Path(midi_path).read_bytes())
    if n_frames is None:
        end = max((n.offset_s for n in perf.notes), default=0.0)
        grid = _grid(cfg, end + cfg.corpus.release_tail_s)
    else:
        grid = FrameGrid(sample_rate=cfg.audio.sample_rate,
                         hop=cfg.audio.hop_length, n_frames=n_frames)
    return perf, encode_rolls(perf, grid)


def _sched(cfg: PipelineConfig, stage: str) -> DiffusionSchedule:
    n = cfg.diffusion.synthesis_steps if stage == "synthesis" else cfg.diffusion.bend_steps
    return DiffusionSchedule.linear(n, cfg.diffusion.beta_start, cfg.diffusion.beta_end)


def _performer_index(meta: dict, performer_id: str) -> int:
    performers = meta.get("performers", [])
    if performer_id not in performers:
        raise ValueError(f"unknown performer {performer_id!r}; "
                         f"checkpoint knows {performers}")
    return performers.index(performer_id)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ccfg = cfg.corpus
    if args.pieces is not None:
        ccfg = dataclasses.replace(ccfg, n_pieces=args.pieces)
    if args.performers is not None:
        ccfg = dataclasses.replace(ccfg, n_performers=args.performers)
    if args.seed is not None:
        ccfg = dataclasses.replace(ccfg, seed=args.seed)
    corpus = gen_corpus(ccfg)
    manifest = write_corpus(corpus, args.out)
    print(json.dumps({"manifest": str(manifest), "items": len(corpus.items),
                      "pieces": ccfg.n_pieces, "performers": ccfg.n_performers}))
    return 0


def cmd_encode(args) -> int:
    cfg = _config(args)
    perf, rolls = _rolls_for_midi(args.midi, cfg)
    write_tensor(args.out, rolls_to_array(rolls))
    print(json.dumps({"out": str(args.out), "frames": rolls.grid.n_frames,
                      "notes": len(perf.notes), "warnings": rolls.warnings}))
    return 0


def _training_items(cfg: PipelineConfig, data_dir, with_mel: bool):
    manifest = read_manifest(data_dir)
    performers = [p["performer_id"] for p in manifest["performers"]]
    root = Path(data_dir)
    items, extra = [], {"performers": performers}
    if with_mel:
        # shared normalization stats for the whole set, stored with the model
        lo, hi = np.inf, -np.inf
        mels = []
        for doc in manifest["items"]:
            clip = read_wav(root / doc["wav"])
            mel = mel_spectrogram(clip, cfg.audio).values
            lo, hi = min(lo, float(mel.min())), max(hi, float(mel.max()))
            mels.append(mel)
        extra.update(mel_lo=lo, mel_hi=hi)
    for i, doc in enumerate(manifest["items"]):
        n_frames = mels[i].shape[1] if with_mel else None
        _, rolls = _rolls_for_midi(root / doc["midi"], cfg, n_frames=n_frames)
        mel = None
        if with_mel:
            mel = normalize_mel(mels[i], lo=extra["mel_lo"], hi=extra["mel_hi"])
        items.append(TrainItem(
            roll_stack=rolls_to_array(rolls).astype(np.float64),
            performer=performers.index(doc["performer_id"]),
            mel=mel))
    return items, extra


def cmd_train(args) -> int:
    cfg = _config(args)
    model_cfg = cfg.model
    if args.no_bend:
        if args.stage != "synthesis":
            raise ValueError("--no-bend only applies to the synthesis stage")
        model_cfg = dataclasses.replace(model_cfg, no_bend=True)
    items, extra = _training_items(cfg, args.data, with_mel=args.stage == "synthesis")
    model = StageModel(model_cfg, args.stage, n_performers=len(extra["performers"]),
                       n_mels=cfg.audio.n_mels, seed=cfg.seed)
    train_cfg = cfg.training
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    result = train_stage(model, items, train_cfg, cfg.diffusion,
                         ckpt_path=args.out, meta=extra,
                         log_file=args.log, n_steps=args.steps)
    print(json.dumps({"out": str(args.out), "steps": len(result.history),
                      "first_loss": result.first_loss, "last_loss": result.last_loss}))
    return 0


def cmd_estimate_bend(args) -> int:
    cfg = _config(args)
    model, meta = load_model(args.ckpt)
    if model.stage != "bend":
        raise ValueError(f"checkpoint is a {model.stage!r} model, need stage bend")
    _, rolls = _rolls_for_midi(args.midi, cfg)
    stack = rolls_to_array(rolls).astype(np.float64)
    stack[3] = 0.0  # stage 1 sees no bend information
    sampler = ConditionedSampler(model, stack, _performer_index(meta, args.performer),
                                 guidance_weight=args.guidance if args.guidance is not None
                                 else cfg.diffusion.guidance_bend)
    sched = _sched(cfg, "bend")
    T = rolls.grid.n_frames
    window = min(cfg.training.crop_bend, T)
    bend = long_sample(sampler.window_fn, (N_PITCHES, T), window, sched,
                       seed=cfg.seed, mask=rolls.frame, init=np.zeros((N_PITCHES, T)))
    bend = np.clip(bend, -BEND_CLAMP, BEND_CLAMP) * rolls.frame
    write_tensor(args.out, bend.astype(np.float32))
    print(json.dumps({"out": str(args.out), "frames": T,
                      "active_frames": int(rolls.frame.sum())}))
    return 0


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    model, meta = load_model(args.ckpt)
    if model.stage != "synthesis":
        raise ValueError(f"checkpoint is a {model.stage!r} model, need stage synthesis")
    if args.no_bend != model.cfg.no_bend:
        raise ValueError("--no-bend flag does not match the checkpoint "
                         f"(model no_bend={model.cfg.no_bend})")
    _, rolls = _rolls_for_midi(args.midi, cfg)
    stack = rolls_to_array(rolls).astype(np.float64)
    T = rolls.grid.n_frames

    if args.bend_from == "file":
        if not args.bend_file:
            raise ValueError("--bend-from file requires --bend-file")
        bend = read_tensor(args.bend_file).astype(np.float64)
        if bend.shape != (N_PITCHES, T):
            raise ValueError(f"bend tensor shape {bend.shape} does not match "
                             f"rolls ({N_PITCHES}, {T})")
        stack[3] = np.clip(bend, -BEND_CLAMP, BEND_CLAMP)
    elif args.bend_from == "stage1":
        if not args.stage1_ckpt:
            raise ValueError("--bend-from stage1 requires --stage1-ckpt")
        bend_model, bend_meta = load_model(args.stage1_ckpt)
        if bend_model.stage != "bend":
            raise ValueError("--stage1-ckpt must be a bend-stage checkpoint")
        cond = stack.copy()
        cond[3] = 0.0
        sampler = ConditionedSampler(bend_model, cond,
                                     _performer_index(bend_meta, args.performer),
                                     guidance_weight=cfg.diffusion.guidance_bend)
        bend = long_sample(sampler.window_fn, (N_PITCHES, T),
                           min(cfg.training.crop_bend, T), _sched(cfg, "bend"),
                           seed=cfg.seed, mask=rolls.frame,
                           init=np.zeros((N_PITCHES, T)))
        stack[3] = np.clip(bend, -BEND_CLAMP, BEND_CLAMP) * rolls.frame
    # "midi": keep the bend plane encoded from the input file

    sampler = ConditionedSampler(model, stack, _performer_index(meta, args.performer),
                                 guidance_weight=args.guidance if args.guidance is not None
                                 else cfg.diffusion.guidance_synthesis)
    window = min(cfg.training.crop_synthesis, T)
    mel_norm = long_sample(sampler.window_fn, (cfg.audio.n_mels, T), window,
                           _sched(cfg, "synthesis"), seed=cfg.seed)
    mel = MelSpec(values=denormalize_mel(mel_norm, lo=meta["mel_lo"], hi=meta["mel_hi"]),
                  grid=rolls.grid)
    clip = griffin_lim(mel, cfg.audio, seed=cfg.seed)
    write_wav(args.out, clip)
    print(json.dumps({"out": str(args.out), "frames": T,
                      "samples": len(clip.samples), "bend_from": args.bend_from}))
    return 0


# -- evaluate ---------------------------------------------------------------

def _predict_labels(doc: dict, root: Path, gen_dir: Path, cfg: PipelineConfig):
    """Per-note predicted labels for one generated item, both paths.

    Returns {"audio": [...], "bend": [...] | None}; entries are
    VibratoLabel | None (None = excluded). The bend path needs a
    {stem}.bend.vdt tensor next to the generated WAV.
    """
    vib = cfg.vibrato
    stem = item_stem(doc["piece_id"], doc["performer_id"])
    wav = gen_dir / f"{stem}.wav"
    if not wav.exists():
        return None
    clip = read_wav(wav)
    track = extract_f0(clip, vib, hop=cfg.audio.hop_length)
    fl = track.grid.frame_s
    audio_labels = []
    for note in doc["labels"]:
        if note["polyphonic"]:
            audio_labels.append(None)  # tracker is monophonic
            continue
        seg = note_contour_from_track(track, note["onset_s"], note["offset_s"])
        audio_labels.append(vibrato_value(seg, fl, vib))

    bend_labels = None
    bend_path = gen_dir / f"{stem}{BEND_TENSOR_SUFFIX}"
    if bend_path.exists():
        bend = read_tensor(bend_path).astype(np.float64)
        grid = FrameGrid(sample_rate=cfg.audio.sample_rate,
                         hop=cfg.audio.hop_length, n_frames=bend.shape[1])
        bend_labels = []
        for note in doc["labels"]:
            seg = note_contour_from_bend(bend, note["pitch"], note["onset_s"],
                                         note["offset_s"], grid,
                                         cfg.rolls.bend_range_semitones)
            bend_labels.append(vibrato_value(seg, grid.frame_s, vib))
    return {"audio": audio_labels, "bend": bend_labels}


def _vibrato_metrics(manifest: dict, predictions: dict, path_name: str):
    """Macro F1 + Perf-MAE for one measurement path; exclusions symmetric."""
    pairs = []
    # (piece, score_index) -> {performer: (gt, pred)} for the MAE table
    table: dict[tuple, dict] = {}
    for doc in manifest["items"]:
        pred = predictions.get(item_stem(doc["piece_id"], doc["performer_id"]))
        labels = pred[path_name] if pred else None
        if labels is None:
            continue
        for note, lab in zip(doc["labels"], labels):
            if lab is None:
                continue
            pairs.append((doc["piece_id"], bool(note["present"]), lab.present))
            key = (doc["piece_id"], note["score_index"])
            table.setdefault(key, {})[doc["performer_id"]] = (bool(note["present"]),
                                                              lab.present)
    if not pairs:
        return None
    f1 = vibrato_f1(pairs)
    performers = sorted({pid for cell in table.values() for pid in cell})
    rows = [key for key, cell in sorted(table.items())
            if set(cell) == set(performers)]  # notes judged for every performer
    mae = None
    if len(performers) >= 2 and rows:
        gt = np.array([[table[k][p][0] for p in performers] for k in rows], float)
        pr = np.array([[table[k][p][1] for p in performers] for k in rows], float)
        mae = perf_mae(gt, pr)
    return {"f1": f1, "perf_mae": mae, "n_notes": len(pairs),
            "n_shared_notes": len(rows)}


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    manifest = read_manifest(args.corpus)
    corpus_dir, gen_dir = Path(args.corpus), Path(args.generated)

    ref_emb, gen_emb, predictions = [], [], {}
    for doc in manifest["items"]:
        stem = item_stem(doc["piece_id"], doc["performer_id"])
        ref_clip = read_wav(corpus_dir / doc["wav"])
        ref_emb.append(TaggedEmbedding(doc["piece_id"], doc["performer_id"],
                                       embed_clip(ref_clip, cfg.audio)))
        pred = _predict_labels(doc, corpus_dir, gen_dir, cfg)
        if pred is None:
            continue
        predictions[stem] = pred
        gen_clip = read_wav(gen_dir / f"{stem}.wav")
        gen_emb.append(TaggedEmbedding(doc["piece_id"], doc["performer_id"],
                                       embed_clip(gen_clip, cfg.audio)))
    if not gen_emb:
        raise ValueError(f"no generated clips in {gen_dir} match the corpus")

    report = {
        "n_reference": len(ref_emb),
        "n_generated": len(gen_emb),
        "fad": fad_suite(ref_emb, gen_emb).to_dict(),
        "vibrato": {},
    }
    for path_name in ("audio", "bend"):
        metrics = _vibrato_metrics(manifest, predictions, path_name)
        if metrics is not None:
            report["vibrato"][path_name] = metrics

    out = Path(args.out)
    out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if args.csv:
        _write_label_csv(args.csv, manifest, predictions)
    print(json.dumps({"out": str(out), "n_generated": len(gen_emb)}))
    return 0


def _write_label_csv(path, manifest: dict, predictions: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["piece_id", "performer_id", "score_index", "pitch",
                    "onset_s", "offset_s", "gt_present", "gt_rate_hz",
                    "gt_extent_cents", "path", "pred_present", "pred_rate_hz",
                    "pred_extent_cents", "excluded"])
        for doc in manifest["items"]:
            stem = item_stem(doc["piece_id"], doc["performer_id"])
            pred = predictions.get(stem)
            if pred is None:
                continue
            for path_name in ("audio", "bend"):
                labels = pred[path_name]
                if labels is None:
                    continue
                for note, lab in zip(doc["labels"], labels):
                    w.writerow([doc["piece_id"], doc["performer_id"],
                                note["score_index"], note["pitch"],
                                note["onset_s"], note["offset_s"],
                                note["present"], note["rate_hz"],
                                note["extent_cents"], path_name,
                                "" if lab is None else lab.present,
                                "" if lab is None else lab.rate_hz,
                                "" if lab is None else lab.extent_cents,
                                lab is None])


# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config path "
                   "(default: $VIOLINDIFF_CONFIG, then built-in defaults)")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="violindiff",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--pieces", type=int, default=None)
    p.add_argument("--performers", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("encode", help="SMF -> (4, P, T) roll tensor")
    p.add_argument("--midi", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", required=True, choices=("synthesis", "bend"))
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None, help="override train_steps")
    p.add_argument("--no-bend", action="store_true",
                   help="train the baseline without the bend roll")
    p.add_argument("--log", default=None, help="JSONL training log path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate-bend", help="sample a bend roll from MIDI")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--midi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--performer", required=True)
    p.add_argument("--guidance", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_estimate_bend)

    p = sub.add_parser("synthesize", help="MIDI -> mel -> WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--midi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--performer", required=True)
    p.add_argument("--bend-from", choices=("midi", "file", "stage1"), default="midi")
    p.add_argument("--bend-file", default=None)
    p.add_argument("--stage1-ckpt", default=None)
    p.add_argument("--no-bend", action="store_true")
    p.add_argument("--guidance", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score generated audio against a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="optional per-note label CSV")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _emit_error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
