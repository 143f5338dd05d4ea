"""CLI surface: subcommands, config resolution, error reporting, pipelines.

Commands run in-process through main(argv) so stdout/stderr JSON can be
captured cheaply; one subprocess test proves the module entry point works.
All knobs are shrunk (tiny model, 5-6 diffusion steps) to keep this fast.
"""

import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from violindiff.cli import BEND_TENSOR_SUFFIX, main
from violindiff.config import PipelineConfig
from violindiff.dsp import read_wav
from violindiff.midi_io import Performance, write_smf
from violindiff.roll_codec import BEND_CLAMP, N_PITCHES, encode_rolls, rolls_to_array
from violindiff.synth_data import item_stem, read_manifest
from violindiff.tensor_io import read_tensor, write_tensor
from violindiff.training import load_model


def tiny_config() -> PipelineConfig:
    cfg = PipelineConfig()
    return dataclasses.replace(
        cfg,
        audio=dataclasses.replace(cfg.audio, n_mels=16),
        model=dataclasses.replace(cfg.model, d_model=8, gru_hidden=4, gru_layers=1,
                                  tf_layers=1, tf_heads=2, tf_ffn=16,
                                  res_channels=6, res_layers=1),
        diffusion=dataclasses.replace(cfg.diffusion, synthesis_steps=6, bend_steps=5),
        training=dataclasses.replace(cfg.training, batch_size=2, train_steps=3,
                                     crop_synthesis=16, crop_bend=24, log_every=2,
                                     ckpt_every=1000),
        corpus=dataclasses.replace(cfg.corpus, n_pieces=1, n_performers=2,
                                   piece_len_s=1.2, note_min_s=0.4, note_max_s=0.6,
                                   rest_prob=0.0, double_stop_prob=0.1, seed=5),
    )


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a config file, generated corpus, and two checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    tiny_config().save(cfg_path)
    base = ["--config", str(cfg_path)]

    corpus = root / "corpus"
    assert main(["gen-data", "--out", str(corpus)] + base) == 0

    synth_ckpt = root / "synth.vdt"
    bend_ckpt = root / "bend.vdt"
    assert main(["train", "--stage", "synthesis", "--data", str(corpus),
                 "--out", str(synth_ckpt), "--steps", "3"] + base) == 0
    assert main(["train", "--stage", "bend", "--data", str(corpus),
                 "--out", str(bend_ckpt), "--steps", "3"] + base) == 0

    manifest = read_manifest(corpus)
    return {"root": root, "base": base, "cfg_path": cfg_path, "corpus": corpus,
            "synth_ckpt": synth_ckpt, "bend_ckpt": bend_ckpt,
            "manifest": manifest,
            "midi": corpus / manifest["items"][0]["midi"]}


def run(capsys, argv) -> dict:
    rc = main(argv)
    out = capsys.readouterr().out.strip().splitlines()
    assert rc == 0, f"command failed: {argv}"
    return json.loads(out[-1])


def run_err(capsys, argv) -> dict:
    rc = main(argv)
    captured = capsys.readouterr()
    assert rc == 1
    doc = json.loads(captured.err.strip().splitlines()[-1])
    assert set(doc) == {"error", "message"}
    return doc


# ---------------------------------------------------------------------------
# gen-data / encode


def test_gen_data_output_and_layout(ws, capsys):
    out = run(capsys, ["gen-data", "--out", str(ws["root"] / "corpus2")]
              + ws["base"])
    assert out["items"] == 2 and out["pieces"] == 1 and out["performers"] == 2
    manifest = read_manifest(ws["root"] / "corpus2")
    for doc in manifest["items"]:
        assert (ws["root"] / "corpus2" / doc["midi"]).exists()
        assert (ws["root"] / "corpus2" / doc["wav"]).exists()


def test_gen_data_deterministic_bytes(ws, capsys):
    a, b = ws["root"] / "det_a", ws["root"] / "det_b"
    run(capsys, ["gen-data", "--out", str(a)] + ws["base"])
    run(capsys, ["gen-data", "--out", str(b)] + ws["base"])
    for doc in read_manifest(a)["items"]:
        assert (a / doc["wav"]).read_bytes() == (b / doc["wav"]).read_bytes()
        assert (a / doc["midi"]).read_bytes() == (b / doc["midi"]).read_bytes()
    assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()


def test_gen_data_size_flags(ws, capsys):
    out = run(capsys, ["gen-data", "--out", str(ws["root"] / "corpus3"),
                       "--pieces", "2", "--performers", "3"] + ws["base"])
    assert out["items"] == 6 and out["pieces"] == 2 and out["performers"] == 3


def test_encode_roll_tensor(ws, capsys):
    out_path = ws["root"] / "rolls.vdt"
    out = run(capsys, ["encode", "--midi", str(ws["midi"]),
                       "--out", str(out_path)] + ws["base"])
    arr = read_tensor(out_path)
    assert arr.shape == (4, N_PITCHES, out["frames"])
    assert out["notes"] == len(ws["manifest"]["items"][0]["labels"])
    assert isinstance(out["warnings"], list)


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_meta(ws):
    model, meta = load_model(ws["synth_ckpt"])
    assert model.stage == "synthesis"
    assert meta["performers"] == ["perf0", "perf1"]
    assert meta["mel_lo"] < meta["mel_hi"]
    bend_model, bend_meta = load_model(ws["bend_ckpt"])
    assert bend_model.stage == "bend"
    assert "mel_lo" not in bend_meta


def test_train_reports_losses(ws, capsys):
    out = run(capsys, ["train", "--stage", "bend", "--data", str(ws["corpus"]),
                       "--out", str(ws["root"] / "bend2.vdt"), "--steps", "2"]
              + ws["base"])
    assert out["steps"] == 2
    assert np.isfinite(out["first_loss"]) and np.isfinite(out["last_loss"])


def test_train_no_bend_requires_synthesis(ws, capsys):
    doc = run_err(capsys, ["train", "--stage", "bend", "--data", str(ws["corpus"]),
                           "--out", str(ws["root"] / "x.vdt"), "--no-bend"]
                  + ws["base"])
    assert "no-bend" in doc["message"]


# ---------------------------------------------------------------------------
# estimate-bend


def test_estimate_bend_masked_output(ws, capsys):
    out_path = ws["root"] / "est.bend.vdt"
    out = run(capsys, ["estimate-bend", "--ckpt", str(ws["bend_ckpt"]),
                       "--midi", str(ws["midi"]), "--out", str(out_path),
                       "--performer", "perf0"] + ws["base"])
    bend = read_tensor(out_path)
    assert bend.dtype == np.float32
    assert bend.shape == (N_PITCHES, out["frames"])
    cfg = tiny_config()
    from violindiff.midi_io import parse_smf
    from violindiff.roll_codec import FrameGrid
    perf = parse_smf(ws["midi"].read_bytes())
    grid = FrameGrid(sample_rate=16000, hop=cfg.audio.hop_length,
                     n_frames=out["frames"])
    rolls = encode_rolls(perf, grid)
    assert out["active_frames"] == int(rolls.frame.sum())
    assert (bend[rolls.frame == 0] == 0).all()  # exactly zero off support
    assert np.abs(bend).max() <= BEND_CLAMP


def test_estimate_bend_empty_midi_is_all_zero(ws, capsys, tmp_path):
    empty = tmp_path / "empty.mid"
    empty.write_bytes(write_smf(Performance(notes=[])))
    out_path = tmp_path / "empty.bend.vdt"
    out = run(capsys, ["estimate-bend", "--ckpt", str(ws["bend_ckpt"]),
                       "--midi", str(empty), "--out", str(out_path),
                       "--performer", "perf0"] + ws["base"])
    assert out["active_frames"] == 0
    assert (read_tensor(out_path) == 0).all()


def test_estimate_bend_unknown_performer(ws, capsys):
    doc = run_err(capsys, ["estimate-bend", "--ckpt", str(ws["bend_ckpt"]),
                           "--midi", str(ws["midi"]),
                           "--out", str(ws["root"] / "x.vdt"),
                           "--performer", "nobody"] + ws["base"])
    assert "nobody" in doc["message"] and "perf0" in doc["message"]


def test_estimate_bend_rejects_synthesis_checkpoint(ws, capsys):
    doc = run_err(capsys, ["estimate-bend", "--ckpt", str(ws["synth_ckpt"]),
                           "--midi", str(ws["midi"]),
                           "--out", str(ws["root"] / "x.vdt"),
                           "--performer", "perf0"] + ws["base"])
    assert "bend" in doc["message"]


# ---------------------------------------------------------------------------
# synthesize


def test_synthesize_writes_wav(ws, capsys):
    out_path = ws["root"] / "gen.wav"
    out = run(capsys, ["synthesize", "--ckpt", str(ws["synth_ckpt"]),
                       "--midi", str(ws["midi"]), "--out", str(out_path),
                       "--performer", "perf0"] + ws["base"])
    clip = read_wav(out_path)
    assert clip.sample_rate == 16000
    assert len(clip.samples) == out["samples"]
    # length tracks the frame grid to within one hop
    assert abs(len(clip.samples) - out["frames"] * 320) <= 320
    assert out["bend_from"] == "midi"


def test_synthesize_deterministic_per_seed(ws, capsys):
    args = ["synthesize", "--ckpt", str(ws["synth_ckpt"]), "--midi", str(ws["midi"]),
            "--performer", "perf0"] + ws["base"]
    a, b, c = (ws["root"] / n for n in ("s_a.wav", "s_b.wav", "s_c.wav"))
    run(capsys, args + ["--out", str(a), "--seed", "3"])
    run(capsys, args + ["--out", str(b), "--seed", "3"])
    run(capsys, args + ["--out", str(c), "--seed", "4"])
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_synthesize_bend_from_file(ws, capsys):
    bend_path = ws["root"] / "est2.bend.vdt"
    run(capsys, ["estimate-bend", "--ckpt", str(ws["bend_ckpt"]),
                 "--midi", str(ws["midi"]), "--out", str(bend_path),
                 "--performer", "perf0"] + ws["base"])
    out = run(capsys, ["synthesize", "--ckpt", str(ws["synth_ckpt"]),
                       "--midi", str(ws["midi"]),
                       "--out", str(ws["root"] / "gen2.wav"),
                       "--performer", "perf0", "--bend-from", "file",
                       "--bend-file", str(bend_path)] + ws["base"])
    assert out["bend_from"] == "file"


def test_synthesize_bend_file_shape_mismatch(ws, capsys, tmp_path):
    bad = tmp_path / "bad.bend.vdt"
    write_tensor(bad, np.zeros((N_PITCHES, 3), dtype=np.float32))
    doc = run_err(capsys, ["synthesize", "--ckpt", str(ws["synth_ckpt"]),
                           "--midi", str(ws["midi"]),
                           "--out", str(tmp_path / "x.wav"),
                           "--performer", "perf0", "--bend-from", "file",
                           "--bend-file", str(bad)] + ws["base"])
    assert "shape" in doc["message"]


def test_synthesize_bend_from_file_requires_path(ws, capsys):
    doc = run_err(capsys, ["synthesize", "--ckpt", str(ws["synth_ckpt"]),
                           "--midi", str(ws["midi"]),
                           "--out", str(ws["root"] / "x.wav"),
                           "--performer", "perf0", "--bend-from", "file"]
                  + ws["base"])
    assert "bend-file" in doc["message"]


def test_synthesize_no_bend_flag_must_match_checkpoint(ws, capsys):
    doc = run_err(capsys, ["synthesize", "--ckpt", str(ws["synth_ckpt"]),
                           "--midi", str(ws["midi"]),
                           "--out", str(ws["root"] / "x.wav"),
                           "--performer", "perf0", "--no-bend"] + ws["base"])
    assert "no_bend" in doc["message"] or "no-bend" in doc["message"]


def test_synthesize_rejects_bend_checkpoint(ws, capsys):
    doc = run_err(capsys, ["synthesize", "--ckpt", str(ws["bend_ckpt"]),
                           "--midi", str(ws["midi"]),
                           "--out", str(ws["root"] / "x.wav"),
                           "--performer", "perf0"] + ws["base"])
    assert "synthesis" in doc["message"]


# ---------------------------------------------------------------------------
# evaluate


@pytest.fixture(scope="module")
def generated_dir(ws):
    """Generated set = reference audio plus ground-truth bend tensors, so the
    report exercises both measurement paths with known-good inputs."""
    gen = ws["root"] / "generated"
    gen.mkdir()
    cfg = tiny_config()
    from violindiff.midi_io import parse_smf
    from violindiff.roll_codec import FrameGrid
    for doc in ws["manifest"]["items"]:
        stem = item_stem(doc["piece_id"], doc["performer_id"])
        (gen / f"{stem}.wav").write_bytes((ws["corpus"] / doc["wav"]).read_bytes())
        perf = parse_smf((ws["corpus"] / doc["midi"]).read_bytes())
        n = round((perf.duration_s + cfg.corpus.release_tail_s) * 16000)
        grid = FrameGrid.for_duration(n / 16000, 16000, cfg.audio.hop_length)
        rolls = encode_rolls(perf, grid)
        write_tensor(gen / f"{stem}{BEND_TENSOR_SUFFIX}",
                     rolls_to_array(rolls)[3].astype(np.float32))
    return gen


def test_evaluate_full_report(ws, generated_dir, capsys):
    report_path = ws["root"] / "report.json"
    csv_path = ws["root"] / "labels.csv"
    out = run(capsys, ["evaluate", "--corpus", str(ws["corpus"]),
                       "--generated", str(generated_dir),
                       "--out", str(report_path), "--csv", str(csv_path)]
              + ws["base"])
    assert out["n_generated"] == 2
    report = json.loads(report_path.read_text())
    assert report["n_reference"] == 2 and report["n_generated"] == 2
    fad = report["fad"]
    for key in ("all_fad", "performer_fad", "piece_fad", "performer_fad_mean",
                "piece_fad_mean", "low_sample"):
        assert key in fad
    # generated == reference, so every FAD collapses to zero
    assert fad["all_fad"] == pytest.approx(0.0, abs=1e-9)
    assert set(fad["performer_fad"]) == {"perf0", "perf1"}
    for path_name in ("audio", "bend"):
        block = report["vibrato"][path_name]
        assert block["n_notes"] > 0
        assert 0.0 <= block["f1"] <= 1.0
        assert block["perf_mae"] is None or 0.0 <= block["perf_mae"] <= 1.0

    rows = csv_path.read_text().strip().splitlines()
    header = rows[0].split(",")
    assert header[:4] == ["piece_id", "performer_id", "score_index", "pitch"]
    assert {r.split(",")[9] for r in rows[1:]} == {"audio", "bend"}


def test_evaluate_ground_truth_bend_path_is_faithful(ws, generated_dir, capsys):
    """Encoded ground-truth bends decoded back through the metric pipeline
    should reproduce the generator's labels (the notes here are long enough
    for the DFT rule)."""
    report_path = ws["root"] / "report_gt.json"
    run(capsys, ["evaluate", "--corpus", str(ws["corpus"]),
                 "--generated", str(generated_dir), "--out", str(report_path)]
        + ws["base"])
    report = json.loads(report_path.read_text())
    assert report["vibrato"]["bend"]["f1"] == 1.0


def test_evaluate_empty_generated_dir(ws, capsys, tmp_path):
    doc = run_err(capsys, ["evaluate", "--corpus", str(ws["corpus"]),
                           "--generated", str(tmp_path),
                           "--out", str(tmp_path / "r.json")] + ws["base"])
    assert "no generated clips" in doc["message"]


# ---------------------------------------------------------------------------
# config resolution and process entry


def test_env_var_config_fallback(ws, capsys, monkeypatch, tmp_path):
    cfg = dataclasses.replace(tiny_config(),
                              corpus=dataclasses.replace(tiny_config().corpus,
                                                         n_pieces=2))
    env_path = tmp_path / "env_config.json"
    cfg.save(env_path)
    monkeypatch.setenv("VIOLINDIFF_CONFIG", str(env_path))
    out = run(capsys, ["gen-data", "--out", str(tmp_path / "c_env")])
    assert out["pieces"] == 2
    # explicit --config wins over the environment
    out = run(capsys, ["gen-data", "--out", str(tmp_path / "c_flag"),
                       "--config", str(ws["cfg_path"])])
    assert out["pieces"] == 1


def test_missing_config_file_reports_error(ws, capsys):
    run_err(capsys, ["gen-data", "--out", str(ws["root"] / "x"),
                     "--config", "/nonexistent/config.json"])


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "violindiff", "--help"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    for name in ("gen-data", "encode", "train", "estimate-bend", "synthesize",
                 "evaluate"):
        assert name in proc.stdout
