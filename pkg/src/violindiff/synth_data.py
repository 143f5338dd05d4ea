"""Synthetic violin-like corpus with exact per-note ground truth.

Each piece is a random mostly-monophonic line (occasional double stops)
shared by all performers with identical note timings, so notes align across
performers by score index. Performers differ in vibrato propensity, rate,
extent, portamento, tuning, timbre rolloff, and noise floor.

Everything is placed on a 5 ms grid and bend values are quantized to the
14-bit MIDI scale up front, so the in-memory performance, the written SMF,
and the rendered audio all describe exactly the same contour: audio is
additive synthesis driven by the same step function the bend events encode.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import CorpusConfig
from .dsp import AudioClip, write_wav
from .midi_io import BendEvent, NoteEvent, Performance, write_smf
from .roll_codec import PITCH_MAX, PITCH_MIN

# 5 ms = 4 ticks at 480*1e6/500000... with tpq 400 and 120 bpm one tick is
# 1.25 ms, so grid times survive an SMF round trip exactly.
GRID_TPQ = 400

BEND_RANGE_CENTS = 200.0  # +-2 semitones over the full (-1, 1) bend range
AMP_RAMP_S = 0.010


@dataclass(frozen=True)
class PerformerProfile:
    performer_id: str
    vibrato_prob: float
    rate_mean_hz: float
    rate_std_hz: float
    extent_mean_cents: float   # peak-to-peak
    extent_std_cents: float
    portamento_prob: float
    tuning_offset_cents: float
    harmonic_rolloff: float
    room_noise_db: float


@dataclass
class NoteLabel:
    score_index: int
    pitch: int
    onset_s: float
    offset_s: float
    present: bool
    rate_hz: float       # 0 when absent
    extent_cents: float  # peak-to-peak, 0 when absent
    phase: float
    polyphonic: bool


@dataclass
class CorpusItem:
    piece_id: str
    performer_id: str
    performance: Performance
    clip: AudioClip
    labels: list[NoteLabel]


@dataclass
class Corpus:
    items: list[CorpusItem]
    performers: list[PerformerProfile]
    piece_ids: list[str]
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def performer_index(self, performer_id: str) -> int:
        return [p.performer_id for p in self.performers].index(performer_id)


@dataclass(frozen=True)
class _ScoreNote:
    score_index: int
    pitch: int
    onset_s: float
    offset_s: float
    polyphonic: bool


def _snap(t: float, step_s: float) -> float:
    return round(t / step_s) * step_s


def _truncated_normal(rng, mean, std, lo, hi) -> float:
    for _ in range(64):
        v = rng.normal(mean, std)
        if lo <= v <= hi:
            return v
    return min(max(mean, lo), hi)


def make_profiles(n_performers: int, rng: np.random.Generator) -> list[PerformerProfile]:
    """Alternating high/low vibrato usage gives the performer embedding a
    strong, learnable signal."""
    profiles = []
    for i in range(n_performers):
        high = i % 2 == 0
        prob = (0.92 if high else 0.08) + rng.uniform(-0.02, 0.02)
        profiles.append(PerformerProfile(
            performer_id=f"perf{i}",
            vibrato_prob=min(max(prob, 0.0), 1.0),
            rate_mean_hz=rng.uniform(5.0, 6.5),
            rate_std_hz=0.25,
            extent_mean_cents=rng.uniform(48.0, 64.0),
            extent_std_cents=6.0,
            portamento_prob=0.1,
            tuning_offset_cents=rng.uniform(-4.0, 4.0),
            harmonic_rolloff=rng.uniform(1.1, 1.9),
            room_noise_db=rng.uniform(-58.0, -48.0),
        ))
    return profiles


def make_score(cfg: CorpusConfig, rng: np.random.Generator) -> list[_ScoreNote]:
    """Random walk line on the 5 ms grid; double stops share exact timing."""
    step = cfg.bend_sample_ms / 1000.0
    notes: list[_ScoreNote] = []
    t = 0.0
    pitch = int(rng.integers(62, 86))
    index = 0
    while t < cfg.piece_len_s:
        dur = _snap(rng.uniform(cfg.note_min_s, cfg.note_max_s), step)
        pitch = int(np.clip(pitch + rng.integers(-5, 6), PITCH_MIN, 96))
        double = rng.random() < cfg.double_stop_prob
        notes.append(_ScoreNote(index, pitch, t, t + dur, double))
        index += 1
        if double:
            other = int(np.clip(pitch + int(rng.choice([3, 4, 5, 7, 8, 9, 12])),
                                PITCH_MIN, PITCH_MAX))
            if other != pitch:
                notes.append(_ScoreNote(index, other, t, t + dur, True))
                index += 1
        t += dur
        if rng.random() < cfg.rest_prob:
            t += _snap(rng.uniform(0.05, 0.3), step)
        t = _snap(t, step)
    return notes


def _quantize_bend(v: float) -> float:
    raw = max(0, min(16383, round(8192 + v * 8192)))
    return (raw - 8192) / 8192.0


def realize(score: list[_ScoreNote], profile: PerformerProfile,
            cfg: CorpusConfig, rng: np.random.Generator):
    """Attach bend curves and labels to a score for one performer."""
    step = cfg.bend_sample_ms / 1000.0
    notes: list[NoteEvent] = []
    labels: list[NoteLabel] = []
    prev_pitch: int | None = None
    for sn in score:
        dur = sn.offset_s - sn.onset_s
        present = rng.random() < profile.vibrato_prob
        rate = extent = phase = 0.0
        if present:
            rate = _truncated_normal(rng, profile.rate_mean_hz, profile.rate_std_hz,
                                     3.2, 8.8)
            extent = _truncated_normal(rng, profile.extent_mean_cents,
                                       profile.extent_std_cents, 30.0, 90.0)
            phase = rng.uniform(0.0, 2.0 * math.pi)
        slide_cents = 0.0
        # portamento only on long vibrato-free notes so the label closure
        # with the detector's global-max rule holds
        if (not present and not sn.polyphonic and dur >= 0.6
                and prev_pitch is not None and rng.random() < profile.portamento_prob):
            slide_cents = float(np.clip((prev_pitch - sn.pitch) * 100.0, -80.0, 80.0))
        slide_s = 0.08

        n_seg = max(1, round(dur / step))
        bends = []
        for k in range(n_seg):
            t_rel = k * step
            cents = 0.0
            if present:
                cents += 0.5 * extent * math.sin(2.0 * math.pi * rate * t_rel + phase)
            if slide_cents and t_rel < slide_s:
                cents += slide_cents * (1.0 - t_rel / slide_s)
            v = _quantize_bend(max(-0.99, min(0.99, cents / BEND_RANGE_CENTS)))
            bends.append(BendEvent(time_s=sn.onset_s + t_rel, value=v))
        notes.append(NoteEvent(pitch=sn.pitch, onset_s=sn.onset_s, offset_s=sn.offset_s,
                               velocity=80, channel=0, bends=bends))
        labels.append(NoteLabel(score_index=sn.score_index, pitch=sn.pitch,
                                onset_s=sn.onset_s, offset_s=sn.offset_s,
                                present=present, rate_hz=rate if present else 0.0,
                                extent_cents=extent if present else 0.0,
                                phase=phase, polyphonic=sn.polyphonic))
        prev_pitch = sn.pitch
    perf = Performance(notes=notes, performer_id=profile.performer_id,
                       ticks_per_quarter=GRID_TPQ)
    return perf, labels


def render_audio(p: Performance, profile: PerformerProfile, cfg: CorpusConfig,
                 rng: np.random.Generator, sample_rate: int = 16000) -> AudioClip:
    """Additive synthesis of the performance's exact bend step contours.

    Harmonics h = 1..n with amplitude h^-rolloff (only those below Nyquist),
    10 ms onset/offset ramps, a noise floor, peak normalization to 0.9.
    """
    total_s = p.duration_s + cfg.release_tail_s
    n = max(1, round(total_s * sample_rate))
    buf = np.zeros(n)
    nyquist = sample_rate / 2.0
    tune = 2.0 ** (profile.tuning_offset_cents / 1200.0)
    for note in p.notes:
        a = round(note.onset_s * sample_rate)
        b = min(round(note.offset_s * sample_rate), n)
        if b <= a:
            continue
        length = b - a
        # sample-and-hold of the bend step function
        times = note.onset_s + np.arange(length) / sample_rate
        bend = np.zeros(length)
        ev_times = np.array([e.time_s for e in note.bends])
        ev_vals = np.array([e.value for e in note.bends])
        if len(ev_times):
            idx = np.searchsorted(ev_times, times, side="right") - 1
            bend = np.where(idx >= 0, ev_vals[np.clip(idx, 0, None)], 0.0)
        base = 440.0 * 2.0 ** ((note.pitch - 69) / 12.0)
        f0 = base * tune * 2.0 ** (bend * BEND_RANGE_CENTS / 1200.0)
        phase = 2.0 * math.pi * np.cumsum(f0) / sample_rate
        sig = np.zeros(length)
        f0_max = f0.max()
        for h in range(1, cfg.n_harmonics + 1):
            if h * f0_max >= 0.98 * nyquist:
                break
            sig += h ** (-profile.harmonic_rolloff) * np.sin(h * phase)
        ramp = min(int(AMP_RAMP_S * sample_rate), length // 2)
        env = np.ones(length)
        if ramp > 0:
            env[:ramp] = np.linspace(0.0, 1.0, ramp, endpoint=False)
            env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        buf[a:b] += sig * env
    peak = np.abs(buf).max()
    if peak > 0:
        buf *= 0.9 / peak
    buf += 10.0 ** (profile.room_noise_db / 20.0) * rng.standard_normal(n)
    return AudioClip(samples=np.clip(buf, -1.0, 1.0), sample_rate=sample_rate)


def gen_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic corpus: pieces shared across performers, labels exact."""
    rng = np.random.default_rng(cfg.seed)
    profiles = make_profiles(cfg.n_performers, rng)
    piece_ids = [f"piece{i:02d}" for i in range(cfg.n_pieces)]
    scores = [make_score(cfg, rng) for _ in piece_ids]
    items = []
    for piece_id, score in zip(piece_ids, scores):
        for profile in profiles:
            perf, labels = realize(score, profile, cfg, rng)
            perf.piece_id = piece_id
            clip = render_audio(perf, profile, cfg, rng)
            items.append(CorpusItem(piece_id=piece_id, performer_id=profile.performer_id,
                                    performance=perf, clip=clip, labels=labels))
    return Corpus(items=items, performers=profiles, piece_ids=piece_ids, config=cfg)


# ---------------------------------------------------------------------------
# on-disk layout

def item_stem(piece_id: str, performer_id: str) -> str:
    return f"{piece_id}__{performer_id}"


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """SMF + WAV per item plus manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": asdict(corpus.config),
        "performers": [asdict(p) for p in corpus.performers],
        "pieces": corpus.piece_ids,
        "items": [],
    }
    for item in corpus.items:
        stem = item_stem(item.piece_id, item.performer_id)
        (out / f"{stem}.mid").write_bytes(write_smf(item.performance))
        write_wav(out / f"{stem}.wav", item.clip)
        manifest["items"].append({
            "piece_id": item.piece_id,
            "performer_id": item.performer_id,
            "midi": f"{stem}.mid",
            "wav": f"{stem}.wav",
            "labels": [asdict(lb) for lb in item.labels],
        })
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / "manifest.json").read_text())
