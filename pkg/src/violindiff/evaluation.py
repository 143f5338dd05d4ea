"""Evaluation: F0 tracking, vibrato detection, F1/MAE metrics, and Fréchet
audio distances over a mel-statistics embedding.

The vibrato decision follows a DFT rule: a note is labeled as having vibrato
when the spectral peak of its cents contour inside the 3-9 Hz band is the
global maximum over 1-15 Hz and the implied half-extent is at least
theta (10 cents by default). Rates come from parabolic interpolation of the
zero-padded DFT peak; extents from a least-squares sinusoid fit at that
rate.

F0 for generated output can come from audio (autocorrelation tracker) or
directly from a bend roll via the decode formula; both paths produce the
same kind of per-note contour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import AudioConfig, VibratoConfig
from .dsp import AudioClip, mel_spectrogram
from .roll_codec import FrameGrid, PITCH_MIN


@dataclass
class F0Track:
    f0_hz: np.ndarray  # per frame, 0 = unvoiced
    grid: FrameGrid


@dataclass
class VibratoLabel:
    present: bool
    rate_hz: float
    extent_cents: float  # peak-to-peak


# ---------------------------------------------------------------------------
# F0 tracking (autocorrelation, YIN-style)

def extract_f0(clip: AudioClip, cfg: VibratoConfig = VibratoConfig(),
               hop: int = 320) -> F0Track:
    """Monophonic F0 per frame; frames centered at (k + 1/2) * hop.

    Cumulative-mean-normalized difference function with absolute threshold
    and parabolic refinement. Frames without a dip below the threshold, or
    with F0 outside the tracker range, are unvoiced (0).
    """
    sr = clip.sample_rate
    x = np.asarray(clip.samples, dtype=np.float64)
    T = max(1, -(-len(x) // hop))
    W = 512
    tau_min = max(2, int(sr / cfg.f0_max_hz))
    tau_max = int(math.ceil(sr / cfg.f0_min_hz)) + 2
    need = W + tau_max
    xe = np.pad(x, (need, need))
    f0 = np.zeros(T)
    taus = np.arange(tau_max + 1)
    for k in range(T):
        center = int((k + 0.5) * hop) + need
        seg = xe[center - need // 2: center - need // 2 + need]
        windows = np.lib.stride_tricks.sliding_window_view(seg, W)[:tau_max + 1]
        d = ((windows - windows[0]) ** 2).sum(axis=1)
        cum = np.cumsum(d[1:])
        with np.errstate(divide="ignore", invalid="ignore"):
            nd = np.ones(tau_max + 1)
            nd[1:] = np.where(cum > 0, d[1:] * taus[1:] / cum, 1.0)
        segment = nd[tau_min:tau_max]
        if segment.min() >= cfg.yin_threshold:
            continue
        below = np.flatnonzero(segment < cfg.yin_threshold)
        tau = tau_min + below[0]
        while tau + 1 < tau_max and nd[tau + 1] < nd[tau]:
            tau += 1
        if 0 < tau < tau_max:
            y1, y2, y3 = nd[tau - 1], nd[tau], nd[tau + 1]
            denom = y1 - 2.0 * y2 + y3
            shift = 0.5 * (y1 - y3) / denom if abs(denom) > 1e-12 else 0.0
            tau_ref = tau + float(np.clip(shift, -1.0, 1.0))
        else:
            tau_ref = float(tau)
        hz = sr / tau_ref
        if cfg.f0_min_hz <= hz <= cfg.f0_max_hz:
            f0[k] = hz
    grid = FrameGrid(sample_rate=sr, hop=hop, n_frames=T)
    return F0Track(f0_hz=f0, grid=grid)


# ---------------------------------------------------------------------------
# vibrato

def vibrato_value(f0_hz: np.ndarray, frame_s: float,
                  cfg: VibratoConfig = VibratoConfig()) -> VibratoLabel | None:
    """Vibrato decision for one note's F0 contour; None when the note is
    too short or too unvoiced to judge (excluded, not absent)."""
    f0 = np.asarray(f0_hz, dtype=np.float64)
    n = len(f0)
    if n * frame_s < cfg.min_note_s:
        return None
    voiced = f0 > 0
    if voiced.mean() < cfg.min_voiced_fraction:
        return None
    med = float(np.median(f0[voiced]))
    cents = np.zeros(n)
    cents[voiced] = 1200.0 * np.log2(f0[voiced] / med)
    if not voiced.all():
        idx = np.flatnonzero(voiced)
        cents = np.interp(np.arange(n), idx, cents[idx])
    cents = cents - cents.mean()

    K = max(1024, 1 << int(math.ceil(math.log2(8 * n))))
    spec = np.abs(np.fft.rfft(cents, K))
    freqs = np.fft.rfftfreq(K, frame_s)
    search = (freqs >= cfg.search_low_hz) & (freqs <= cfg.search_high_hz)
    band = (freqs >= cfg.band_low_hz) & (freqs <= cfg.band_high_hz)
    if not search.any() or spec[search].max() <= 0.0:
        return VibratoLabel(present=False, rate_hz=0.0, extent_cents=0.0)
    i_glob = int(np.flatnonzero(search)[np.argmax(spec[search])])
    if 0 < i_glob < len(spec) - 1:
        y1, y2, y3 = spec[i_glob - 1], spec[i_glob], spec[i_glob + 1]
        denom = y1 - 2.0 * y2 + y3
        shift = 0.5 * (y1 - y3) / denom if abs(denom) > 1e-12 else 0.0
        rate = freqs[i_glob] + float(np.clip(shift, -1.0, 1.0)) * (freqs[1] - freqs[0])
    else:
        rate = float(freqs[i_glob])

    t = np.arange(n) * frame_s
    design = np.stack([np.sin(2.0 * math.pi * rate * t),
                       np.cos(2.0 * math.pi * rate * t)], axis=1)
    coef, *_ = np.linalg.lstsq(design, cents, rcond=None)
    amp = float(np.hypot(coef[0], coef[1]))

    present = bool(band[i_glob]) and amp >= cfg.theta_cents
    return VibratoLabel(present=present, rate_hz=rate, extent_cents=2.0 * amp)


def f0_from_bend_row(bend_row: np.ndarray, pitch: int,
                     bend_range_semitones: float = 2.0) -> np.ndarray:
    """Bend values of one pitch row -> F0 in Hz (the decode formula)."""
    semis = pitch + np.asarray(bend_row) * bend_range_semitones - 69.0
    return 440.0 * 2.0 ** (semis / 12.0)


def binary_f1(gt: list[bool], pred: list[bool]) -> float:
    tp = sum(1 for g, p in zip(gt, pred) if g and p)
    fp = sum(1 for g, p in zip(gt, pred) if not g and p)
    fn = sum(1 for g, p in zip(gt, pred) if g and not p)
    if tp == fp == fn == 0:
        return 1.0  # no positives anywhere: vacuously perfect
    return 2.0 * tp / (2.0 * tp + fp + fn)


def vibrato_f1(pairs: list[tuple[str, bool, bool]]) -> float:
    """Macro F1 over pieces; pairs are (piece_id, gt_present, pred_present)."""
    if not pairs:
        raise ValueError("no notes to score")
    by_piece: dict[str, tuple[list, list]] = {}
    for piece, gt, pred in pairs:
        gts, preds = by_piece.setdefault(piece, ([], []))
        gts.append(bool(gt))
        preds.append(bool(pred))
    return float(np.mean([binary_f1(g, p) for g, p in by_piece.values()]))


def perf_mae(gt: np.ndarray, pred: np.ndarray) -> float:
    """MAE of per-note vibrato ratios; rows = shared notes, cols = performers."""
    gt = np.asarray(gt, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if gt.shape != pred.shape:
        raise ValueError("ground truth and prediction shapes differ")
    if gt.ndim != 2 or gt.shape[1] < 2:
        raise ValueError("need at least 2 performers")
    if gt.shape[0] == 0:
        raise ValueError("no shared notes")
    return float(np.abs(gt.mean(axis=1) - pred.mean(axis=1)).mean())


# ---------------------------------------------------------------------------
# embeddings and Fréchet distance

def embed_clip(clip: AudioClip, audio_cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Per-mel-band mean, std, and mean |delta| => d = 3 * n_mels vector."""
    mel = mel_spectrogram(clip, audio_cfg).values
    if mel.shape[1] < 3:
        raise ValueError("clip too short to embed (need >= 3 frames)")
    mean = mel.mean(axis=1)
    std = mel.std(axis=1)
    delta = np.abs(np.diff(mel, axis=1)).mean(axis=1)
    return np.concatenate([mean, std, delta])


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(embeddings: np.ndarray) -> GaussianStats:
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need a nonempty (N, d) embedding matrix")
    mean = X.mean(axis=0)
    if len(X) < 2:
        cov = np.zeros((X.shape[1], X.shape[1]))
    else:
        cov = np.cov(X, rowvar=False)
    return GaussianStats(mean=mean, cov=cov)


def _sqrt_psd(matrix: np.ndarray, floor: float = -1e-6) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < floor:
        raise ValueError(f"matrix has eigenvalue {vals.min():.3e} below the PSD floor")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T

def frechet_distance(g1: GaussianStats, g2: GaussianStats, reg: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The matrix square root uses the symmetric form S1^(1/2) S2 S1^(1/2), so
    only eigendecompositions of symmetric matrices are involved. Covariances
    are regularized by +reg*I.
    """
    if g1.mean.shape != g2.mean.shape:
        raise ValueError("dimension mismatch between the two Gaussians")
    for g in (g1, g2):
        if not np.allclose(g.cov, g.cov.T, atol=1e-8):
            raise ValueError("covariance matrix is not symmetric")
    d = len(g1.mean)
    s1 = g1.cov + reg * np.eye(d)
    s2 = g2.cov + reg * np.eye(d)
    root1 = _sqrt_psd(s1)
    cross = _sqrt_psd(root1 @ s2 @ root1)
    diff = g1.mean - g2.mean
    val = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


@dataclass
class TaggedEmbedding:
    piece_id: str
    performer_id: str
    vec: np.ndarray


@dataclass
class FadReport:
    all_fad: float
    performer_fad: dict[str, float]
    piece_fad: dict[str, float]
    low_sample: list[str] = field(default_factory=list)

    @property
    def performer_fad_mean(self) -> float:
        return float(np.mean(list(self.performer_fad.values())))

    @property
    def piece_fad_mean(self) -> float:
        return float(np.mean(list(self.piece_fad.values())))

    def to_dict(self) -> dict:
        return {
            "all_fad": self.all_fad,
            "performer_fad_mean": self.performer_fad_mean,
            "piece_fad_mean": self.piece_fad_mean,
            "performer_fad": self.performer_fad,
            "piece_fad": self.piece_fad,
            "low_sample": self.low_sample,
        }


def fad_suite(reference: list[TaggedEmbedding],
              generated: list[TaggedEmbedding]) -> FadReport:
    """All/per-performer/per-piece Fréchet distances.

    Performer groups compare a performer's full reference set against their
    generated set; piece groups likewise per piece. Groups smaller than d/2
    clips are still computed (regularization keeps them finite) but listed
    as low-sample.
    """
    if not reference or not generated:
        raise ValueError("need nonempty reference and generated sets")
    d = len(reference[0].vec)
    low: list[str] = []

    def dist(ref_group, gen_group, tag) -> float:
        if min(len(ref_group), len(gen_group)) < d / 2:
            low.append(tag)
        return frechet_distance(
            fit_gaussian(np.stack([e.vec for e in ref_group])),
            fit_gaussian(np.stack([e.vec for e in gen_group])))

    report_all = dist(reference, generated, "all")
    performer_fad = {}
    for pid in sorted({e.performer_id for e in generated}):
        ref_g = [e for e in reference if e.performer_id == pid]
        gen_g = [e for e in generated if e.performer_id == pid]
        if not ref_g:
            raise ValueError(f"no reference clips for performer {pid!r}")
        performer_fad[pid] = dist(ref_g, gen_g, f"performer:{pid}")
    piece_fad = {}
    for pc in sorted({e.piece_id for e in generated}):
        ref_g = [e for e in reference if e.piece_id == pc]
        gen_g = [e for e in generated if e.piece_id == pc]
        if not ref_g:
            raise ValueError(f"no reference clips for piece {pc!r}")
        piece_fad[pc] = dist(ref_g, gen_g, f"piece:{pc}")
    return FadReport(all_fad=report_all, performer_fad=performer_fad,
                     piece_fad=piece_fad, low_sample=low)


# ---------------------------------------------------------------------------
# per-note contour helpers shared by the two measurement paths

def note_frame_range(onset_s: float, offset_s: float, grid: FrameGrid) -> tuple[int, int]:
    """[lo, hi) frame range of a note, clipped to the grid (encode arithmetic)."""
    lo = max(grid.frame_floor(onset_s), 0)
    hi = max(grid.frame_ceil(offset_s), lo + 1)
    return lo, min(hi, grid.n_frames)


def note_contour_from_bend(bend: np.ndarray, pitch: int, onset_s: float,
                           offset_s: float, grid: FrameGrid,
                           bend_range_semitones: float = 2.0) -> np.ndarray:
    """F0 segment for one note read out of a (P, T) bend roll."""
    lo, hi = note_frame_range(onset_s, offset_s, grid)
    row = bend[pitch - PITCH_MIN, lo:hi]
    return f0_from_bend_row(row, pitch, bend_range_semitones)


def note_contour_from_track(track: F0Track, onset_s: float, offset_s: float) -> np.ndarray:
    """F0 segment of the frames whose centers fall inside the note span."""
    fl = track.grid.frame_s
    k = np.arange(track.grid.n_frames)
    centers = (k + 0.5) * fl
    sel = (centers >= onset_s) & (centers < offset_s)
    return track.f0_hz[sel]
