"""Audio I/O, log-mel spectrograms, and Griffin-Lim inversion.

The analysis chain is fixed at 16 kHz: FFT 1024, Hann window 640, hop 320,
128 slaney-normalized mel bands over 0-8000 Hz, compressed as log(x + 1e-5).
A mel spectrogram has T = ceil(n_samples / hop) frames so it lines up
one-to-one with the note rolls. Griffin-Lim with a non-negative least squares
mel inversion stands in for a neural vocoder.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from io import BytesIO

import numpy as np
from scipy.optimize import nnls

from .config import AudioConfig
from .roll_codec import FrameGrid


class WavFormatError(ValueError):
    """Input is not 16-bit PCM mono RIFF."""


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int = 16000

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpec:
    values: np.ndarray  # (F, T) log-mel
    grid: FrameGrid


# ---------------------------------------------------------------------------
# WAV

def _open_wave(path_or_file, mode: str):
    if hasattr(path_or_file, "read") or hasattr(path_or_file, "write"):
        return wave.open(path_or_file, mode)
    return wave.open(str(path_or_file), mode)


def read_wav(path) -> AudioClip:
    try:
        with _open_wave(path, "rb") as f:
            if f.getnchannels() != 1:
                raise WavFormatError(f"{f.getnchannels()} channels; only mono supported")
            if f.getsampwidth() != 2:
                raise WavFormatError(f"sample width {f.getsampwidth()}; only 16-bit supported")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        raise WavFormatError(str(e)) from e
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioClip(samples=np.clip(pcm / 32767.0, -1.0, 1.0), sample_rate=rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with _open_wave(path, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(clip.sample_rate)
        f.writeframes(pcm.tobytes())


def wav_bytes(clip: AudioClip) -> bytes:
    buf = BytesIO()
    write_wav(buf, clip)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# mel analysis

def hann_window(length: int) -> np.ndarray:
    # periodic Hann, the analysis convention
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def _hz_to_mel(f):
    # slaney scale: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    above = f >= min_log_hz
    mel = np.where(above, min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    hz = m * f_sp
    above = m >= min_log_mel
    return np.where(above, 1000.0 * np.exp(logstep * (np.maximum(m, min_log_mel) - min_log_mel)), hz)


def mel_filterbank(cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """(n_mels, 1 + n_fft/2) triangular filters, slaney area-normalized."""
    n_bins = 1 + cfg.n_fft // 2
    fft_hz = np.linspace(0.0, cfg.sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_hz - lo) / max(center - lo, 1e-12)
        down = (hi - fft_hz) / max(hi - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        fb[i] *= 2.0 / (hi - lo)  # area normalization
    return fb


def stft_complex(samples: np.ndarray, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Centered complex STFT, (1 + n_fft/2, T) with T = ceil(len/hop).

    The signal is reflection-padded by n_fft/2 so frame k is centered at
    sample k*hop; the Hann window sits centered inside the FFT buffer.
    """
    if len(samples) == 0:
        raise ValueError("empty audio")
    hop = cfg.hop_length
    x = _center_pad(np.asarray(samples, dtype=np.float64), cfg)
    T = -(-len(samples) // hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[::hop][:T]
    return np.fft.rfft(frames * _padded_window(cfg), axis=1).T


def stft_magnitude(samples: np.ndarray, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    return np.abs(stft_complex(samples, cfg))


def mel_spectrogram(clip: AudioClip, cfg: AudioConfig = AudioConfig()) -> MelSpec:
    """Log-mel spectrogram of a 16 kHz clip."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {clip.sample_rate}")
    mag = stft_magnitude(clip.samples, cfg)
    mel = mel_filterbank(cfg) @ mag
    grid = FrameGrid(sample_rate=cfg.sample_rate, hop=cfg.hop_length, n_frames=mel.shape[1])
    return MelSpec(values=np.log(mel + cfg.log_eps), grid=grid)


def normalize_mel(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map log-mel values from [lo, hi] to [-1, 1] (clipped)."""
    return np.clip(2.0 * (values - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def denormalize_mel(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (np.asarray(values) + 1.0) * (hi - lo) / 2.0 + lo


# ---------------------------------------------------------------------------
# Griffin-Lim

def _istft(spec: np.ndarray, cfg: AudioConfig, out_len: int) -> np.ndarray:
    n_fft, hop, win_len = cfg.n_fft, cfg.hop_length, cfg.win_length
    window = np.zeros(n_fft)
    off = (n_fft - win_len) // 2
    window[off:off + win_len] = hann_window(win_len)
    T = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * window
    total = (T - 1) * hop + n_fft
    ola = np.zeros(total)
    wsq = np.zeros(total)
    for k in range(T):
        ola[k * hop:k * hop + n_fft] += frames[k]
        wsq[k * hop:k * hop + n_fft] += window ** 2
    ola = np.where(wsq > 1e-10, ola / np.maximum(wsq, 1e-10), 0.0)
    pad = n_fft // 2
    out = ola[pad:pad + out_len]
    if len(out) < out_len:
        out = np.pad(out, (0, out_len - len(out)))
    return out


def mel_to_linear(mel: MelSpec, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Invert log compression and the filterbank via per-frame NNLS."""
    energy = np.maximum(np.exp(mel.values) - cfg.log_eps, 0.0)
    fb = mel_filterbank(cfg)
    out = np.zeros((fb.shape[1], energy.shape[1]))
    for t in range(energy.shape[1]):
        out[:, t], _ = nnls(fb, energy[:, t])
    return out


def griffin_lim(mel: MelSpec, cfg: AudioConfig = AudioConfig(), iters: int | None = None,
                seed: int = 0, return_convergence: bool = False):
    """Phase recovery from a log-mel spectrogram.

    Deterministic for a fixed seed (the seed draws the initial phase). The
    result has exactly T*hop samples.
    """
    iters = cfg.griffin_lim_iters if iters is None else iters
    if iters < 1:
        raise ValueError("iters must be >= 1")
    target = mel_to_linear(mel, cfg)
    out_len = mel.values.shape[1] * cfg.hop_length
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    spec = target * phase
    convergence = []
    for _ in range(iters):
        x = _istft(spec, cfg, out_len)
        rebuilt = stft_complex(x, cfg)[:, :target.shape[1]]
        convergence.append(float(np.linalg.norm(np.abs(rebuilt) - target) /
                                 max(np.linalg.norm(target), 1e-12)))
        spec = target * rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
    x = _istft(spec, cfg, out_len)
    clip = AudioClip(samples=np.clip(x, -1.0, 1.0), sample_rate=cfg.sample_rate)
    return (clip, convergence) if return_convergence else clip


def _center_pad(x: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    pad = cfg.n_fft // 2
    out = np.pad(x, pad, mode="reflect") if len(x) > pad else np.pad(x, pad)
    T = -(-len(x) // cfg.hop_length)
    need = (T - 1) * cfg.hop_length + cfg.n_fft
    if len(out) < need:
        out = np.pad(out, (0, need - len(out)))
    return out


def _padded_window(cfg: AudioConfig) -> np.ndarray:
    window = np.zeros(cfg.n_fft)
    off = (cfg.n_fft - cfg.win_length) // 2
    window[off:off + cfg.win_length] = hann_window(cfg.win_length)
    return window
