"""Frame-aligned roll encodings of a performance.

A performance becomes four P x T matrices on a common frame grid: binary
frame/onset/offset rolls plus a real-valued bend roll in (-1, 1). Pitch rows
cover MIDI 55..108 (the violin range), so P = 54. The bend value of a frame
is the duration-weighted average of the note's bend step function over the
portion of the frame the note covers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .midi_io import NoteEvent, Performance

PITCH_MIN = 55
PITCH_MAX = 108
N_PITCHES = PITCH_MAX - PITCH_MIN + 1

# Open-interval margin for the bend roll: values live in (-1, 1), never on
# the boundary, so diffusion targets keep headroom.
BEND_CLAMP = 1.0 - 1e-6

# Tolerance (in frames) for boundary times that float division lands a hair
# off an integer; raw times are millisecond-scale so 1e-9 frames is safe.
_FRAME_EPS = 1e-9


@dataclass(frozen=True)
class FrameGrid:
    sample_rate: int = 16000
    hop: int = 320
    n_frames: int = 0

    @property
    def frame_s(self) -> float:
        return self.hop / self.sample_rate

    @classmethod
    def for_duration(cls, duration_s: float, sample_rate: int = 16000,
                     hop: int = 320) -> "FrameGrid":
        n_samples = round(duration_s * sample_rate)
        n_frames = max(1, -(-n_samples // hop))
        return cls(sample_rate=sample_rate, hop=hop, n_frames=n_frames)

    def frame_floor(self, t: float) -> int:
        return math.floor(t / self.frame_s + _FRAME_EPS)

    def frame_ceil(self, t: float) -> int:
        return math.ceil(t / self.frame_s - _FRAME_EPS)


@dataclass
class RollSet:
    frame: np.ndarray   # (P, T) float, binary
    onset: np.ndarray   # (P, T) float, binary
    offset: np.ndarray  # (P, T) float, binary
    bend: np.ndarray    # (P, T) float in (-1, 1), zero off the frame support
    grid: FrameGrid
    warnings: list[str] = field(default_factory=list)


@dataclass
class DecodedNote:
    pitch: int
    start_frame: int
    end_frame: int  # exclusive
    f0_hz: np.ndarray  # (end_frame - start_frame,)


def frame_bend(note: NoteEvent, grid: FrameGrid, k: int) -> float:
    """Duration-weighted bend of frame k under the note's step function.

    Each bend event's value holds until the next event (or note offset); the
    average runs over the frame interval intersected with the note span, so a
    partially covered frame is averaged only over the covered portion.
    """
    lo = max(k * grid.frame_s, note.onset_s)
    hi = min((k + 1) * grid.frame_s, note.offset_s)
    if hi <= lo:
        return 0.0
    segments = []
    prev_t, prev_v = note.onset_s, 0.0
    for ev in note.bends:
        segments.append((prev_t, ev.time_s, prev_v))
        prev_t, prev_v = ev.time_s, ev.value
    segments.append((prev_t, note.offset_s, prev_v))
    total = 0.0
    weight = 0.0
    for a, b, v in segments:
        d = min(b, hi) - max(a, lo)
        if d > 0:
            total += v * d
            weight += d
    return total / weight if weight > 0 else 0.0


def encode_rolls(p: Performance, grid: FrameGrid) -> RollSet:
    """Encode a performance as frame/onset/offset/bend rolls on the grid.

    Out-of-range pitches and notes entirely outside the grid are dropped with
    a warning. Where equal-pitch notes overlap, the later onset wins the bend
    value in the shared frames.
    """
    T = grid.n_frames
    shape = (N_PITCHES, T)
    rolls = RollSet(frame=np.zeros(shape), onset=np.zeros(shape),
                    offset=np.zeros(shape), bend=np.zeros(shape), grid=grid)
    for note in sorted(p.notes, key=lambda n: (n.onset_s, n.pitch)):
        if not PITCH_MIN <= note.pitch <= PITCH_MAX:
            rolls.warnings.append(f"pitch {note.pitch} outside {PITCH_MIN}..{PITCH_MAX}, dropped")
            continue
        row = note.pitch - PITCH_MIN
        lo = grid.frame_floor(note.onset_s)
        hi = grid.frame_ceil(note.offset_s) - 1
        hi = max(hi, lo)  # sub-frame notes still occupy their one frame
        if hi < 0 or lo >= T:
            rolls.warnings.append(
                f"note (pitch {note.pitch}, {note.onset_s:.3f}s) outside grid, dropped")
            continue
        on_frame = min(max(lo, 0), T - 1)
        off_frame = min(max(grid.frame_floor(note.offset_s), 0), T - 1)
        rolls.onset[row, on_frame] = 1.0
        rolls.offset[row, off_frame] = 1.0
        for k in range(max(lo, 0), min(hi, T - 1) + 1):
            rolls.frame[row, k] = 1.0
            v = frame_bend(note, grid, k)
            rolls.bend[row, k] = min(BEND_CLAMP, max(-BEND_CLAMP, v))
    return rolls


def decode_f0(rolls: RollSet, bend_range_semitones: float = 2.0) -> list[DecodedNote]:
    """Segment each pitch row into contiguous runs and map bend to F0 in Hz.

    F0[t] = 440 * 2^((pitch + bend[p,t] * range - 69) / 12). The inverse of
    the encoding up to frame quantization; used to score generated bend rolls.
    """
    notes = []
    P, T = rolls.frame.shape
    for row in range(P):
        active = rolls.frame[row] > 0.5
        t = 0
        while t < T:
            if not active[t]:
                t += 1
                continue
            start = t
            while t < T and active[t]:
                t += 1
            pitch = row + PITCH_MIN
            semis = pitch + rolls.bend[row, start:t] * bend_range_semitones - 69.0
            notes.append(DecodedNote(pitch=pitch, start_frame=start, end_frame=t,
                                     f0_hz=440.0 * 2.0 ** (semis / 12.0)))
    notes.sort(key=lambda n: (n.start_frame, n.pitch))
    return notes


def rolls_to_array(rolls: RollSet) -> np.ndarray:
    """Stack as (4, P, T) float32 in frame/onset/offset/bend order."""
    return np.stack([rolls.frame, rolls.onset, rolls.offset, rolls.bend]).astype(np.float32)


def rolls_from_array(arr: np.ndarray, grid: FrameGrid | None = None) -> RollSet:
    if arr.ndim != 3 or arr.shape[0] != 4 or arr.shape[1] != N_PITCHES:
        raise ValueError(f"expected (4, {N_PITCHES}, T) roll stack, got {arr.shape}")
    if grid is None:
        grid = FrameGrid(n_frames=arr.shape[2])
    a = arr.astype(np.float64)
    return RollSet(frame=a[0], onset=a[1], offset=a[2], bend=a[3], grid=grid)
