"""Standard MIDI File reading/writing with per-note pitch-bend curves.

SMF stores pitch bends per channel, not per note. We associate each bend
message with whatever note is sounding on its channel at that instant, and on
the way out we place concurrent notes on distinct channels (MPE-style) so the
association survives a round trip.

Chunk headers and multi-byte fields are big-endian per the SMF standard; the
14-bit bend payload is lsb-then-msb.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

DEFAULT_TPQ = 480
DEFAULT_TEMPO_USPQ = 500000  # 120 bpm


class SmfParseError(ValueError):
    """Malformed SMF bytes; message carries the byte offset."""


class ChannelCapacityError(ValueError):
    """More concurrent voices than the 16 MIDI channels can carry."""


@dataclass
class BendEvent:
    time_s: float
    value: float  # (raw - 8192) / 8192, in [-1, 1]


@dataclass
class NoteEvent:
    pitch: int
    onset_s: float
    offset_s: float
    velocity: int
    channel: int
    bends: list[BendEvent] = field(default_factory=list)

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass
class Performance:
    notes: list[NoteEvent] = field(default_factory=list)
    performer_id: str = ""
    piece_id: str = ""
    ticks_per_quarter: int = DEFAULT_TPQ
    tempo_map: list[tuple[int, int]] = field(
        default_factory=lambda: [(0, DEFAULT_TEMPO_USPQ)])  # (tick, us/quarter)
    warnings: list[str] = field(default_factory=list)

    @property
    def duration_s(self) -> float:
        return max((n.offset_s for n in self.notes), default=0.0)


def bend_value_from_raw(raw: int) -> float:
    return (raw - 8192) / 8192.0


def bend_raw_from_value(value: float) -> int:
    return max(0, min(16383, round(8192 + value * 8192)))


# ---------------------------------------------------------------------------
# parsing

def _read_varlen(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise SmfParseError(f"truncated variable-length quantity at byte {pos}")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise SmfParseError(f"variable-length quantity too long at byte {pos}")


def _parse_track(data: bytes, start: int, end: int):
    """Yield (tick, status, data_bytes) for one MTrk body. Meta events yield
    status 0xFF with payload (type, data)."""
    pos = start
    tick = 0
    running = None
    while pos < end:
        delta, pos = _read_varlen(data, pos)
        tick += delta
        if pos >= end:
            raise SmfParseError(f"event truncated at byte {pos}")
        status = data[pos]
        if status >= 0x80:
            pos += 1
        elif running is None:
            raise SmfParseError(f"data byte {status:#x} without running status at byte {pos}")
        else:
            status = running
        if status == 0xFF:
            running = None
            if pos >= end:
                raise SmfParseError(f"meta event truncated at byte {pos}")
            mtype = data[pos]
            length, pos = _read_varlen(data, pos + 1)
            if pos + length > end:
                raise SmfParseError(f"meta payload overruns track at byte {pos}")
            yield tick, 0xFF, (mtype, data[pos:pos + length])
            pos += length
            if mtype == 0x2F:
                return
        elif status in (0xF0, 0xF7):
            running = None
            length, pos = _read_varlen(data, pos)
            if pos + length > end:
                raise SmfParseError(f"sysex payload overruns track at byte {pos}")
            pos += length
        elif status >= 0xF0:
            raise SmfParseError(f"unsupported system message {status:#x} at byte {pos - 1}")
        else:
            running = status
            n_data = 1 if (status & 0xF0) in (0xC0, 0xD0) else 2
            if pos + n_data > end:
                raise SmfParseError(f"channel message truncated at byte {pos}")
            yield tick, status, data[pos:pos + n_data]
            pos += n_data


class _TickClock:
    """Tick <-> seconds conversion under a tempo map."""

    def __init__(self, tpq: int, tempo_map: list[tuple[int, int]]):
        self.tpq = tpq
        events = sorted(tempo_map)
        if not events or events[0][0] != 0:
            events = [(0, DEFAULT_TEMPO_USPQ)] + events
        self.ticks = [t for t, _ in events]
        self.uspq = [u for _, u in events]
        self.secs = [0.0]
        for i in range(1, len(events)):
            dt = self.ticks[i] - self.ticks[i - 1]
            self.secs.append(self.secs[-1] + dt * self.uspq[i - 1] / (tpq * 1e6))

    def to_seconds(self, tick: int) -> float:
        i = _last_leq(self.ticks, tick)
        return self.secs[i] + (tick - self.ticks[i]) * self.uspq[i] / (self.tpq * 1e6)

    def to_ticks(self, seconds: float) -> int:
        i = _last_leq(self.secs, seconds)
        return round(self.ticks[i] + (seconds - self.secs[i]) * self.tpq * 1e6 / self.uspq[i])


def _last_leq(values, x) -> int:
    lo, hi = 0, len(values) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if values[mid] <= x:
            lo = mid
        else:
            hi = mid - 1
    return lo


def parse_smf(data: bytes) -> Performance:
    """Parse an SMF (format 0 or 1) into a Performance.

    Notes are rebuilt by FIFO-matching note-on/note-off per (channel, pitch);
    bend messages attach to every note sounding on their channel at that time,
    and the bend value in effect at a note's onset is replicated as an event
    at exactly the onset. Bends that hit no note are dropped.
    """
    if data[:4] != b"MThd":
        raise SmfParseError("expected MThd at byte 0")
    if len(data) < 14:
        raise SmfParseError("header truncated at byte 4")
    hlen, fmt, ntrks, division = struct.unpack(">IHHH", data[4:14])
    if hlen != 6:
        raise SmfParseError(f"header length {hlen} != 6 at byte 4")
    if fmt not in (0, 1):
        raise SmfParseError(f"unsupported SMF format {fmt} at byte 8")
    if division & 0x8000:
        raise SmfParseError("SMPTE time division unsupported (byte 12)")
    tpq = division

    pos = 14
    tracks = []
    for ti in range(ntrks):
        if data[pos:pos + 4] != b"MTrk":
            raise SmfParseError(f"expected MTrk at byte {pos}")
        (tlen,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body_start = pos + 8
        if body_start + tlen > len(data):
            raise SmfParseError(f"track {ti} overruns file at byte {pos + 4}")
        tracks.append(list(_parse_track(data, body_start, body_start + tlen)))
        pos = body_start + tlen

    tempo_map = [(0, DEFAULT_TEMPO_USPQ)]
    for track in tracks:
        for tick, status, payload in track:
            if status == 0xFF and payload[0] == 0x51:
                raw = payload[1]
                if len(raw) != 3:
                    raise SmfParseError("tempo meta event must carry 3 bytes")
                tempo_map.append((tick, int.from_bytes(raw, "big")))
    clock = _TickClock(tpq, tempo_map)

    # Merge channel events across tracks in (tick, track, file) order.
    merged = []
    for ti, track in enumerate(tracks):
        for ei, (tick, status, payload) in enumerate(track):
            if status != 0xFF:
                merged.append((tick, ti, ei, status, payload))
    merged.sort(key=lambda e: (e[0], e[1], e[2]))

    perf = Performance(ticks_per_quarter=tpq, tempo_map=sorted(set(tempo_map)))
    open_notes: dict[tuple[int, int], list[NoteEvent]] = {}
    channel_bends: dict[int, list[BendEvent]] = {}
    last_tick = max((tick for track in tracks for tick, _, _ in track), default=0)
    for tick, _, _, status, payload in merged:
        kind, channel = status & 0xF0, status & 0x0F
        t = clock.to_seconds(tick)
        if kind == 0x90 and payload[1] > 0:
            note = NoteEvent(pitch=payload[0], onset_s=t, offset_s=t,
                             velocity=payload[1], channel=channel)
            open_notes.setdefault((channel, payload[0]), []).append(note)
            perf.notes.append(note)
        elif kind == 0x80 or (kind == 0x90 and payload[1] == 0):
            stack = open_notes.get((channel, payload[0]))
            if stack:
                stack.pop(0).offset_s = t
        elif kind == 0xE0:
            raw = payload[0] | (payload[1] << 7)
            events = channel_bends.setdefault(channel, [])
            ev = BendEvent(time_s=t, value=bend_value_from_raw(raw))
            if events and events[-1].time_s == t:
                events[-1] = ev  # same-tick bends: last one wins
            else:
                events.append(ev)

    end_t = clock.to_seconds(last_tick)
    for stack in open_notes.values():
        for note in stack:
            note.offset_s = max(end_t, note.onset_s)
            perf.warnings.append(
                f"dangling note-on (pitch {note.pitch}, ch {note.channel}) closed at track end")

    for n in perf.notes:
        if n.offset_s <= n.onset_s:
            perf.warnings.append(
                f"zero-length note (pitch {n.pitch}, ch {n.channel}) dropped")
    perf.notes = [n for n in perf.notes if n.offset_s > n.onset_s]
    _attach_bends(perf.notes, channel_bends)
    perf.notes.sort(key=lambda n: (n.onset_s, n.pitch, n.channel))
    return perf


def _attach_bends(notes: list[NoteEvent], channel_bends: dict[int, list[BendEvent]]) -> None:
    for note in notes:
        events = channel_bends.get(note.channel, [])
        inside = [BendEvent(e.time_s, e.value) for e in events
                  if note.onset_s <= e.time_s < note.offset_s]
        if not inside or inside[0].time_s > note.onset_s:
            # replicate the value in effect at onset as an event at onset
            current = 0.0
            for e in events:
                if e.time_s > note.onset_s:
                    break
                current = e.value
            inside.insert(0, BendEvent(note.onset_s, current))
        note.bends = inside


# ---------------------------------------------------------------------------
# writing

def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _assign_channels(notes: list[NoteEvent]) -> list[int]:
    """Lowest free channel per note so overlapping notes never share one."""
    busy_until = [-1.0] * 16
    out = [0] * len(notes)
    for i in sorted(range(len(notes)), key=lambda i: (notes[i].onset_s, notes[i].pitch)):
        note = notes[i]
        for ch in range(16):
            if busy_until[ch] <= note.onset_s:
                busy_until[ch] = note.offset_s
                out[i] = ch
                break
        else:
            raise ChannelCapacityError(
                f"more than 16 concurrent voices at t={note.onset_s:.3f}s")
    return out


def write_smf(p: Performance) -> bytes:
    """Serialize a Performance as a format-0 SMF, one channel per voice."""
    clock = _TickClock(p.ticks_per_quarter, p.tempo_map)
    channels = _assign_channels(p.notes)

    # (tick, rank, message); rank orders same-tick events so that offs
    # precede bends precede ons
    events: list[tuple[int, int, bytes]] = []
    tempo_map = sorted(set(p.tempo_map)) or [(0, DEFAULT_TEMPO_USPQ)]
    for (tick, uspq) in tempo_map:
        events.append((tick, 0, bytes([0xFF, 0x51, 0x03]) + uspq.to_bytes(3, "big")))
    for note, ch in zip(p.notes, channels):
        on = clock.to_ticks(note.onset_s)
        off = max(clock.to_ticks(note.offset_s), on + 1)
        velocity = max(1, min(127, note.velocity))
        events.append((off, 1, bytes([0x80 | ch, note.pitch & 0x7F, 0])))
        for bend in note.bends:
            raw = bend_raw_from_value(bend.value)
            tick = min(max(clock.to_ticks(bend.time_s), on), off - 1)
            events.append((tick, 2, bytes([0xE0 | ch, raw & 0x7F, raw >> 7])))
        events.append((on, 3, bytes([0x90 | ch, note.pitch & 0x7F, velocity])))
    events.sort(key=lambda e: (e[0], e[1]))

    body = bytearray()
    prev_tick = 0
    for tick, _, msg in events:
        body += _varlen(tick - prev_tick)
        body += msg
        prev_tick = tick
    body += _varlen(0) + bytes([0xFF, 0x2F, 0x00])

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, p.ticks_per_quarter)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)
