"""SMF parser/writer tests.

The round-trip property is the oracle here: random performances written and
re-parsed must agree within one tick of timing and 1/8192 of bend value
(the wire resolution). Hand-built byte sequences pin down the parser corners
(running status, tempo changes, dangling notes).
"""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from violindiff.midi_io import (DEFAULT_TEMPO_USPQ, DEFAULT_TPQ, BendEvent,
                                ChannelCapacityError, NoteEvent, Performance,
                                SmfParseError, bend_raw_from_value,
                                bend_value_from_raw, parse_smf, write_smf)

TPQ = 480
TICK_S = DEFAULT_TEMPO_USPQ / 1e6 / TPQ  # seconds per tick at default tempo


def _note(pitch, on_tick, off_tick, bends=(), velocity=80):
    return NoteEvent(pitch=pitch, onset_s=on_tick * TICK_S, offset_s=off_tick * TICK_S,
                     velocity=velocity, channel=0,
                     bends=[BendEvent(time_s=t * TICK_S, value=v) for t, v in bends])


# -- round trip -------------------------------------------------------------

@st.composite
def performances(draw):
    n = draw(st.integers(1, 12))
    notes = []
    cursor = 0
    for _ in range(n):
        cursor += draw(st.integers(0, 300))
        length = draw(st.integers(1, 800))
        pitch = draw(st.integers(55, 108))
        bends = []
        if draw(st.booleans()):
            ticks = sorted(draw(st.lists(st.integers(0, length - 1),
                                         min_size=1, max_size=4, unique=True)))
            bends = [(cursor + t,
                      draw(st.integers(-8192, 8191)) / 8192.0) for t in ticks]
        notes.append(_note(pitch, cursor, cursor + length, bends))
        cursor += draw(st.integers(0, length))  # may overlap the next note
    return Performance(notes=notes, ticks_per_quarter=TPQ)


@given(performances())
@settings(max_examples=60, deadline=None)
def test_round_trip_preserves_notes_and_bends(perf):
    out = parse_smf(write_smf(perf))
    assert len(out.notes) == len(perf.notes)
    got = sorted(out.notes, key=lambda n: (n.onset_s, n.pitch))
    want = sorted(perf.notes, key=lambda n: (n.onset_s, n.pitch))
    for g, w in zip(got, want):
        assert g.pitch == w.pitch
        assert abs(g.onset_s - w.onset_s) <= TICK_S + 1e-9
        assert abs(g.offset_s - w.offset_s) <= TICK_S + 1e-9
        w_bends = [b for b in w.bends if w.onset_s <= b.time_s < w.offset_s]
        # parser injects a bend at onset when the file has none there
        g_bends = [b for b in g.bends if not (b.time_s == g.onset_s and not any(
            abs(x.time_s - w.onset_s) < TICK_S / 2 for x in w_bends))]
        assert len(g_bends) == len(w_bends)
        for gb, wb in zip(sorted(g_bends, key=lambda b: b.time_s),
                          sorted(w_bends, key=lambda b: b.time_s)):
            assert abs(gb.time_s - wb.time_s) <= TICK_S + 1e-9
            assert abs(gb.value - wb.value) <= 1.0 / 8192 + 1e-9


def test_write_is_deterministic():
    perf = Performance(notes=[_note(60, 0, 100, [(50, 0.25)]), _note(64, 50, 200)],
                       ticks_per_quarter=TPQ)
    assert write_smf(perf) == write_smf(perf)


def test_bend_raw_conversion_is_inverse_on_wire_values():
    for raw in (0, 1, 8191, 8192, 8193, 16383):
        assert bend_raw_from_value(bend_value_from_raw(raw)) == raw
    assert bend_value_from_raw(8192) == 0.0
    assert bend_raw_from_value(1.0) == 16383  # clamped to the wire maximum
    assert bend_raw_from_value(-1.0) == 0


# -- channel assignment -----------------------------------------------------

def test_channel_capacity():
    # 16 overlapping voices fit, 17 do not
    ok = Performance(notes=[_note(55 + i, 0, 100) for i in range(16)],
                     ticks_per_quarter=TPQ)
    parse_smf(write_smf(ok))
    too_many = Performance(notes=[_note(55 + i, 0, 100) for i in range(17)],
                           ticks_per_quarter=TPQ)
    with pytest.raises(ChannelCapacityError):
        write_smf(too_many)


def test_sequential_notes_reuse_one_channel():
    perf = Performance(notes=[_note(60 + i, i * 100, i * 100 + 90) for i in range(20)],
                       ticks_per_quarter=TPQ)
    out = parse_smf(write_smf(perf))
    assert len(out.notes) == 20
    assert {n.channel for n in out.notes} == {0}


def test_per_note_bends_do_not_leak_across_voices():
    # two overlapping notes, one bent: the flat one must stay flat
    bent = _note(60, 0, 200, [(100, 0.5)])
    flat = _note(67, 0, 200)
    out = parse_smf(write_smf(Performance(notes=[bent, flat], ticks_per_quarter=TPQ)))
    by_pitch = {n.pitch: n for n in out.notes}
    assert any(abs(b.value - 0.5) < 1e-3 for b in by_pitch[60].bends)
    assert all(b.value == 0.0 for b in by_pitch[67].bends)


# -- hand-built files for parser corners ------------------------------------

def _smf(tracks: list[bytes], fmt=1, tpq=TPQ) -> bytes:
    head = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), tpq)
    return head + b"".join(b"MTrk" + struct.pack(">I", len(t)) + t for t in tracks)


END = b"\x00\xff\x2f\x00"


def test_parse_rejects_bad_header():
    with pytest.raises(SmfParseError):
        parse_smf(b"RIFF" + b"\x00" * 20)
    with pytest.raises(SmfParseError):
        parse_smf(_smf([END], fmt=2))
    smpte = b"MThd" + struct.pack(">IHHH", 6, 1, 1, 0xE250) + b"MTrk" + struct.pack(">I", 4) + END
    with pytest.raises(SmfParseError):
        parse_smf(smpte)


def test_running_status_and_tempo_change():
    # 120 bpm for one quarter, then 60 bpm; two notes via running status
    track = (b"\x00\xff\x51\x03" + (500000).to_bytes(3, "big")
             + b"\x00\x90\x3c\x40"                      # C4 on, t=0
             + _varlen(TPQ) + b"\x3c\x00"               # C4 off (running status)
             + b"\x00\xff\x51\x03" + (1000000).to_bytes(3, "big")
             + b"\x00\x90\x40\x40"                      # E4 on at 1 quarter
             + _varlen(TPQ) + b"\x40\x00" + END)        # E4 off one quarter later
    out = parse_smf(_smf([track]))
    a, b = sorted(out.notes, key=lambda n: n.onset_s)
    assert (a.onset_s, a.offset_s) == (0.0, 0.5)
    assert b.onset_s == 0.5
    assert b.offset_s == pytest.approx(1.5)  # second quarter lasts 1 s at 60 bpm


def _varlen(v):
    out = [v & 0x7F]
    v >>= 7
    while v:
        out.append(0x80 | (v & 0x7F))
        v >>= 7
    return bytes(reversed(out))


def test_dangling_note_is_closed_with_warning():
    track = b"\x00\x90\x3c\x40" + _varlen(100) + b"\xff\x2f\x00"
    out = parse_smf(_smf([track]))
    assert len(out.notes) == 1
    assert out.notes[0].offset_s == pytest.approx(100 * TICK_S)
    assert any("never released" in w or "dangling" in w for w in out.warnings)


def test_zero_length_note_dropped():
    track = b"\x00\x90\x3c\x40" + b"\x00\x80\x3c\x00" + END
    out = parse_smf(_smf([track]))
    assert out.notes == []
    assert out.warnings


def test_same_tick_bend_last_wins():
    track = (b"\x00\x90\x45\x40"
             + b"\x00\xe0" + bytes([0, 0x60])            # bend a
             + b"\x00\xe0" + bytes([0, 0x20])            # bend b, same tick
             + _varlen(200) + b"\x80\x45\x00" + END)
    out = parse_smf(_smf([track]))
    (note,) = out.notes
    at_onset = [b for b in note.bends if b.time_s == 0.0]
    assert len(at_onset) == 1
    assert at_onset[0].value == bend_value_from_raw(0x20 << 7)


def test_note_without_bend_events_gets_neutral_onset_bend():
    track = (b"\x00\x90\x45\x40" + _varlen(120) + b"\x80\x45\x00" + END)
    out = parse_smf(_smf([track]))
    (note,) = out.notes
    assert note.bends[0].time_s == note.onset_s
    assert note.bends[0].value == 0.0


def test_fifo_matching_of_unison_notes():
    # two C4 ons then two offs: first-on pairs with first-off
    track = (b"\x00\x90\x3c\x40" + _varlen(100) + b"\x90\x3c\x40"
             + _varlen(50) + b"\x80\x3c\x00" + _varlen(100) + b"\x80\x3c\x00" + END)
    out = parse_smf(_smf([track]))
    spans = sorted((round(n.onset_s / TICK_S), round(n.offset_s / TICK_S))
                   for n in out.notes)
    assert spans == [(0, 150), (100, 250)]


def test_format0_and_multitrack_merge_agree():
    one = _smf([(b"\x00\x90\x3c\x40" + _varlen(100) + b"\x80\x3c\x00"
                 + b"\x00\x90\x40\x40" + _varlen(100) + b"\x80\x40\x00" + END)], fmt=0)
    two = _smf([(b"\x00\x90\x3c\x40" + _varlen(100) + b"\x80\x3c\x00" + END),
                (_varlen(100) + b"\x90\x40\x40" + _varlen(100) + b"\x80\x40\x00" + END)])
    a = {(n.pitch, round(n.onset_s, 6), round(n.offset_s, 6)) for n in parse_smf(one).notes}
    b = {(n.pitch, round(n.onset_s, 6), round(n.offset_s, 6)) for n in parse_smf(two).notes}
    assert a == b
