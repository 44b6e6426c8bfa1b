"""Standard MIDI File reading and writing.

Only the subset needed for note-level synthesis is interpreted: note on/off,
program changes and tempo. Everything else is parsed (so offsets stay right)
and skipped.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Optional

DRUM_CHANNEL = 9
DEFAULT_TEMPO = 500_000  # microseconds per quarter note (120 BPM)


class MidiParseError(ValueError):
    """Malformed MIDI data. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MidiWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TimedNote:
    onset_s: float
    offset_s: Optional[float]
    pitch: int
    program: int = 0
    is_drum: bool = False

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 0 <= self.program <= 127:
            raise ValueError(f"program out of range: {self.program}")
        if self.onset_s < 0:
            raise ValueError(f"negative onset: {self.onset_s}")
        if not self.is_drum:
            if self.offset_s is None or self.offset_s <= self.onset_s:
                raise ValueError(f"offset must follow onset: {self.onset_s} -> {self.offset_s}")

    @property
    def duration_s(self) -> float:
        return 0.0 if self.offset_s is None else self.offset_s - self.onset_s


def note_sort_key(note: TimedNote):
    return (note.onset_s, note.is_drum, note.program, note.pitch)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: Optional[int] = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def need(self, n: int, what: str):
        if self.pos + n > self.end:
            raise MidiParseError(f"unexpected end of data reading {what}", self.pos)

    def byte(self, what: str = "byte") -> int:
        self.need(1, what)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int, what: str) -> bytes:
        self.need(n, what)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def varlen(self) -> int:
        start = self.pos
        value = 0
        for _ in range(4):
            b = self.byte("variable-length quantity")
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", start)


def _parse_track(data: bytes, start: int, end: int, track_index: int):
    """Yield (tick, order, kind, payload) for the events we care about."""
    r = _Reader(data, start, end)
    tick = 0
    running = None
    events = []
    n = 0
    while r.pos < r.end:
        tick += r.varlen()
        status_pos = r.pos
        status = r.byte("event status")
        if status == 0xFF:
            meta_type = r.byte("meta type")
            length = r.varlen()
            payload = r.take(length, "meta payload")
            if meta_type == 0x51:
                if length != 3:
                    raise MidiParseError("set_tempo meta event must have 3 data bytes", status_pos)
                events.append((tick, track_index, n, "tempo", int.from_bytes(payload, "big")))
            elif meta_type == 0x2F:
                events.append((tick, track_index, n, "end", None))
                break
            # running status is cancelled by meta/sysex events
            running = None
        elif status in (0xF0, 0xF7):
            length = r.varlen()
            r.take(length, "sysex payload")
            running = None
        elif status >= 0xF0:
            raise MidiParseError(f"unsupported system message 0x{status:02X} in file", status_pos)
        else:
            if status < 0x80:
                if running is None:
                    raise MidiParseError("data byte without running status", status_pos)
                r.pos -= 1
                status = running
            else:
                running = status
            kind = status & 0xF0
            channel = status & 0x0F
            nbytes = 1 if kind in (0xC0, 0xD0) else 2
            args = r.take(nbytes, "channel message data")
            if any(a & 0x80 for a in args):
                raise MidiParseError("channel message data byte has high bit set", r.pos - nbytes)
            if kind == 0x90 and args[1] > 0:
                events.append((tick, track_index, n, "on", (channel, args[0])))
            elif kind == 0x80 or (kind == 0x90 and args[1] == 0):
                events.append((tick, track_index, n, "off", (channel, args[0])))
            elif kind == 0xC0:
                events.append((tick, track_index, n, "program", (channel, args[0])))
        n += 1
    else:
        # no end-of-track marker; tolerated
        events.append((tick, track_index, n, "end", None))
    return events


def _tick_to_seconds(tempo_events, division: int):
    """Piecewise-linear tick->seconds map from a sorted tempo list."""
    if division & 0x8000:
        fps = 256 - (division >> 8)
        per_frame = division & 0xFF
        sec_per_tick = 1.0 / (fps * per_frame)
        return lambda tick: tick * sec_per_tick

    breakpoints = [(0, 0.0, DEFAULT_TEMPO)]
    for tick, tempo in tempo_events:
        last_tick, last_sec, last_tempo = breakpoints[-1]
        sec = last_sec + (tick - last_tick) * last_tempo / (1e6 * division)
        if tick == last_tick:
            breakpoints[-1] = (tick, last_sec, tempo)
        else:
            breakpoints.append((tick, sec, tempo))

    def convert(tick: int) -> float:
        lo = 0
        for i in range(len(breakpoints)):
            if breakpoints[i][0] <= tick:
                lo = i
            else:
                break
        t0, s0, tempo = breakpoints[lo]
        return s0 + (tick - t0) * tempo / (1e6 * division)

    return convert


def midi_to_notes(midi_bytes: bytes) -> list[TimedNote]:
    """Parse a format 0/1 Standard MIDI File into absolute-time notes.

    Channel 10 notes are flagged as drums and carry no offset. Note-offs with
    no matching note-on are skipped with a :class:`MidiWarning`; notes still
    sounding at the end of the file are closed at the last event time.
    """
    data = bytes(midi_bytes)
    r = _Reader(data)
    if r.take(4, "header chunk id") != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = struct.unpack(">I", r.take(4, "header length"))[0]
    if hlen < 6:
        raise MidiParseError("header chunk shorter than 6 bytes", 4)
    fmt, ntracks, division = struct.unpack(">HHH", r.take(6, "header fields"))
    r.take(hlen - 6, "header padding")
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported MIDI format {fmt}", 8)
    if division == 0:
        raise MidiParseError("division of zero ticks", 12)

    events = []
    track_index = 0
    while r.pos < len(data) and track_index < ntracks:
        chunk_pos = r.pos
        chunk_id = r.take(4, "chunk id")
        length = struct.unpack(">I", r.take(4, "chunk length"))[0]
        if r.pos + length > len(data):
            raise MidiParseError(f"chunk length {length} runs past end of file", chunk_pos + 4)
        if chunk_id == b"MTrk":
            events.extend(_parse_track(data, r.pos, r.pos + length, track_index))
            track_index += 1
        r.pos += length
    if track_index < ntracks:
        raise MidiParseError(f"header declares {ntracks} tracks, found {track_index}", r.pos)

    events.sort(key=lambda e: (e[0], e[1], e[2]))
    tempos = [(e[0], e[4]) for e in events if e[3] == "tempo"]
    to_sec = _tick_to_seconds(tempos, division)

    programs = [0] * 16
    active: dict[tuple[int, int], list[tuple[int, int]]] = {}
    raw = []  # (onset_tick, offset_tick or None, pitch, program, is_drum)
    last_tick = 0
    for tick, _, _, kind, payload in events:
        last_tick = max(last_tick, tick)
        if kind == "program":
            channel, program = payload
            programs[channel] = program
        elif kind == "on":
            channel, pitch = payload
            if channel == DRUM_CHANNEL:
                raw.append((tick, None, pitch, programs[channel], True))
            else:
                active.setdefault((channel, pitch), []).append((tick, programs[channel]))
        elif kind == "off":
            channel, pitch = payload
            if channel == DRUM_CHANNEL:
                continue
            stack = active.get((channel, pitch))
            if not stack:
                warnings.warn(f"note-off without note-on: channel {channel} pitch {pitch} "
                              f"at tick {tick}", MidiWarning)
                continue
            onset, program = stack.pop(0)
            raw.append((onset, tick, pitch, program, False))
    for (channel, pitch), stack in active.items():
        for onset, program in stack:
            raw.append((onset, last_tick, pitch, program, False))

    notes = []
    for onset, offset, pitch, program, is_drum in raw:
        on_s = to_sec(onset)
        if is_drum:
            notes.append(TimedNote(on_s, None, pitch, program, True))
            continue
        off_s = to_sec(offset)
        if off_s <= on_s:
            continue
        notes.append(TimedNote(on_s, off_s, pitch, program, False))
    notes.sort(key=note_sort_key)
    return notes


def _varlen_bytes(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def notes_to_midi(notes, ticks_per_beat: int = 480, tempo: int = DEFAULT_TEMPO,
                  drum_duration_s: float = 0.1) -> bytes:
    """Write notes to a format 0 MIDI file, one channel per program.

    Drums go to channel 10. At most 15 distinct non-drum programs fit.
    """
    sec_per_tick = tempo / (1e6 * ticks_per_beat)
    programs = sorted({n.program for n in notes if not n.is_drum})
    if len(programs) > 15:
        raise ValueError("more than 15 programs cannot be written to one MIDI file")
    free = [c for c in range(16) if c != DRUM_CHANNEL]
    channel_of = {p: free[i] for i, p in enumerate(programs)}

    def ticks(sec):
        return int(round(sec / sec_per_tick))

    # (tick, order, bytes); offs sort before ons at equal ticks
    msgs = [(0, -2, b"\xFF\x51\x03" + tempo.to_bytes(3, "big"))]
    for program, channel in channel_of.items():
        msgs.append((0, -1, bytes([0xC0 | channel, program])))
    for n in notes:
        channel = DRUM_CHANNEL if n.is_drum else channel_of[n.program]
        on = ticks(n.onset_s)
        off = ticks(n.onset_s + drum_duration_s) if n.is_drum else max(ticks(n.offset_s), on + 1)
        msgs.append((on, 1, bytes([0x90 | channel, n.pitch, 100])))
        msgs.append((off, 0, bytes([0x80 | channel, n.pitch, 0])))
    msgs.sort(key=lambda m: (m[0], m[1]))

    body = bytearray()
    prev = 0
    for tick, _, msg in msgs:
        body += _varlen_bytes(tick - prev) + msg
        prev = tick
    body += b"\x00\xFF\x2F\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ticks_per_beat)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def notes_to_json(notes) -> dict:
    """Note-list document shared by datasets and the external transcriber plug."""
    return {"notes": [{"onset": n.onset_s, "offset": n.offset_s, "pitch": n.pitch,
                       "program": n.program, "is_drum": n.is_drum} for n in notes]}


def notes_from_json(doc) -> list[TimedNote]:
    out = []
    for i, item in enumerate(doc["notes"]):
        try:
            out.append(TimedNote(float(item["onset"]),
                                 None if item.get("offset") is None else float(item["offset"]),
                                 int(item["pitch"]), int(item.get("program", 0)),
                                 bool(item.get("is_drum", False))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad note entry {i}: {exc}") from exc
    return out
