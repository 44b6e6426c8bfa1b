"""Note-event vocabulary and segment (de)serialization.

A segment serializes as::

    tie section:  (Instrument, Note)* EndTieSection
    events:       ([Time] (Instrument OnOff Note | Drum))* EOS

Time tokens hold the absolute 10 ms bin inside the segment and are only
emitted when the time changes. Drum hits are a single Drum(pitch) token with
no offset. Events at one time are ordered offs first, then by instrument
class, then by pitch, so the encoding of a note list is unique.

All times are quantized to a global 10 ms grid before being assigned to a
window, so the same note always lands in the same bin whichever window
looks at it. Window starts must therefore sit on that grid.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .midi import TimedNote

SEGMENT_SECONDS = 5.12
FRAME_SECONDS = 0.02
MAX_TOKENS = 2048
DRUM_CLASS = 34


class TokenGrammarError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at token position {position}")
        self.position = position


class TokenizerWarning(UserWarning):
    pass


# ---------------------------------------------------------------- vocabulary

@dataclass(frozen=True)
class VocabConfig:
    num_programs: int = 128
    num_pitches: int = 128
    num_velocities: int = 2
    num_times: int = 512
    num_drums: int = 128
    time_step_s: float = 0.01
    with_pad: bool = True


_GROUPS = ("instrument", "note", "onoff", "time", "drum", "end_tie", "eos", "pad")


@dataclass(frozen=True)
class Vocabulary:
    config: VocabConfig
    ranges: dict  # group name -> (start, stop)

    @property
    def size(self) -> int:
        return max(stop for _, stop in self.ranges.values())

    def _id(self, group: str, value: int = 0) -> int:
        start, stop = self.ranges[group]
        if not 0 <= value < stop - start:
            raise ValueError(f"{group} value {value} out of range")
        return start + value

    def instrument(self, program: int) -> int:
        return self._id("instrument", program)

    def note(self, pitch: int) -> int:
        return self._id("note", pitch)

    def onoff(self, on: bool) -> int:
        return self._id("onoff", int(on))

    def time(self, step: int) -> int:
        return self._id("time", step)

    def drum(self, pitch: int) -> int:
        return self._id("drum", pitch)

    @property
    def end_tie(self) -> int:
        return self.ranges["end_tie"][0]

    @property
    def eos(self) -> int:
        return self.ranges["eos"][0]

    @property
    def pad(self) -> int:
        if "pad" not in self.ranges:
            raise KeyError("vocabulary built without PAD")
        return self.ranges["pad"][0]

    def group_of(self, token: int) -> tuple[str, int]:
        for name, (start, stop) in self.ranges.items():
            if start <= token < stop:
                return name, token - start
        raise ValueError(f"token {token} outside vocabulary of size {self.size}")

    def digest(self) -> str:
        layout = {k: list(v) for k, v in self.ranges.items()}
        layout["time_step_s"] = self.config.time_step_s
        return hashlib.sha256(json.dumps(layout, sort_keys=True).encode()).hexdigest()[:16]


def build_vocabulary(config: Optional[VocabConfig] = None) -> Vocabulary:
    cfg = config or VocabConfig()
    sizes = {
        "instrument": cfg.num_programs,
        "note": cfg.num_pitches,
        "onoff": cfg.num_velocities,
        "time": cfg.num_times,
        "drum": cfg.num_drums,
        "end_tie": 1,
        "eos": 1,
        "pad": 1 if cfg.with_pad else 0,
    }
    ranges = {}
    pos = 0
    for name in _GROUPS:
        if sizes[name]:
            ranges[name] = (pos, pos + sizes[name])
            pos += sizes[name]
    return Vocabulary(cfg, ranges)


# ----------------------------------------------------------- instrument map

@dataclass(frozen=True)
class InstrumentMap:
    version: int
    class_names: tuple
    program_to_class: tuple  # index: program

    def representative(self, class_id: int) -> int:
        """Lowest program mapped to ``class_id``; used as its canonical program."""
        return self.program_to_class.index(class_id)


def load_instrument_map(path=None) -> InstrumentMap:
    """Read a ``program class_id`` table (see data/instrument_map.txt)."""
    if path is None:
        text = resources.files("specdiff.data").joinpath("instrument_map.txt").read_text()
    else:
        text = Path(path).read_text()
    version = None
    names = {}
    table = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "version":
            version = int(parts[1])
        elif parts[0] == "class":
            names[int(parts[1])] = " ".join(parts[2:])
        elif len(parts) == 2:
            table[int(parts[0])] = int(parts[1])
        else:
            raise ValueError(f"{path or 'instrument_map.txt'}:{lineno}: cannot parse {raw!r}")
    if version is None:
        raise ValueError("instrument map has no version line")
    if sorted(table) != list(range(128)):
        raise ValueError("instrument map must assign every program 0-127")
    if any(not 0 <= c < DRUM_CLASS for c in table.values()):
        raise ValueError(f"non-drum class ids must lie in 0..{DRUM_CLASS - 1}")
    class_names = tuple(names.get(i, f"class {i}") for i in range(DRUM_CLASS + 1))
    return InstrumentMap(version, class_names, tuple(table[p] for p in range(128)))


_DEFAULT_MAP: Optional[InstrumentMap] = None


def default_instrument_map() -> InstrumentMap:
    global _DEFAULT_MAP
    if _DEFAULT_MAP is None:
        _DEFAULT_MAP = load_instrument_map()
    return _DEFAULT_MAP


def map_instrument(program: int, is_drum: bool, table: Optional[InstrumentMap] = None) -> int:
    if not 0 <= program <= 127:
        raise ValueError(f"program out of range: {program}")
    if is_drum:
        return DRUM_CLASS
    return (table or default_instrument_map()).program_to_class[program]


def canonical_program(program: int, table: Optional[InstrumentMap] = None) -> int:
    table = table or default_instrument_map()
    return table.representative(map_instrument(program, False, table))


# ------------------------------------------------------------------ windows

@dataclass(frozen=True)
class SegmentWindow:
    start_s: float
    duration_s: float = SEGMENT_SECONDS

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_s / FRAME_SECONDS))


def _tick(seconds: float, step: float) -> int:
    # half-up rounding with a small guard against float noise
    return int(math.floor(seconds / step + 0.5 + 1e-9))


def _grid_ticks(window: SegmentWindow, vocab: Vocabulary) -> tuple[int, int]:
    step = vocab.config.time_step_s
    start = window.start_s / step
    if abs(start - round(start)) > 1e-6:
        raise ValueError(f"window start {window.start_s} is not on the {step} s grid")
    nbins = window.duration_s / step
    if abs(nbins - round(nbins)) > 1e-6 or round(nbins) > vocab.config.num_times:
        raise ValueError(f"window of {window.duration_s} s does not fit {vocab.config.num_times} time bins")
    return int(round(start)), int(round(nbins))


@dataclass(frozen=True)
class _QNote:
    on: int  # absolute grid ticks
    off: Optional[int]
    pitch: int
    program: int  # canonical
    cls: int
    is_drum: bool


def _quantize(notes: Sequence[TimedNote], vocab: Vocabulary, table: InstrumentMap) -> list[_QNote]:
    step = vocab.config.time_step_s
    out = []
    for n in notes:
        on = _tick(n.onset_s, step)
        if n.is_drum:
            out.append(_QNote(on, None, n.pitch, 0, DRUM_CLASS, True))
            continue
        off = max(_tick(n.offset_s, step), on + 1)
        cls = map_instrument(n.program, False, table)
        out.append(_QNote(on, off, n.pitch, table.representative(cls), cls, False))
    # one sounding note per (class, pitch): trim overlaps at the next onset
    out.sort(key=lambda q: (q.cls, q.pitch, q.on, q.off or 0))
    trimmed = []
    for q in out:
        prev = trimmed[-1] if trimmed else None
        if prev and not q.is_drum and (prev.cls, prev.pitch) == (q.cls, q.pitch) and prev.off > q.on:
            if prev.on == q.on:
                # same onset: keep the longer one
                trimmed[-1] = _QNote(prev.on, max(prev.off, q.off), q.pitch, q.program, q.cls, False)
                continue
            trimmed[-1] = _QNote(prev.on, q.on, prev.pitch, prev.program, prev.cls, False)
        if prev and q.is_drum and (prev.cls, prev.pitch, prev.on) == (q.cls, q.pitch, q.on):
            continue
        trimmed.append(q)
    return trimmed


def _intersects(q: _QNote, start: int, nbins: int) -> bool:
    if q.is_drum:
        return start <= q.on < start + nbins
    return q.on < start + nbins and q.off > start


def _encode_quantized(qnotes, start, nbins, vocab, max_len) -> list[int]:
    ties = []
    events = []  # (tick, is_on, cls, pitch, tokens)
    for q in qnotes:
        if not _intersects(q, start, nbins):
            raise ValueError(f"note at tick {q.on} lies outside window [{start}, {start + nbins})")
        rel_on = q.on - start
        if q.is_drum:
            events.append((rel_on, 1, q.cls, q.pitch, [vocab.drum(q.pitch)]))
            continue
        rel_off = q.off - start
        if rel_on < 0:
            ties.append((q.cls, q.pitch, q.program))
        else:
            events.append((rel_on, 1, q.cls, q.pitch,
                           [vocab.instrument(q.program), vocab.onoff(True), vocab.note(q.pitch)]))
        if rel_off < nbins:
            events.append((rel_off, 0, q.cls, q.pitch,
                           [vocab.instrument(q.program), vocab.onoff(False), vocab.note(q.pitch)]))

    seq = []
    for _, pitch, program in sorted(ties):
        seq += [vocab.instrument(program), vocab.note(pitch)]
    seq.append(vocab.end_tie)
    if len(seq) + 1 > max_len:
        warnings.warn(f"tie section alone exceeds {max_len} tokens; truncating", TokenizerWarning)
        seq = seq[:max_len - 2] + [vocab.end_tie]
        return seq + [vocab.eos]

    current = None
    for tick, _, _, _, toks in sorted(events, key=lambda e: e[:4]):
        chunk = ([vocab.time(tick)] if tick != current else []) + toks
        if len(seq) + len(chunk) + 1 > max_len:
            warnings.warn(f"segment needs more than {max_len} tokens; dropping events from "
                          f"time bin {tick} on", TokenizerWarning)
            break
        seq += chunk
        current = tick
    seq.append(vocab.eos)
    return seq


def encode_segment(notes: Sequence[TimedNote], window: SegmentWindow, vocab: Vocabulary,
                   table: Optional[InstrumentMap] = None, max_len: int = MAX_TOKENS) -> list[int]:
    """Serialize the notes overlapping ``window`` into one token sequence.

    Every note must overlap the window (after quantization); anything else is
    rejected with ValueError. Sequences longer than ``max_len`` are cut at an
    event boundary with a warning.
    """
    table = table or default_instrument_map()
    start, nbins = _grid_ticks(window, vocab)
    return _encode_quantized(_quantize(notes, vocab, table), start, nbins, vocab, max_len)


@dataclass
class DecodedSegment:
    notes: list  # TimedNote, clipped to the window
    tied_in: set = field(default_factory=set)  # indices of notes continuing from before the window
    tied_out: set = field(default_factory=set)  # indices of notes still sounding at window end


def decode_segment(tokens: Sequence[int], window: SegmentWindow, vocab: Vocabulary) -> DecodedSegment:
    """Inverse of :func:`encode_segment`.

    Tied-in notes get the window start as onset, notes left open get the
    window end as offset; both are flagged by index in the result.
    """
    step = vocab.config.time_step_s
    _, nbins = _grid_ticks(window, vocab)
    toks = [int(t) for t in tokens]
    names = [vocab.group_of(t) for t in toks]

    pos = 0
    tie_keys = []
    while True:
        if pos >= len(toks):
            raise TokenGrammarError("missing EndTieSection", pos)
        name, value = names[pos]
        if name == "end_tie":
            pos += 1
            break
        if name != "instrument" or pos + 1 >= len(toks) or names[pos + 1][0] != "note":
            raise TokenGrammarError(f"expected (Instrument, Note) in tie section, got {name}", pos)
        tie_keys.append((value, names[pos + 1][1]))
        pos += 2

    # key -> (onset tick, tied_in)
    active: dict[tuple[int, int], tuple[int, bool]] = {k: (0, True) for k in tie_keys}
    closed = []  # (on, off, program, pitch, tied_in, tied_out)
    drums = []
    current = None
    saw_eos = False
    while pos < len(toks):
        name, value = names[pos]
        if name == "eos":
            saw_eos = True
            pos += 1
            break
        if name == "time":
            if current is not None and value < current:
                raise TokenGrammarError(f"time moves backwards ({current} -> {value})", pos)
            if value >= nbins:
                raise TokenGrammarError(f"time bin {value} beyond window of {nbins} bins", pos)
            current = value
            pos += 1
            continue
        if current is None:
            raise TokenGrammarError(f"{name} token before any Time token", pos)
        if name == "drum":
            drums.append((current, value))
            pos += 1
            continue
        if name != "instrument":
            raise TokenGrammarError(f"unexpected {name} token", pos)
        if pos + 2 >= len(toks) or names[pos + 1][0] != "onoff" or names[pos + 2][0] != "note":
            raise TokenGrammarError("Instrument must be followed by OnOff and Note", pos)
        program, is_on, pitch = value, names[pos + 1][1], names[pos + 2][1]
        key = (program, pitch)
        if key in active:
            on, tied = active.pop(key)
            if current > on or (tied and current == on and not is_on):
                closed.append((on, current, program, pitch, tied, False))
        elif not is_on:
            warnings.warn(f"Off for silent note {key} at token position {pos}", TokenizerWarning)
        if is_on:
            active[key] = (current, False)
        pos += 3
    if not saw_eos:
        raise TokenGrammarError("missing EOS", pos)
    for name, _ in names[pos:]:
        if name != "pad":
            raise TokenGrammarError("non-PAD token after EOS", pos)

    for (program, pitch), (on, tied) in active.items():
        closed.append((on, nbins, program, pitch, tied, True))

    out = DecodedSegment([])
    items = [(on, off, prog, pitch, False, ti, to) for on, off, prog, pitch, ti, to in closed]
    items += [(on, None, 0, pitch, True, False, False) for on, pitch in drums]
    items.sort(key=lambda it: (it[0], it[4], it[2], it[3]))
    for on, off, program, pitch, is_drum, ti, to in items:
        onset = window.start_s + on * step
        if is_drum:
            out.notes.append(TimedNote(onset, None, pitch, 0, True))
            continue
        if off <= on:
            continue
        if ti:
            out.tied_in.add(len(out.notes))
        if to:
            out.tied_out.add(len(out.notes))
        out.notes.append(TimedNote(onset, window.start_s + off * step, pitch, program, False))
    return out


# -------------------------------------------------------------- whole tracks

def track_end_ticks(qnotes) -> int:
    return max((q.on + 1 if q.is_drum else q.off for q in qnotes), default=0)


def split_track(notes: Sequence[TimedNote], vocab: Vocabulary,
                segment_duration: float = SEGMENT_SECONDS,
                table: Optional[InstrumentMap] = None,
                max_len: int = MAX_TOKENS) -> list[tuple[SegmentWindow, list[int]]]:
    """Cut a track into contiguous windows and encode each one.

    The last window is kept whole (ceil rule) and at least one window is
    always produced, even for an empty track.
    """
    table = table or default_instrument_map()
    probe = SegmentWindow(0.0, segment_duration)
    _, nbins = _grid_ticks(probe, vocab)
    qnotes = _quantize(notes, vocab, table)
    count = max(1, math.ceil(track_end_ticks(qnotes) / nbins))
    out = []
    for k in range(count):
        start = k * nbins
        window = SegmentWindow(round(start * vocab.config.time_step_s, 9), segment_duration)
        inside = [q for q in qnotes if _intersects(q, start, nbins)]
        out.append((window, _encode_quantized(inside, start, nbins, vocab, max_len)))
    return out


def decode_track(segments: Sequence[tuple[SegmentWindow, Sequence[int]]],
                 vocab: Vocabulary) -> list[TimedNote]:
    """Decode consecutive segments and stitch tied notes back together."""
    notes: list[list] = []  # [onset, offset, pitch, program, is_drum]
    open_from_prev: dict[tuple[int, int], int] = {}
    for window, tokens in segments:
        seg = decode_segment(tokens, window, vocab)
        still_open = {}
        for i, n in enumerate(seg.notes):
            key = (n.program, n.pitch)
            if i in seg.tied_in and key in open_from_prev:
                idx = open_from_prev[key]
                notes[idx][1] = n.offset_s
            else:
                idx = len(notes)
                notes.append([n.onset_s, n.offset_s, n.pitch, n.program, n.is_drum])
            if i in seg.tied_out:
                still_open[key] = idx
        open_from_prev = still_open
    result = [TimedNote(on, off, pitch, program, drum) for on, off, pitch, program, drum in notes]
    result.sort(key=lambda n: (n.onset_s, n.is_drum, n.program, n.pitch))
    return result


def save_tokens(path, tokens: Sequence[int]) -> None:
    Path(path).write_text(" ".join(str(int(t)) for t in tokens) + "\n")


def load_tokens(path) -> list[int]:
    return [int(t) for t in Path(path).read_text().split()]
