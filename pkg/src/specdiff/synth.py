"""Deterministic additive synthesizer used to make paired (notes, audio) data."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .note_events import DRUM_CLASS, default_instrument_map, map_instrument

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Timbre:
    family: str  # sine | saw | square | triangle | pluck
    harmonics: int = 8
    attack: float = 0.01
    decay: float = 0.1
    sustain: float = 0.7
    release: float = 0.05
    noise: float = 0.0


def _default_timbres() -> dict:
    families = ["pluck", "pluck", "triangle", "square", "pluck", "pluck", "saw", "pluck",
                "saw", "saw", "saw", "saw", "saw", "pluck", "pluck", "saw", "saw", "triangle",
                "square", "square", "saw", "saw", "triangle", "saw", "square", "square",
                "square", "square", "square", "square", "square", "sine", "saw", "triangle"]
    timbres = {}
    for cls, fam in enumerate(families):
        harmonics = 4 + (cls * 5) % 12
        if fam == "pluck":
            timbres[cls] = Timbre(fam, harmonics, attack=0.005, decay=0.4, sustain=0.2, release=0.08)
        else:
            timbres[cls] = Timbre(fam, harmonics, attack=0.02 + 0.002 * (cls % 5), decay=0.1,
                                  sustain=0.8, release=0.06, noise=0.01 * (cls % 3))
    return timbres


@dataclass(frozen=True)
class OracleSynthConfig:
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    note_gain: float = 0.3
    peak: float = 0.5
    drum_length_s: float = 0.15
    timbres: dict = field(default_factory=_default_timbres)


def midi_to_hz(pitch: int) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def _harmonic_amps(t: Timbre) -> np.ndarray:
    k = np.arange(1, t.harmonics + 1, dtype=np.float64)
    if t.family == "sine":
        return (k == 1).astype(np.float64)
    if t.family == "saw":
        return 1.0 / k
    if t.family == "square":
        return np.where(k % 2 == 1, 1.0 / k, 0.0)
    if t.family == "triangle":
        return np.where(k % 2 == 1, 1.0 / k ** 2, 0.0)
    if t.family == "pluck":
        return 1.0 / k ** 1.5
    raise ValueError(f"unknown waveform family {t.family!r}")


def _envelope(n_on: int, n_total: int, t: Timbre, sr: int) -> np.ndarray:
    idx = np.arange(n_total) / sr
    a, d = max(t.attack, 1.0 / sr), max(t.decay, 1.0 / sr)
    env = np.where(idx < a, idx / a, t.sustain + (1 - t.sustain) * np.exp(-(idx - a) / d))
    if t.family == "pluck":
        env = np.where(idx < a, idx / a, np.exp(-(idx - a) / (3 * d)))
    release_start = n_on / sr
    level = env[min(n_on, n_total - 1)] if n_total else 0.0
    rel = level * np.exp(-(idx - release_start) / max(t.release, 1.0 / sr))
    return np.where(idx < release_start, env, rel)


def _note_rng(cfg: OracleSynthConfig, *key) -> np.random.Generator:
    digest = hashlib.sha256(repr((cfg.seed,) + key).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def render_note(note, cfg: OracleSynthConfig) -> tuple[int, np.ndarray]:
    """One note's samples and its start index."""
    sr = cfg.sample_rate
    start = int(round(note.onset_s * sr))
    cls = map_instrument(note.program, note.is_drum)
    if cls == DRUM_CLASS:
        n = int(cfg.drum_length_s * sr)
        idx = np.arange(n) / sr
        rng = _note_rng(cfg, "drum", note.pitch, start)
        body = np.sin(2 * np.pi * (40.0 + 6.0 * (note.pitch - 35)) * idx)
        noise = rng.standard_normal(n) * (0.2 + 0.02 * (note.pitch % 30))
        return start, cfg.note_gain * (body + noise) * np.exp(-idx / 0.04)
    timbre = cfg.timbres[cls]
    n_on = max(1, int(round((note.offset_s - note.onset_s) * sr)))
    n_total = n_on + int(5 * timbre.release * sr)
    idx = np.arange(n_total) / sr
    f0 = midi_to_hz(note.pitch)
    amps = _harmonic_amps(timbre)
    k = np.arange(1, len(amps) + 1)
    keep = (k * f0 < sr / 2) & (amps > 0)
    wave = (amps[keep, None] * np.sin(2 * np.pi * f0 * k[keep, None] * idx[None, :])).sum(axis=0)
    wave /= np.abs(amps[keep]).sum() or 1.0
    if timbre.noise:
        wave = wave + timbre.noise * _note_rng(cfg, cls, note.pitch, start).standard_normal(n_total)
    return start, cfg.note_gain * wave * _envelope(n_on, n_total, timbre, sr)


def synthesize_oracle(notes, cfg: OracleSynthConfig = OracleSynthConfig(), num_samples: int | None = None,
                      normalize: bool = True) -> np.ndarray:
    """Sum of per-note tones; peak-normalized to ``cfg.peak`` unless disabled.

    Output length is ``num_samples`` when given, otherwise long enough to
    hold every note's release.
    """
    parts = [render_note(n, cfg) for n in notes]
    end = max((s + len(w) for s, w in parts), default=0)
    length = end if num_samples is None else num_samples
    out = np.zeros(length)
    for start, wave in parts:
        stop = min(start + len(wave), length)
        if stop > start:
            out[start:stop] += wave[: stop - start]
    if normalize:
        peak = np.max(np.abs(out)) if length else 0.0
        if peak > 0:
            out *= cfg.peak / peak
    return out


def class_programs() -> list[int]:
    """Canonical program for every pitched class."""
    table = default_instrument_map()
    return [table.representative(c) for c in range(DRUM_CLASS)]
