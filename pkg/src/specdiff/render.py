"""Whole-track inference: per-segment sampling, concatenation, inversion, diagnostics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError
from .diffusion import GuidanceConfig, reverse_sample
from .midi import midi_to_notes
from .model import DIFFUSION
from .note_events import build_vocabulary, split_track
from .spectrogram import invert_mel, unscale_from_model_range

SEGMENT_FRAMES = 256
AR_DITHER_VARIANCE = 0.2


@dataclass(frozen=True)
class RenderOptions:
    guidance_weight: float = 2.0
    num_steps: int = 1000
    seed: int = 0
    use_context: bool = True
    vocoder_iters: int = 64
    boundary_window: int = 4
    plus_one: bool = False

    def __post_init__(self):
        GuidanceConfig(0.1, self.guidance_weight, self.plus_one)
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.vocoder_iters < 1:
            raise ValueError("vocoder_iters must be >= 1")


@dataclass
class RenderedTrack:
    mel: np.ndarray  # (segments * 256, 128) log-mel
    scaled: np.ndarray  # same frames in model range
    audio: np.ndarray
    segment_times: list = field(default_factory=list)
    vocoder_time: float = 0.0
    boundaries: dict = field(default_factory=dict)
    sample_rate: int = 16000

    @property
    def duration_s(self) -> float:
        return len(self.audio) / self.sample_rate

    @property
    def wall_time(self) -> float:
        return float(sum(self.segment_times) + self.vocoder_time)

    @property
    def rt_factor(self) -> float:
        return rt_factor(self.duration_s, self.wall_time)

    def diagnostics(self) -> dict:
        return {
            "num_segments": len(self.segment_times),
            "num_frames": int(self.mel.shape[0]),
            "duration_s": self.duration_s,
            "segment_wall_times_s": [float(t) for t in self.segment_times],
            "vocoder_wall_time_s": float(self.vocoder_time),
            "wall_time_s": self.wall_time,
            "rt_factor": self.rt_factor,
            "boundary": self.boundaries,
        }


def rt_factor(audio_duration_s: float, wall_time_s: float) -> float:
    """Seconds of audio produced per second of wall clock."""
    if wall_time_s <= 0:
        raise ValueError("wall time must be positive")
    return audio_duration_s / wall_time_s


def boundary_discontinuity(mel: np.ndarray, boundary_frames, window: int = 4) -> dict:
    """|RMS(window frames after) - RMS(window frames before)| at each boundary.

    RMS runs over frequency and the window together. Boundaries without a
    full window on both sides are skipped.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    stats, used = [], []
    for b in boundary_frames:
        b = int(b)
        if b - window < 0 or b + window > mel.shape[0]:
            continue
        before = np.sqrt(np.mean(mel[b - window:b] ** 2))
        after = np.sqrt(np.mean(mel[b:b + window] ** 2))
        stats.append(float(abs(after - before)))
        used.append(b)
    return {"frames": used, "values": stats,
            "mean": float(np.mean(stats)) if stats else math.nan, "window": window}


def ar_dither_std(lo: float, hi: float) -> float:
    """Dither std in model range for a variance of 0.2 in log-magnitude units."""
    return math.sqrt(AR_DITHER_VARIANCE) * 2.0 / (hi - lo)


def load_notes(midi) -> list:
    """Accept a path, raw MIDI bytes, or an already-parsed note list."""
    if isinstance(midi, (str, Path)):
        return midi_to_notes(Path(midi).read_bytes())
    if isinstance(midi, (bytes, bytearray)):
        return midi_to_notes(bytes(midi))
    return list(midi)


def _segment_seed(seed: int, k: int) -> int:
    return (seed * 1_000_003 + k) & 0x7FFF_FFFF_FFFF_FFFF


def _check_compatible(ckpt: Checkpoint, opts: RenderOptions):
    vocab = build_vocabulary()
    if ckpt.vocab_digest != vocab.digest():
        raise CheckpointError("checkpoint vocabulary does not match this build")
    cfg = ckpt.config
    if cfg.mel_bins != ckpt.spec.mel_bins or cfg.decoder_positions != SEGMENT_FRAMES:
        raise CheckpointError("checkpoint model and spectrogram configs disagree")
    return vocab


def render_segment(ckpt: Checkpoint, tokens, context: Optional[np.ndarray], opts: RenderOptions,
                   segment_index: int = 0) -> np.ndarray:
    """One 256x128 segment in model range."""
    model = ckpt.model
    model.eval()
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)[None]
    ctx = None
    if model.cfg.use_context:
        ctx = torch.zeros(1, SEGMENT_FRAMES, model.cfg.mel_bins)
        if context is not None and opts.use_context:
            ctx = torch.as_tensor(np.clip(context, -1.0, 1.0), dtype=torch.float32)[None]
    seed = _segment_seed(opts.seed, segment_index)
    with torch.no_grad():
        bundle = model.condition(tokens, ctx, pad_to=tokens.shape[1])
        if model.cfg.mode == DIFFUSION:
            null = model.null_bundle(1)

            def denoiser(x, t, cond):
                return model.diffusion_decode(x, t, null if cond is None else cond)

            guidance = GuidanceConfig(0.1, opts.guidance_weight, opts.plus_one)
            out = reverse_sample(denoiser, bundle, (1, SEGMENT_FRAMES, model.cfg.mel_bins),
                                 opts.num_steps, guidance, seed)
        else:
            std = ar_dither_std(ckpt.lo, ckpt.hi)
            gen = torch.Generator().manual_seed(seed)
            out = model.autoregressive_generate(bundle, SEGMENT_FRAMES, std, gen).clamp(-1, 1)
    return out[0].numpy().astype(np.float32)


def render_track(midi, ckpt: Checkpoint, opts: RenderOptions = RenderOptions()) -> RenderedTrack:
    """Render every 5.12 s window in order, feeding each result to the next as context."""
    vocab = _check_compatible(ckpt, opts)
    notes = load_notes(midi)
    segments = split_track(notes, vocab)
    scaled, times = [], []
    previous = None
    for k, (_, tokens) in enumerate(segments):
        started = time.perf_counter()
        seg = render_segment(ckpt, tokens, previous, opts, k)
        times.append(time.perf_counter() - started)
        scaled.append(seg)
        previous = seg if opts.use_context else None
    scaled_all = np.concatenate(scaled, axis=0)
    mel = unscale_from_model_range(scaled_all, ckpt.lo, ckpt.hi).astype(np.float32)
    started = time.perf_counter()
    audio = invert_mel(mel, opts.vocoder_iters, ckpt.spec, seed=opts.seed)
    vocoder_time = time.perf_counter() - started
    bounds = [SEGMENT_FRAMES * k for k in range(1, len(segments))]
    return RenderedTrack(mel, scaled_all, audio.astype(np.float32), times, vocoder_time,
                         boundary_discontinuity(scaled_all, bounds, opts.boundary_window),
                         ckpt.spec.sample_rate)
