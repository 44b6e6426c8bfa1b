"""Synthetic paired data and the training loops for both decoder modes."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .diffusion import ddpm_loss, q_sample
from .midi import TimedNote, notes_from_json, notes_to_json, notes_to_midi
from .model import DIFFUSION, SpectrogramTransformer, preset
from .note_events import SEGMENT_SECONDS, Vocabulary, build_vocabulary, split_track
from .spectrogram import (
    DEFAULT_SPEC,
    SpecConfig,
    compute_mel,
    range_constants,
    read_wav,
    scale_to_model_range,
    write_wav,
)
from .synth import OracleSynthConfig, class_programs, synthesize_oracle

log = logging.getLogger(__name__)

SEGMENT_FRAMES = 256
DATASET_VERSION = 1


class TrainingError(RuntimeError):
    pass


class DatasetVersionError(ValueError):
    pass


# ------------------------------------------------------------------ dataset

@dataclass
class SegmentExample:
    tokens: np.ndarray  # int64
    target: np.ndarray  # (256, 128) in [-1, 1]
    context: np.ndarray  # (256, 128); zeros for the first segment of a track
    track_id: int
    segment_index: int


@dataclass
class Track:
    notes: list
    audio: np.ndarray
    mel: np.ndarray  # raw log-mel for the whole (padded) track


@dataclass(frozen=True)
class DatasetConfig:
    n_tracks: int = 8
    min_segments: int = 1
    max_segments: int = 2
    max_instruments: int = 3
    drum_probability: float = 0.3
    notes_per_second: float = 3.0
    seed: int = 0


@dataclass
class PairedDataset:
    examples: list
    tracks: list
    lo: float
    hi: float
    spec: SpecConfig = DEFAULT_SPEC
    config: Optional[DatasetConfig] = None

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.float64([self.lo, self.hi]).tobytes())
        for ex in self.examples:
            h.update(np.int64([ex.track_id, ex.segment_index]).tobytes())
            h.update(np.asarray(ex.tokens, dtype=np.int64).tobytes())
            h.update(np.asarray(ex.target, dtype=np.float32).tobytes())
            h.update(np.asarray(ex.context, dtype=np.float32).tobytes())
        return h.hexdigest()

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "tracks").mkdir(parents=True, exist_ok=True)
        pad = build_vocabulary().pad
        width = max(len(ex.tokens) for ex in self.examples)
        tokens = np.full((len(self.examples), width), pad, dtype=np.int64)
        for i, ex in enumerate(self.examples):
            tokens[i, : len(ex.tokens)] = ex.tokens
        np.savez_compressed(
            d / "examples.npz",
            tokens=tokens,
            lengths=np.array([len(ex.tokens) for ex in self.examples]),
            targets=np.stack([ex.target for ex in self.examples]).astype(np.float32),
            contexts=np.stack([ex.context for ex in self.examples]).astype(np.float32),
            track_ids=np.array([ex.track_id for ex in self.examples]),
            segment_index=np.array([ex.segment_index for ex in self.examples]),
        )
        for i, tr in enumerate(self.tracks):
            stem = d / "tracks" / f"track_{i:04d}"
            stem.with_suffix(".mid").write_bytes(notes_to_midi(tr.notes))
            stem.with_suffix(".json").write_text(json.dumps(notes_to_json(tr.notes)))
            write_wav(stem.with_suffix(".wav"), tr.audio, self.spec.sample_rate)
        manifest = {
            "dataset_version": DATASET_VERSION,
            "lo": self.lo,
            "hi": self.hi,
            "spec_config": dataclasses.asdict(self.spec),
            "config": dataclasses.asdict(self.config) if self.config else None,
            "n_examples": len(self.examples),
            "n_tracks": len(self.tracks),
            "digest": self.digest(),
        }
        (d / "dataset.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "PairedDataset":
        d = Path(directory)
        if not (d / "dataset.json").exists():
            raise FileNotFoundError(d / "dataset.json")
        manifest = json.loads((d / "dataset.json").read_text())
        if manifest.get("dataset_version") != DATASET_VERSION:
            raise DatasetVersionError(f"{d}: dataset version {manifest.get('dataset_version')}, "
                             f"expected {DATASET_VERSION}")
        spec = SpecConfig(**manifest["spec_config"])
        arrays = np.load(d / "examples.npz")
        examples = [
            SegmentExample(arrays["tokens"][i, : arrays["lengths"][i]], arrays["targets"][i],
                           arrays["contexts"][i], int(arrays["track_ids"][i]),
                           int(arrays["segment_index"][i]))
            for i in range(len(arrays["lengths"]))
        ]
        tracks = []
        for i in range(manifest["n_tracks"]):
            stem = d / "tracks" / f"track_{i:04d}"
            notes = notes_from_json(json.loads(stem.with_suffix(".json").read_text()))
            audio = read_wav(stem.with_suffix(".wav"), spec.sample_rate)
            tracks.append(Track(notes, audio, compute_mel(audio, spec)))
        config = DatasetConfig(**manifest["config"]) if manifest.get("config") else None
        return cls(examples, tracks, manifest["lo"], manifest["hi"], spec, config)


def random_track(rng: random.Random, n_segments: int, cfg: DatasetConfig) -> list[TimedNote]:
    """A random multi-instrument track that spans exactly ``n_segments`` windows."""
    length = n_segments * SEGMENT_SECONDS
    programs = rng.sample(class_programs(), rng.randint(1, cfg.max_instruments))
    notes = []
    for program in programs:
        t = rng.uniform(0.0, 0.5)
        while t < length - 0.3:
            dur = rng.choice([0.1, 0.2, 0.3, 0.5, 0.8])
            end = min(t + dur, length - 0.05)
            if end - t >= 0.05:
                notes.append(TimedNote(round(t, 2), round(end, 2), rng.randint(48, 84), program))
            t = end + rng.expovariate(cfg.notes_per_second / len(programs))
    if rng.random() < cfg.drum_probability:
        step = 0.25
        for k in range(int((length - 0.2) / step)):
            if rng.random() < 0.5:
                notes.append(TimedNote(round(k * step, 2), None, rng.choice([36, 38, 42, 46]), 0, True))
    # guarantee the final window is reached
    notes.append(TimedNote(round(length - 0.3, 2), round(length - 0.1, 2), rng.randint(48, 84), programs[0]))
    notes.sort(key=lambda n: (n.onset_s, n.is_drum, n.program, n.pitch))
    return notes


def build_examples(tracks: list[Track], vocab: Vocabulary, lo: float, hi: float,
                   spec: SpecConfig = DEFAULT_SPEC) -> list[SegmentExample]:
    examples = []
    for tid, tr in enumerate(tracks):
        segments = split_track(tr.notes, vocab)
        previous = np.zeros((SEGMENT_FRAMES, spec.mel_bins), dtype=np.float32)
        for k, (_, tokens) in enumerate(segments):
            raw = tr.mel[k * SEGMENT_FRAMES:(k + 1) * SEGMENT_FRAMES]
            target = scale_to_model_range(raw, lo, hi).astype(np.float32)
            examples.append(SegmentExample(np.asarray(tokens, dtype=np.int64), target, previous, tid, k))
            previous = target
    return examples


def make_track(notes, synth: OracleSynthConfig, vocab: Vocabulary, spec: SpecConfig = DEFAULT_SPEC) -> Track:
    n_windows = len(split_track(notes, vocab))
    audio = synthesize_oracle(notes, synth, num_samples=n_windows * SEGMENT_FRAMES * spec.hop)
    return Track(list(notes), audio, compute_mel(audio, spec))


def make_dataset(n_tracks: int = 8, cfg: Optional[DatasetConfig] = None, seed: Optional[int] = None,
                 synth: Optional[OracleSynthConfig] = None, spec: SpecConfig = DEFAULT_SPEC,
                 scaling: Optional[tuple[float, float]] = None) -> PairedDataset:
    """Random tracks rendered by the oracle synth and cut into segment examples.

    ``scaling`` fixes (lo, hi); by default they come from the 1st / 99.9th
    percentile of every log-mel cell in the generated tracks.
    """
    cfg = dataclasses.replace(cfg or DatasetConfig(), n_tracks=n_tracks,
                              **({} if seed is None else {"seed": seed}))
    synth = synth or OracleSynthConfig(seed=cfg.seed)
    vocab = build_vocabulary()
    rng = random.Random(cfg.seed)
    tracks = []
    for _ in range(cfg.n_tracks):
        notes = random_track(rng, rng.randint(cfg.min_segments, cfg.max_segments), cfg)
        tracks.append(make_track(notes, synth, vocab, spec))
    lo, hi = scaling or range_constants([t.mel for t in tracks])
    return PairedDataset(build_examples(tracks, vocab, lo, hi, spec), tracks, lo, hi, spec, cfg)


def collate(examples, pad_id: int):
    width = max(len(ex.tokens) for ex in examples)
    tokens = torch.full((len(examples), width), pad_id, dtype=torch.long)
    for i, ex in enumerate(examples):
        tokens[i, : len(ex.tokens)] = torch.as_tensor(ex.tokens)
    target = torch.as_tensor(np.stack([ex.target for ex in examples]), dtype=torch.float32)
    context = torch.as_tensor(np.stack([ex.context for ex in examples]), dtype=torch.float32)
    return tokens, target, context


# ------------------------------------------------------------- train steps

def _check_finite(loss: torch.Tensor, model, what: str):
    if not torch.isfinite(loss):
        norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()
                 if not torch.isfinite(p).all()}
        raise TrainingError(f"non-finite {what} loss {loss.item()}; non-finite parameters: "
                            f"{sorted(norms) or 'none'}")


def conditioning_dropout_mask(batch: int, p: float, generator: torch.Generator) -> torch.Tensor:
    """True where an example's conditioning is replaced by the null embedding."""
    return torch.rand(batch, generator=generator) < p


def train_step_diffusion(model: SpectrogramTransformer, optimizer, batch, generator: torch.Generator,
                         cond_dropout_p: float = 0.1) -> float:
    """One optimizer update on the L1 noise-prediction loss; returns the loss."""
    tokens, target, context = batch
    b = target.shape[0]
    t = torch.rand(b, generator=generator)
    eps = torch.randn(target.shape, generator=generator)
    drop = conditioning_dropout_mask(b, cond_dropout_p, generator)
    x_t = q_sample(target, t, eps)
    bundle = model.condition(tokens, context if model.cfg.use_context else None, pad_to=tokens.shape[1])
    eps_pred = model.diffusion_decode(x_t, t, model.memory_with_dropout(bundle, drop))
    loss = ddpm_loss(eps_pred, eps, t)
    _check_finite(loss, model, "diffusion")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def autoregressive_loss(model: SpectrogramTransformer, batch) -> torch.Tensor:
    tokens, target, context = batch
    bundle = model.condition(tokens, context if model.cfg.use_context else None, pad_to=tokens.shape[1])
    return F.mse_loss(model.autoregressive_decode(target, bundle), target)


def train_step_autoregressive(model: SpectrogramTransformer, optimizer, batch,
                              generator: Optional[torch.Generator] = None) -> float:
    """Teacher-forced MSE over all frames; no dither at train time."""
    loss = autoregressive_loss(model, batch)
    _check_finite(loss, model, "autoregressive")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


# -------------------------------------------------------------- train loop

@dataclass
class TrainConfig:
    preset: str = "toy"
    mode: str = DIFFUSION
    use_context: bool = True
    steps: int = 10_000
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"  # constant | cosine
    warmup_steps: int = 0
    cond_dropout_p: float = 0.1
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 1000
    out_dir: str = "run"
    dataset_dir: str = ""
    n_tracks: int = 8
    min_segments: int = 1
    max_segments: int = 2
    resume: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


ENV_PREFIX = "SPECDIFF_"


def _coerce(value: str, kind):
    if kind in (bool, "bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def parse_config_text(text: str, cls=TrainConfig, base=None):
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise KeyError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(value, fields[key])
    return cls(**values)


def apply_env_overrides(cfg, environ=None, prefix: str = ENV_PREFIX):
    """``SPECDIFF_<FIELD>`` environment variables override config fields."""
    environ = os.environ if environ is None else environ
    fields = {f.name: f.type for f in dataclasses.fields(cfg)}
    updates = {}
    for name, kind in fields.items():
        key = prefix + name.upper()
        if key in environ:
            updates[name] = _coerce(environ[key], kind)
    return dataclasses.replace(cfg, **updates)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)  # (step, loss)
    checkpoint_path: Optional[Path] = None


def _select(n: int, batch_size: int, generator: torch.Generator) -> list[int]:
    if batch_size >= n:
        return list(range(n))
    return sorted(torch.randperm(n, generator=generator)[:batch_size].tolist())


def train(config: TrainConfig, dataset: Optional[PairedDataset] = None) -> TrainResult:
    """Train from scratch or resume; writes loss.csv and checkpoints to ``out_dir``.

    Loss rows are the mean training loss over each ``log_every`` window.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary()
    if dataset is None:
        if config.dataset_dir:
            dataset = PairedDataset.load(config.dataset_dir)
        else:
            dataset = make_dataset(config.n_tracks, DatasetConfig(min_segments=config.min_segments,
                                                                  max_segments=config.max_segments),
                                   seed=config.seed)
    torch.manual_seed(config.seed)
    model = SpectrogramTransformer(preset(config.preset, mode=config.mode, use_context=config.use_context,
                                          pad_id=vocab.pad, vocab_size=vocab.size))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    if config.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}")
    generator = torch.Generator().manual_seed(config.seed)
    step = 0
    if config.resume:
        prior = load_checkpoint(config.resume, vocab.digest())
        if prior.config != model.cfg:
            raise CheckpointError(f"{config.resume}: model config differs from the requested one")
        if prior.train_state is None:
            raise CheckpointError(f"{config.resume}: no training state to resume from")
        model.load_state_dict(prior.model.state_dict())
        optimizer.load_state_dict(prior.train_state["optimizer"])
        if "generator" in prior.train_state:
            generator.set_state(prior.train_state["generator"])
        step = prior.train_state["step"]

    ckpt = Checkpoint(model, dataset.spec, dataset.lo, dataset.hi, vocab.digest(),
                      meta={"train_config": config.to_dict(), "dataset_digest": dataset.digest()})
    step_fn = train_step_diffusion if config.mode == DIFFUSION else train_step_autoregressive
    kwargs = {"cond_dropout_p": config.cond_dropout_p} if config.mode == DIFFUSION else {}

    log_path = out / "loss.csv"
    fresh = step == 0 or not log_path.exists()
    losses = []
    window = []
    started = time.perf_counter()
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss", "wall_time"])
        while step < config.steps:
            for group in optimizer.param_groups:
                group["lr"] = learning_rate_at(config, step)
            idx = _select(len(dataset.examples), config.batch_size, generator)
            batch = collate([dataset.examples[i] for i in idx], vocab.pad)
            loss = step_fn(model, optimizer, batch, generator, **kwargs)
            step += 1
            window.append(loss)
            losses.append((step, loss))
            if step % config.log_every == 0:
                writer.writerow([step, f"{np.mean(window):.6f}", f"{time.perf_counter() - started:.3f}"])
                fh.flush()
                window = []
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{step:07d}.ckpt", ckpt, optimizer, generator, step)
    final = out / "checkpoint_final.ckpt"
    save_checkpoint(final, ckpt, optimizer, generator, step)
    return TrainResult(ckpt, losses, final)


def learning_rate_at(config: TrainConfig, step: int) -> float:
    """Linear warmup, then constant or cosine decay to zero at ``steps``."""
    base = config.learning_rate
    if step < config.warmup_steps:
        return base * (step + 1) / config.warmup_steps
    if config.lr_schedule == "cosine":
        span = max(1, config.steps - config.warmup_steps)
        return base * 0.5 * (1 + math.cos(math.pi * min(1.0, (step - config.warmup_steps) / span)))
    return base


def smoothed(values, width: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < width:
        return values.copy()
    return np.convolve(values, np.ones(width) / width, mode="valid")


def final_loss(losses, width: int = 50) -> float:
    """Mean of the last ``width`` per-step losses."""
    tail = [l for _, l in losses[-width:]]
    return float(np.mean(tail)) if tail else math.nan
