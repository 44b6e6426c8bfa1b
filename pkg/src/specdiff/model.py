"""Encoder-decoder Transformer mapping note tokens (+ previous segment) to spectrograms.

Two encoders (note events, spectrogram context) feed a decoder through a
single cross-attention over their concatenated outputs. The decoder runs
either as a diffusion denoiser (bidirectional, FiLM time conditioning) or as
a causal frame-by-frame regressor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DIFFUSION = "diffusion"
AUTOREGRESSIVE = "autoregressive"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    head_dim: int = 32
    mlp_dim: int = 128
    embed_dim: int = 128
    mode: str = DIFFUSION
    use_context: bool = True
    vocab_size: int = 901
    pad_id: int = 900
    mel_bins: int = 128
    max_note_positions: int = 2048
    context_positions: int = 256
    decoder_positions: int = 256
    decorrelate_positions: bool = True
    position_seed: int = 0
    # spectrogram frame projections are multiplied by sqrt(embed_dim) before
    # positions are added, so the sinusoids do not swamp the frame content
    scale_frame_inputs: bool = True

    def __post_init__(self):
        if self.mode not in (DIFFUSION, AUTOREGRESSIVE):
            raise ValueError(f"unknown decoder mode {self.mode!r}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even for sinusoidal encodings")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "toy": dict(num_layers=2, num_heads=4, head_dim=32, mlp_dim=128, embed_dim=128),
    "small": dict(num_layers=8, num_heads=6, head_dim=64, mlp_dim=1024, embed_dim=512),
    "base": dict(num_layers=12, num_heads=12, head_dim=64, mlp_dim=2048, embed_dim=758),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# --------------------------------------------------------------- encodings

def decorrelated_positions(length: int, dim: int, stack_seed: Optional[int] = None) -> np.ndarray:
    """Sinusoidal encodings; with a seed, channels get a random phase and order.

    ``stack_seed=None`` gives the plain interleaved sin/cos table.
    """
    if dim % 2:
        raise ValueError("dim must be even")
    freqs = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    chan_freq = np.repeat(freqs, 2)
    chan_phase = np.tile([0.0, np.pi / 2], dim // 2)
    order = np.arange(dim)
    if stack_seed is not None:
        rng = np.random.default_rng(stack_seed)
        chan_phase = chan_phase + rng.uniform(0, 2 * np.pi, dim)
        order = rng.permutation(dim)
    table = np.sin(np.arange(length)[:, None] * chan_freq[None, :] + chan_phase[None, :])
    return table[:, order]


def timestep_sinusoid(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Transformer-style sinusoid of a continuous time, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * scale)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


# ------------------------------------------------------------------ blocks

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.q = nn.Linear(dim, inner, bias=False)
        self.k = nn.Linear(dim, inner, bias=False)
        self.v = nn.Linear(dim, inner, bias=False)
        self.o = nn.Linear(inner, dim, bias=False)
        self.record = False
        self.last_weights = None

    def forward(self, x, memory=None, key_mask=None, causal=False):
        memory = x if memory is None else memory
        b, lq, _ = x.shape
        lk = memory.shape[1]

        def split(t, n):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x), lq), split(self.k(memory), lk), split(self.v(memory), lk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        allowed = torch.ones(b, 1, lq, lk, dtype=torch.bool)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if causal:
            allowed = allowed & torch.ones(lq, lk, dtype=torch.bool).tril()
        scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
        # rows with no visible key get all-zero weights
        weights = torch.softmax(scores, dim=-1) * allowed
        if self.record:
            self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, lq, self.heads * self.head_dim)
        return self.o(out)


class GatedMLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.wi_0 = nn.Linear(dim, hidden, bias=False)
        self.wi_1 = nn.Linear(dim, hidden, bias=False)
        self.wo = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.wo(F.gelu(self.wi_0(x), approximate="tanh") * self.wi_1(x))


class FiLM(nn.Module):
    """Per-channel scale and shift from a conditioning vector; identity at init."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        with torch.no_grad():
            self.proj.bias.copy_(torch.cat([torch.ones(channels), torch.zeros(channels)]))

    def forward(self, x, cond):
        scale, shift = self.proj(cond).chunk(2, dim=-1)
        return scale[:, None, :] * x + shift[:, None, :]


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, t):
        return self.fc2(F.silu(self.fc1(timestep_sinusoid(t, self.dim))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.embed_dim)
        self.attn = Attention(cfg.embed_dim, cfg.num_heads, cfg.head_dim)
        self.norm2 = RMSNorm(cfg.embed_dim)
        self.mlp = GatedMLP(cfg.embed_dim, cfg.mlp_dim)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), key_mask=mask)
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, length: int, seed: Optional[int]):
        super().__init__()
        pe = decorrelated_positions(length, cfg.embed_dim, seed)
        self.register_buffer("positions", torch.tensor(pe, dtype=torch.float32), persistent=False)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.norm = RMSNorm(cfg.embed_dim)

    def forward(self, x, mask):
        x = x + self.positions[: x.shape[1]].to(x.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x) * mask[..., None].to(x.dtype)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, film: bool):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = RMSNorm(d)
        self.self_attn = Attention(d, cfg.num_heads, cfg.head_dim)
        self.norm2 = RMSNorm(d)
        self.cross_attn = Attention(d, cfg.num_heads, cfg.head_dim)
        self.norm3 = RMSNorm(d)
        self.mlp = GatedMLP(d, cfg.mlp_dim)
        self.film_self = FiLM(d, d) if film else None
        self.film_cross = FiLM(d, d) if film else None

    def forward(self, x, memory, memory_mask, temb=None, causal=False):
        h = self.norm1(x)
        if self.film_self is not None:
            h = self.film_self(h, temb)
        x = x + self.self_attn(h, causal=causal)
        h = self.cross_attn(self.norm2(x), memory, memory_mask)
        if self.film_cross is not None:
            h = self.film_cross(h, temb)
        x = x + h
        return x + self.mlp(self.norm3(x))


# -------------------------------------------------------------- conditioning

@dataclass
class ConditioningBundle:
    note_memory: Optional[torch.Tensor]  # (B, L, E)
    note_mask: Optional[torch.Tensor]  # (B, L) bool, True = real token
    context_memory: Optional[torch.Tensor] = None  # (B, 256, E)
    is_null: bool = False
    null_memory: Optional[torch.Tensor] = None  # (B, 1, E), only when is_null

    @property
    def memory_length(self) -> int:
        if self.is_null:
            return self.null_memory.shape[1]
        extra = 0 if self.context_memory is None else self.context_memory.shape[1]
        return self.note_memory.shape[1] + extra

    def memory_and_mask(self):
        if self.is_null:
            b = self.null_memory.shape[0]
            return self.null_memory, torch.ones(b, 1, dtype=torch.bool)
        if self.context_memory is None:
            return self.note_memory, self.note_mask
        ctx_mask = torch.ones(self.context_memory.shape[:2], dtype=torch.bool)
        return (torch.cat([self.note_memory, self.context_memory], dim=1),
                torch.cat([self.note_mask, ctx_mask], dim=1))


# -------------------------------------------------------------------- model

class SpectrogramTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self._frame_scale = math.sqrt(d) if cfg.scale_frame_inputs else 1.0
        seed = (lambda k: cfg.position_seed * 16 + k) if cfg.decorrelate_positions else (lambda k: None)
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.note_encoder = Encoder(cfg, cfg.max_note_positions, seed(1))
        if cfg.use_context:
            self.context_in = nn.Linear(cfg.mel_bins, d)
            self.context_encoder = Encoder(cfg, cfg.context_positions, seed(2))
        self.null_embedding = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        diffusion = cfg.mode == DIFFUSION
        pe = decorrelated_positions(cfg.decoder_positions, d, seed(3))
        self.register_buffer("decoder_positions", torch.tensor(pe, dtype=torch.float32), persistent=False)
        self.frame_in = nn.Linear(cfg.mel_bins, d)
        self.layers = nn.ModuleList(DecoderLayer(cfg, film=diffusion) for _ in range(cfg.num_layers))
        self.decoder_norm = RMSNorm(d)
        self.frame_out = nn.Linear(d, cfg.mel_bins)
        if diffusion:
            self.time_embed = TimeEmbedding(d)
        else:
            self.start_frame = nn.Parameter(torch.zeros(1, 1, cfg.mel_bins))

    # encoders --------------------------------------------------------------

    def encode_notes(self, tokens: torch.Tensor, pad_to: Optional[int] = None):
        """Token ids (B, L) -> (memory, mask). Pads with PAD up to ``pad_to``
        (default: the full 2048 positions)."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        limit = self.cfg.max_note_positions
        if tokens.shape[1] > limit:
            raise ValueError(f"{tokens.shape[1]} note tokens exceed {limit} positions")
        pad_to = limit if pad_to is None else pad_to
        if pad_to > limit:
            raise ValueError(f"pad_to {pad_to} exceeds {limit} positions")
        if tokens.shape[1] < pad_to:
            tokens = F.pad(tokens, (0, pad_to - tokens.shape[1]), value=self.cfg.pad_id)
        mask = tokens != self.cfg.pad_id
        x = self.token_embed(tokens)
        return self.note_encoder(x, mask), mask

    def encode_context(self, context: torch.Tensor):
        if not self.cfg.use_context:
            raise ValueError("model was built without a context encoder")
        if context.dim() == 2:
            context = context[None]
        if context.shape[1:] != (self.cfg.context_positions, self.cfg.mel_bins):
            raise ValueError(f"context must be {self.cfg.context_positions}x{self.cfg.mel_bins}, "
                             f"got {tuple(context.shape[1:])}")
        mask = torch.ones(context.shape[:2], dtype=torch.bool)
        x = self.context_in(context.to(self.frame_in.weight.dtype)) * self._frame_scale
        return self.context_encoder(x, mask)

    def condition(self, tokens, context=None, pad_to=None) -> ConditioningBundle:
        note_memory, note_mask = self.encode_notes(tokens, pad_to)
        ctx = None
        if self.cfg.use_context:
            if context is None:
                context = torch.zeros(note_memory.shape[0], self.cfg.context_positions, self.cfg.mel_bins)
            ctx = self.encode_context(context)
        return ConditioningBundle(note_memory, note_mask, ctx)

    def null_bundle(self, batch: int) -> ConditioningBundle:
        return ConditioningBundle(None, None, None, True, self.null_embedding.expand(batch, 1, -1))

    def memory_with_dropout(self, bundle: ConditioningBundle, drop: torch.Tensor):
        """Per-example replacement of the encoder memory by the null embedding."""
        memory, mask = bundle.memory_and_mask()
        null = torch.zeros_like(memory)
        null[:, :1] = self.null_embedding.to(memory.dtype)
        null_mask = torch.zeros_like(mask)
        null_mask[:, 0] = True
        sel = drop[:, None, None]
        return torch.where(sel, null, memory), torch.where(drop[:, None], null_mask, mask)

    # decoders --------------------------------------------------------------

    def _run_decoder(self, x, memory, mask, temb=None, causal=False):
        x = self.frame_in(x) * self._frame_scale + self.decoder_positions[: x.shape[1]].to(x.dtype)
        for layer in self.layers:
            x = layer(x, memory, mask, temb, causal)
        return self.frame_out(self.decoder_norm(x))

    def _memory(self, bundle):
        if isinstance(bundle, ConditioningBundle):
            return bundle.memory_and_mask()
        return bundle

    def diffusion_decode(self, x_t: torch.Tensor, t: torch.Tensor, bundle) -> torch.Tensor:
        """Predict the noise in ``x_t`` (B, 256, 128) at times ``t`` (B,)."""
        if self.cfg.mode != DIFFUSION:
            raise ValueError("model is not a diffusion decoder")
        if x_t.shape[1:] != (self.cfg.decoder_positions, self.cfg.mel_bins):
            raise ValueError(f"x_t must be {self.cfg.decoder_positions}x{self.cfg.mel_bins}")
        memory, mask = self._memory(bundle)
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(x_t.shape[0])
        return self._run_decoder(x_t, memory, mask, self.time_embed(t))

    def autoregressive_decode(self, frames: torch.Tensor, bundle) -> torch.Tensor:
        """Teacher-forced predictions: output i predicts frame i from frames < i."""
        if self.cfg.mode != AUTOREGRESSIVE:
            raise ValueError("model is not an autoregressive decoder")
        memory, mask = self._memory(bundle)
        start = self.start_frame.to(frames.dtype).expand(frames.shape[0], 1, -1)
        inputs = torch.cat([start, frames[:, :-1]], dim=1)
        return self._run_decoder(inputs, memory, mask, causal=True)

    @torch.no_grad()
    def autoregressive_generate(self, bundle, num_frames: Optional[int] = None, dither_std: float = 0.0,
                                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Frame-by-frame sampling; each emitted frame gets N(0, dither_std^2) added."""
        num_frames = num_frames or self.cfg.decoder_positions
        memory, mask = self._memory(bundle)
        b = memory.shape[0]
        frames = self.start_frame.expand(b, 1, -1).to(memory.dtype)
        out = []
        for i in range(num_frames):
            pred = self._run_decoder(frames, memory, mask, causal=True)[:, -1:]
            if dither_std:
                pred = pred + dither_std * torch.randn(pred.shape, generator=generator, dtype=pred.dtype)
            out.append(pred)
            frames = torch.cat([frames, pred], dim=1)
        return torch.cat(out, dim=1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def config_from_dict(d: dict) -> ModelConfig:
    return replace(ModelConfig(), **d)
