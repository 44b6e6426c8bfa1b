"""Audio and transcription metrics: reconstruction distance, FAD, note F1."""

from __future__ import annotations

import json
import subprocess
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .midi import TimedNote, notes_from_json
from .spectrogram import DEFAULT_SPEC, SpecConfig, compute_mel, write_wav

SCHEMA_VERSION = 1
MAX_EVAL_SECONDS = 600.0
ONSET_TOLERANCE = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN_TOLERANCE = 0.05
FAD_EPS = 1e-6


class MetricsWarning(UserWarning):
    pass


class Embedder(Protocol):
    name: str
    frame_rate: float

    def embed(self, audio: np.ndarray) -> np.ndarray: ...


class MelStatsEmbedder:
    """Per-second statistics of the log-mel: mean, std and mean |delta| over 50 frames.

    Gives 3 x 128 = 384 dimensions at one frame per second; trailing frames
    that do not fill a second are dropped (one frame minimum when any audio).
    """

    name = "melstats"
    frame_rate = 1.0
    dim = 384

    def __init__(self, spec: SpecConfig = DEFAULT_SPEC, frames_per_window: int = 50):
        self.spec = spec
        self.frames_per_window = frames_per_window

    def embed(self, audio: np.ndarray) -> np.ndarray:
        mel = compute_mel(np.asarray(audio, dtype=np.float64), self.spec)
        n = self.frames_per_window
        count = max(1, mel.shape[0] // n)
        rows = []
        for i in range(count):
            block = mel[i * n:(i + 1) * n]
            delta = np.abs(np.diff(block, axis=0)).mean(axis=0) if len(block) > 1 else np.zeros(mel.shape[1])
            rows.append(np.concatenate([block.mean(axis=0), block.std(axis=0), delta]))
        return np.asarray(rows)


EMBEDDERS: dict[str, Callable[[], Embedder]] = {"melstats": MelStatsEmbedder}


def get_embedder(name: str) -> Embedder:
    try:
        return EMBEDDERS[name]()
    except KeyError:
        raise KeyError(f"unknown embedder {name!r}; available: {sorted(EMBEDDERS)}") from None


def recon_distance(e_ref: np.ndarray, e_test: np.ndarray) -> float:
    """Mean over frames of the Euclidean norm of the embedding difference."""
    e_ref, e_test = np.atleast_2d(e_ref), np.atleast_2d(e_test)
    if e_ref.shape[1] != e_test.shape[1]:
        raise ValueError(f"embedding dims differ: {e_ref.shape[1]} vs {e_test.shape[1]}")
    n = min(len(e_ref), len(e_test))
    if len(e_ref) != len(e_test):
        warnings.warn(f"frame counts differ ({len(e_ref)} vs {len(e_test)}); truncating to {n}",
                      MetricsWarning)
    if n == 0:
        raise ValueError("no frames to compare")
    return float(np.linalg.norm(e_ref[:n] - e_test[:n], axis=1).mean())


def _pool(embeds) -> np.ndarray:
    if isinstance(embeds, np.ndarray):
        return np.atleast_2d(embeds) if embeds.ndim < 2 else embeds.reshape(-1, embeds.shape[-1])
    return np.concatenate([np.atleast_2d(e) for e in embeds], axis=0)


def _gaussian(x: np.ndarray):
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False))
    return mu, sigma


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, s1, mu2, s2, eps: float = FAD_EPS) -> float:
    d = len(mu1)
    s1 = s1 + eps * np.eye(d)
    s2 = s2 + eps * np.eye(d)
    # tr sqrt(S1 S2) is the sum of singular values of sqrt(S1) sqrt(S2); this
    # form stays accurate (and symmetric) when S1 and S2 are nearly equal
    cross = np.linalg.svd(_psd_sqrt(s1) @ _psd_sqrt(s2), compute_uv=False).sum()
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * cross)
    return max(value, 0.0)


def fad(embeds_ref, embeds_test, eps: float = FAD_EPS) -> float:
    """Frechet distance between Gaussian fits of the pooled frame embeddings.

    Both covariances get ``eps * I`` added; sets with no more frames than
    dimensions are rank-deficient and trigger a warning.
    """
    x, y = _pool(embeds_ref), _pool(embeds_test)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"embedding dims differ: {x.shape[1]} vs {y.shape[1]}")
    d = x.shape[1]
    for label, s in (("reference", x), ("test", y)):
        if len(s) < 2:
            raise ValueError(f"{label} set needs at least 2 frames")
        if len(s) <= d:
            warnings.warn(f"{label} set has {len(s)} frames for {d} dims; covariance is "
                          "rank-deficient and only the diagonal loading regularizes it", MetricsWarning)
    mu1, s1 = _gaussian(x)
    mu2, s2 = _gaussian(y)
    return frechet_distance(mu1, s1, mu2, s2, eps)


# ---------------------------------------------------------------- note F1

def _compatible(ref: TimedNote, est: TimedNote) -> bool:
    if ref.is_drum != est.is_drum or ref.program != est.program or ref.pitch != est.pitch:
        return False
    if abs(est.onset_s - ref.onset_s) > ONSET_TOLERANCE + 1e-9:
        return False
    if ref.is_drum:
        return True
    tol = max(OFFSET_RATIO * ref.duration_s, OFFSET_MIN_TOLERANCE)
    return abs(est.offset_s - ref.offset_s) <= tol + 1e-9


def match_notes(ref, est, optimal: bool = False) -> list[tuple[int, int]]:
    """Pairs (ref index, est index) of matched notes."""
    pairs = [(i, j) for i, r in enumerate(ref) for j, e in enumerate(est) if _compatible(r, e)]
    if not pairs:
        return []
    if optimal:
        rows, cols = zip(*pairs)
        graph = csr_matrix((np.ones(len(pairs)), (rows, cols)), shape=(len(ref), len(est)))
        assign = maximum_bipartite_matching(graph, perm_type="column")
        return [(i, int(j)) for i, j in enumerate(assign) if j >= 0]
    # greedy: reference notes in onset order take the nearest-onset free estimate
    used: set[int] = set()
    out = []
    cand: dict[int, list[int]] = {}
    for i, j in pairs:
        cand.setdefault(i, []).append(j)
    for i in sorted(cand, key=lambda k: (ref[k].onset_s, k)):
        free = [j for j in cand[i] if j not in used]
        if free:
            j = min(free, key=lambda j: (abs(est[j].onset_s - ref[i].onset_s), j))
            used.add(j)
            out.append((i, j))
    return out


def note_f1(ref_notes: Sequence[TimedNote], est_notes: Sequence[TimedNote],
            optimal: bool = False) -> tuple[float, float, float]:
    """(precision, recall, F1) under onset/offset/program/pitch matching.

    Drums are matched on onset, pitch and program only.
    """
    ref, est = list(ref_notes), list(est_notes)
    matched = len(match_notes(ref, est, optimal))
    precision = matched / len(est) if est else (1.0 if not ref else 0.0)
    recall = matched / len(ref) if ref else (1.0 if not est else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


# ------------------------------------------------------------ transcribers

class OracleTranscriber:
    """Returns the notes an example was synthesized from."""

    name = "oracle"

    def __call__(self, audio: np.ndarray, known_notes=None):
        if known_notes is None:
            raise ValueError("oracle transcriber needs the example's notes")
        return list(known_notes)


class CommandTranscriber:
    """External program: ``cmd IN.wav OUT.json``; OUT holds a note-list document."""

    def __init__(self, command: str, sample_rate: int = 16000, timeout: float = 600.0):
        self.command = command
        self.name = command
        self.sample_rate = sample_rate
        self.timeout = timeout

    def __call__(self, audio: np.ndarray, known_notes=None):
        with tempfile.TemporaryDirectory() as tmp:
            wav, out = Path(tmp) / "in.wav", Path(tmp) / "out.json"
            write_wav(wav, audio, self.sample_rate)
            proc = subprocess.run(self.command.split() + [str(wav), str(out)],
                                  capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise RuntimeError(f"transcriber failed ({proc.returncode}): {proc.stderr.strip()}")
            return notes_from_json(json.loads(out.read_text()))


def get_transcriber(spec: Optional[str]):
    if not spec:
        return None
    if spec == "oracle":
        return OracleTranscriber()
    return CommandTranscriber(spec)


# ------------------------------------------------------------- evaluation

@dataclass
class EvalExample:
    name: str
    reference_audio: np.ndarray
    test_audio: np.ndarray
    notes: Optional[list] = None
    wall_time_s: Optional[float] = None


@dataclass
class MetricsReport:
    embedder: str
    recon: list = field(default_factory=list)  # per example
    recon_mean: Optional[float] = None
    fad: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    rt_factors: list = field(default_factory=list)
    examples: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _truncate(audio: np.ndarray, sample_rate: int) -> np.ndarray:
    return np.asarray(audio)[: int(MAX_EVAL_SECONDS * sample_rate)]


def evaluate(examples: Sequence[EvalExample], embedder: Optional[Embedder] = None,
             transcriber=None, sample_rate: int = 16000, config: Optional[dict] = None) -> MetricsReport:
    """Recon per example, pooled FAD, and (with a transcriber) note F1.

    F1 pools matches across examples: precision and recall are computed from
    total matched / total estimated / total reference counts.
    """
    embedder = embedder or MelStatsEmbedder()
    report = MetricsReport(embedder.name, config=dict(config or {}))
    ref_embeds, test_embeds = [], []
    matched = n_ref = n_est = 0
    for ex in examples:
        ref = _truncate(ex.reference_audio, sample_rate)
        test = _truncate(ex.test_audio, sample_rate)
        e_ref, e_test = embedder.embed(ref), embedder.embed(test)
        ref_embeds.append(e_ref)
        test_embeds.append(e_test)
        report.recon.append(recon_distance(e_ref, e_test))
        if ex.wall_time_s:
            report.rt_factors.append(len(test) / sample_rate / ex.wall_time_s)
        if transcriber is not None:
            est = transcriber(test, ex.notes)
            limit = MAX_EVAL_SECONDS
            ref_notes = [n for n in (ex.notes or []) if n.onset_s < limit]
            matched += len(match_notes(ref_notes, est))
            n_ref += len(ref_notes)
            n_est += len(est)
        report.examples.append(ex.name)
    if report.recon:
        report.recon_mean = float(np.mean(report.recon))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricsWarning)
            pooled_ref, pooled_test = _pool(ref_embeds), _pool(test_embeds)
            if len(pooled_ref) >= 2 and len(pooled_test) >= 2:
                report.fad = fad(pooled_ref, pooled_test)
    if transcriber is not None:
        report.precision = matched / n_est if n_est else (1.0 if not n_ref else 0.0)
        report.recall = matched / n_ref if n_ref else (1.0 if not n_est else 0.0)
        s = report.precision + report.recall
        report.f1 = 2 * report.precision * report.recall / s if s else 0.0
    return report
