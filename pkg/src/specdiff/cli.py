"""Command-line entry point: ``specdiff {dataset,train,render,eval,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing input
file, 4 version or vocabulary mismatch. Every command writes
``manifest.json`` (a RunManifest) into its output directory.

Config files are flat ``key = value`` text. Any training field can also be
set from the environment as ``SPECDIFF_<FIELD>`` (for example
``SPECDIFF_STEPS=200``); explicit flags win over both.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Optional

from .checkpoint import CheckpointError, CheckpointVersionError, load_checkpoint
from .midi import MidiParseError
from .note_events import TokenGrammarError, build_vocabulary
from .spectrogram import (
    DEFAULT_SPEC,
    compute_mel,
    read_matrix,
    read_wav,
    scale_to_model_range,
    write_matrix,
    write_wav,
)
from .training import DatasetVersionError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_VERSION = 4

COMMANDS = ("dataset", "train", "render", "eval", "inspect")

log = logging.getLogger("specdiff")


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace, config: Optional[dict],
                       seeds: dict, started: float, status: str = "ok", error: Optional[str] = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                 if k not in ("func",)},
        "config": config,
        "seeds": seeds,
        "version": _version(),
        "python": platform.python_version(),
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "status": status,
        "error": error,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands

def cmd_dataset(args) -> tuple[dict, dict]:
    from .training import DatasetConfig, make_dataset, parse_config_text

    cfg = DatasetConfig()
    if args.config:
        cfg = parse_config_text(_require(args.config, "config").read_text(), DatasetConfig, cfg)
    overrides = {k: v for k, v in (("n_tracks", args.tracks), ("seed", args.seed)) if v is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    ds = make_dataset(cfg.n_tracks, cfg)
    ds.save(args.out)
    print(f"{len(ds.examples)} examples from {len(ds.tracks)} tracks -> {args.out} "
          f"(lo={ds.lo:.4f} hi={ds.hi:.4f} digest={ds.digest()[:16]})")
    return dataclasses.asdict(cfg), {"seed": cfg.seed}


def cmd_train(args) -> tuple[dict, dict]:
    from .plotting import plot_loss
    from .training import TrainConfig, apply_env_overrides, parse_config_text, train

    cfg = TrainConfig()
    if args.config:
        cfg = parse_config_text(_require(args.config, "config").read_text(), TrainConfig, cfg)
    cfg = apply_env_overrides(cfg)
    flags = {"dataset_dir": args.dataset, "out_dir": args.out, "steps": args.steps,
             "seed": args.seed, "resume": args.resume}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    if cfg.dataset_dir:
        _require(cfg.dataset_dir, "dataset")
    if cfg.resume:
        _require(cfg.resume, "resume")
    result = train(cfg)
    steps, losses = zip(*result.losses) if result.losses else ((), ())
    if steps:
        plot_loss(Path(cfg.out_dir) / "loss.png", steps, losses)
    print(f"trained {len(result.losses)} steps; checkpoint -> {result.checkpoint_path}")
    return cfg.to_dict(), {"seed": cfg.seed}


def cmd_render(args) -> tuple[dict, dict]:
    from .plotting import plot_frame_rms, plot_spectrogram
    from .render import RenderOptions, render_track

    midi = _require(args.midi, "midi")
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"), build_vocabulary().digest())
    opts = RenderOptions(guidance_weight=args.guidance, num_steps=args.steps, seed=args.seed,
                         use_context=not args.no_context, vocoder_iters=args.vocoder_iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        track = render_track(midi, ckpt, opts)
    write_wav(out / "audio.wav", track.audio, ckpt.spec.sample_rate)
    write_matrix(out / "mel.bin", track.mel)
    diag = track.diagnostics()
    diag["warnings"] = [str(w.message) for w in caught]
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2))
    bounds = diag["boundary"]["frames"]
    plot_spectrogram(out / "spectrogram.png", track.scaled, bounds)
    plot_frame_rms(out / "frame_rms.png", track.scaled, bounds)
    print(f"rendered {track.duration_s:.2f} s in {track.wall_time:.2f} s "
          f"(rt factor {track.rt_factor:.3f}) -> {out}")
    return dataclasses.asdict(opts), {"seed": args.seed}


def cmd_eval(args) -> tuple[dict, dict]:
    from .metrics import EvalExample, evaluate, get_embedder, get_transcriber
    from .plotting import plot_metrics
    from .render import RenderOptions, render_track
    from .training import PairedDataset

    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"), build_vocabulary().digest())
    dataset = PairedDataset.load(_require(args.dataset, "dataset"))
    embedder = get_embedder(args.embedder)
    transcriber = get_transcriber(args.transcriber)
    opts = RenderOptions(guidance_weight=args.guidance, num_steps=args.steps, seed=args.seed,
                         use_context=not args.no_context, vocoder_iters=args.vocoder_iters)
    examples = []
    for i, tr in enumerate(dataset.tracks):
        rendered = render_track(tr.notes, ckpt, opts)
        examples.append(EvalExample(f"track_{i:04d}", tr.audio, rendered.audio, tr.notes, rendered.wall_time))
    config = {"render": dataclasses.asdict(opts), "embedder": embedder.name,
              "transcriber": args.transcriber, "dataset": str(args.dataset),
              "checkpoint": str(args.checkpoint)}
    report = evaluate(examples, embedder, transcriber, ckpt.spec.sample_rate, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    plot_metrics(out / "metrics.png", report.to_dict())
    print(report.to_json())
    return config, {"seed": args.seed}


def cmd_inspect(args) -> tuple[dict, dict]:
    from .plotting import plot_spectrogram, save_spectrogram_image

    src = _require(args.input, "input")
    if src.suffix.lower() == ".wav":
        mel = compute_mel(read_wav(src, DEFAULT_SPEC.sample_rate), DEFAULT_SPEC)
    else:
        mel = read_matrix(src)
    lo, hi = args.lo, args.hi
    if args.checkpoint:
        ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        lo, hi = ckpt.lo, ckpt.hi
    lo = DEFAULT_SPEC.min_value if lo is None else lo
    hi = float(mel.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    scaled = scale_to_model_range(mel, lo, hi)
    out = Path(args.out) if args.out else src.with_suffix(".png")
    width, height = save_spectrogram_image(out, scaled)
    plot_spectrogram(out.with_name(out.stem + "_plot.png"), scaled, title=src.name)
    print(f"{out}: {width}x{height}")
    return {"input": str(src), "lo": lo, "hi": hi, "width": width, "height": height}, {}


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="specdiff", description="MIDI-to-spectrogram diffusion synthesis toolkit. "
                "Commands: " + ", ".join(COMMANDS) + ".")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)

    d = sub.add_parser("dataset", help="generate a synthetic paired dataset")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.add_argument("--tracks", type=int)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train a model (diffusion or autoregressive)")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    def render_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--steps", type=int, default=1000)
        sp.add_argument("--guidance", type=float, default=2.0)
        sp.add_argument("--no-context", action="store_true")
        sp.add_argument("--vocoder-iters", type=int, default=64)

    r = sub.add_parser("render", help="render a MIDI file to audio")
    r.add_argument("--midi", required=True)
    render_flags(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="render a dataset and compute metrics")
    e.add_argument("--dataset", required=True)
    e.add_argument("--embedder", default="melstats")
    e.add_argument("--transcriber", help="'oracle' or a command run as CMD IN.wav OUT.json")
    render_flags(e)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="draw a MelSpec dump or WAV as a grayscale PNG")
    i.add_argument("input")
    i.add_argument("--out")
    i.add_argument("--checkpoint", help="take lo/hi scaling from this checkpoint")
    i.add_argument("--lo", type=float)
    i.add_argument("--hi", type=float)
    i.set_defaults(func=cmd_inspect)
    return p


def _manifest_dir(args) -> Path:
    if args.command == "inspect":
        src = Path(args.out) if args.out else Path(args.input)
        return src.parent
    if args.command == "train" and not args.out:
        return Path("run")
    return Path(args.out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    code, error, config, seeds = EXIT_OK, None, None, {}
    try:
        config, seeds = args.func(args)
    except UsageError as exc:
        code, error = EXIT_USAGE, str(exc)
    except FileNotFoundError as exc:
        code, error = EXIT_MISSING, str(exc)
    except (CheckpointVersionError, DatasetVersionError) as exc:
        code, error = EXIT_VERSION, str(exc)
    except CheckpointError as exc:
        code, error = (EXIT_VERSION if "vocabulary" in str(exc) else EXIT_FAILURE), str(exc)
    except (MidiParseError, TokenGrammarError, ValueError, KeyError, RuntimeError) as exc:
        code, error = EXIT_FAILURE, f"{type(exc).__name__}: {exc}"
    if error:
        print(f"specdiff {args.command}: error: {error}", file=sys.stderr)
    try:
        write_run_manifest(_manifest_dir(args), args.command, args, config, seeds, started,
                           "ok" if code == 0 else "error", error)
    except OSError as exc:
        print(f"specdiff: could not write run manifest: {exc}", file=sys.stderr)
        code = code or EXIT_FAILURE
    return code


if __name__ == "__main__":
    sys.exit(main())
