import json
import subprocess
import sys
import zipfile

import numpy as np
import pytest
from PIL import Image

from specdiff.cli import COMMANDS, main
from specdiff.midi import TimedNote, notes_to_midi
from specdiff.spectrogram import read_matrix, write_matrix, write_wav


def run(*argv):
    return main([str(a) for a in argv])


def test_help_lists_all_commands():
    proc = subprocess.run([sys.executable, "-m", "specdiff.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in COMMANDS:
        assert name in proc.stdout
    assert len(COMMANDS) == 5


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        run("render", "--out", "x")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2


def test_inspect_dump_dimensions(tmp_path):
    mel = np.random.default_rng(0).uniform(-11.5, 2.0, (256, 128)).astype(np.float32)
    write_matrix(tmp_path / "m.bin", mel)
    assert run("inspect", tmp_path / "m.bin", "--out", tmp_path / "m.png") == 0
    with Image.open(tmp_path / "m.png") as img:
        assert img.size == (256, 128)
    assert (tmp_path / "m_plot.png").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "inspect" and manifest["status"] == "ok"
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.bin"), mel)


def test_inspect_wav(tmp_path):
    write_wav(tmp_path / "a.wav", 0.1 * np.sin(np.arange(16000) * 0.2), 16000)
    assert run("inspect", tmp_path / "a.wav") == 0
    with Image.open(tmp_path / "a.png") as img:
        assert img.size == (50, 128)


def test_missing_input_exit_code(tmp_path):
    assert run("inspect", tmp_path / "nope.bin") == 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "error"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.cfg").write_text("n_tracks = 2\nmax_segments = 2\nmin_segments = 1\nseed = 3\n")
    (root / "train.cfg").write_text(
        "# tiny run\nsteps = 4\nbatch_size = 2\nlog_every = 2\ncheckpoint_every = 0\n")
    assert run("dataset", "--config", root / "data.cfg", "--out", root / "data") == 0
    assert run("train", "--config", root / "train.cfg", "--dataset", root / "data",
               "--out", root / "run") == 0
    return root


def test_dataset_and_train_outputs(pipeline):
    assert (pipeline / "data" / "dataset.json").exists()
    assert (pipeline / "data" / "manifest.json").exists()
    assert (pipeline / "run" / "checkpoint_final.ckpt").exists()
    assert (pipeline / "run" / "loss.png").exists()
    rows = (pipeline / "run" / "loss.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4 // 2
    manifest = json.loads((pipeline / "run" / "manifest.json").read_text())
    assert manifest["config"]["steps"] == 4


def test_render_and_eval(pipeline, tmp_path):
    (tmp_path / "in.mid").write_bytes(notes_to_midi([TimedNote(0.2, 1.0, 60, 0), TimedNote(6.0, 7.0, 67, 0)]))
    ckpt = pipeline / "run" / "checkpoint_final.ckpt"
    fast = ["--checkpoint", ckpt, "--steps", 3, "--vocoder-iters", 1]
    assert run("render", "--midi", tmp_path / "in.mid", "--out", tmp_path / "r", *fast) == 0
    out = tmp_path / "r"
    for name in ("audio.wav", "mel.bin", "diagnostics.json", "spectrogram.png", "frame_rms.png", "manifest.json"):
        assert (out / name).exists(), name
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["rt_factor"] == pytest.approx(diag["duration_s"] / diag["wall_time_s"])
    assert read_matrix(out / "mel.bin").shape == (512, 128)

    assert run("eval", "--dataset", pipeline / "data", "--transcriber", "oracle",
               "--out", tmp_path / "e", *fast) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["schema_version"] == 1 and len(report["recon"]) == 2
    assert (tmp_path / "e" / "metrics.png").exists()


def test_render_is_reproducible_from_manifest(pipeline, tmp_path):
    (tmp_path / "in.mid").write_bytes(notes_to_midi([TimedNote(0.2, 1.0, 60, 0)]))
    args = ["render", "--midi", tmp_path / "in.mid", "--checkpoint", pipeline / "run" / "checkpoint_final.ckpt",
            "--steps", 3, "--vocoder-iters", 1, "--seed", 5]
    assert run(*args, "--out", tmp_path / "a") == 0
    argv = json.loads((tmp_path / "a" / "manifest.json").read_text())["args"]
    replay = ["render", "--midi", argv["midi"], "--checkpoint", argv["checkpoint"], "--steps", argv["steps"],
              "--vocoder-iters", argv["vocoder_iters"], "--seed", argv["seed"], "--out", tmp_path / "b"]
    assert run(*replay) == 0
    assert (tmp_path / "a" / "audio.wav").read_bytes() == (tmp_path / "b" / "audio.wav").read_bytes()


def test_version_mismatch_exit_code(pipeline, tmp_path):
    src = pipeline / "run" / "checkpoint_final.ckpt"
    with zipfile.ZipFile(src) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    manifest = json.loads(entries["manifest.json"])
    manifest["format_version"] = 99
    entries["manifest.json"] = json.dumps(manifest).encode()
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        for name, data in entries.items():
            zf.writestr(name, data)
    (tmp_path / "in.mid").write_bytes(notes_to_midi([]))
    assert run("render", "--midi", tmp_path / "in.mid", "--checkpoint", bad, "--out", tmp_path / "r") == 4


def test_bad_midi_exit_code(pipeline, tmp_path):
    (tmp_path / "in.mid").write_bytes(b"garbage")
    code = run("render", "--midi", tmp_path / "in.mid", "--checkpoint",
               pipeline / "run" / "checkpoint_final.ckpt", "--out", tmp_path / "r")
    assert code == 1


def test_env_override(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("SPECDIFF_STEPS", "2")
    monkeypatch.setenv("SPECDIFF_LOG_EVERY", "1")
    monkeypatch.setenv("SPECDIFF_BATCH_SIZE", "1")
    monkeypatch.setenv("SPECDIFF_CHECKPOINT_EVERY", "0")
    assert run("train", "--dataset", pipeline / "data", "--out", tmp_path / "run") == 0
    rows = (tmp_path / "run" / "loss.csv").read_text().strip().splitlines()
    assert len(rows) == 3
