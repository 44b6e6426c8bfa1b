import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from specdiff.checkpoint import Checkpoint, CheckpointError
from specdiff.midi import TimedNote, notes_to_midi
from specdiff.model import AUTOREGRESSIVE, SpectrogramTransformer, preset
from specdiff.note_events import build_vocabulary, split_track
from specdiff.render import (
    RenderOptions,
    boundary_discontinuity,
    render_segment,
    render_track,
    rt_factor,
)
from specdiff.spectrogram import DEFAULT_SPEC

FAST = RenderOptions(num_steps=4, vocoder_iters=2, seed=3)


def ckpt_for(**kw):
    torch.manual_seed(0)
    return Checkpoint(SpectrogramTransformer(preset("toy", **kw)), DEFAULT_SPEC, -11.5, 3.5,
                      build_vocabulary().digest())


NOTES = [TimedNote(0.5, 6.0, 60, 0), TimedNote(7.0, 8.0, 64, 40), TimedNote(1.0, None, 38, 0, True)]


# ------------------------------------------------------------ diagnostics

def test_rt_factor_cases():
    assert rt_factor(2.0, 1.0) == 2.0
    assert rt_factor(3.0, 3.0) == 1.0
    assert rt_factor(5.12, 10.24) == 0.5
    with pytest.raises(ValueError):
        rt_factor(1.0, 0.0)


def test_boundary_constant_is_zero():
    out = boundary_discontinuity(np.full((512, 128), 0.3), [256])
    assert out["values"] == [0.0] and out["mean"] == 0.0


def test_boundary_unit_step():
    mel = np.zeros((512, 128))
    mel[256:] = 1.0
    assert boundary_discontinuity(mel, [256])["values"] == [pytest.approx(1.0)]


def test_boundary_edges_skipped():
    out = boundary_discontinuity(np.zeros((512, 128)), [2, 256, 510])
    assert out["frames"] == [256]
    assert math.isnan(boundary_discontinuity(np.zeros((8, 4)), [0])["mean"])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_boundary_invariant_to_bin_permutation(seed):
    rng = np.random.default_rng(seed)
    mel = rng.uniform(-1, 1, (64, 16))
    perm = rng.permutation(16)
    a = boundary_discontinuity(mel, [32], window=4)["values"]
    b = boundary_discontinuity(mel[:, perm], [32], window=4)["values"]
    assert a == pytest.approx(b, abs=1e-12)


def test_boundary_window_configurable():
    mel = np.zeros((100, 4))
    mel[50:52] = 2.0
    # window 2: after RMS 2, before 0; window 4: after RMS sqrt(2)
    assert boundary_discontinuity(mel, [50], 2)["values"] == [pytest.approx(2.0)]
    assert boundary_discontinuity(mel, [50], 4)["values"] == [pytest.approx(math.sqrt(2))]


# ----------------------------------------------------------------- render

def test_empty_midi_renders_one_segment():
    track = render_track(notes_to_midi([]), ckpt_for(), FAST)
    assert track.mel.shape == (256, 128)
    assert len(track.audio) == 256 * 320
    assert track.boundaries["frames"] == []


def test_render_track_shapes_and_diagnostics():
    track = render_track(NOTES, ckpt_for(), FAST)
    assert track.mel.shape == (512, 128)
    assert track.scaled.min() >= -1 and track.scaled.max() <= 1
    assert len(track.audio) == 512 * 320
    diag = track.diagnostics()
    assert diag["num_segments"] == 2 and diag["boundary"]["frames"] == [256]
    assert diag["rt_factor"] == pytest.approx(track.duration_s / track.wall_time)


def test_render_is_deterministic():
    a = render_track(NOTES, ckpt_for(), FAST)
    b = render_track(NOTES, ckpt_for(), FAST)
    assert a.audio.tobytes() == b.audio.tobytes()
    assert a.mel.tobytes() == b.mel.tobytes()


def test_seed_changes_output():
    a = render_track(NOTES, ckpt_for(), FAST)
    b = render_track(NOTES, ckpt_for(), RenderOptions(num_steps=4, vocoder_iters=2, seed=4))
    assert not np.array_equal(a.mel, b.mel)


def test_no_context_segments_are_order_independent():
    ckpt = ckpt_for(use_context=False)
    opts = RenderOptions(num_steps=4, vocoder_iters=2, seed=9, use_context=False)
    track = render_track(NOTES, ckpt, opts)
    segments = split_track(NOTES, build_vocabulary())
    pieces = {k: render_segment(ckpt, segments[k][1], None, opts, k) for k in reversed(range(len(segments)))}
    np.testing.assert_array_equal(np.concatenate([pieces[k] for k in sorted(pieces)]), track.scaled)


def test_generated_context_feeds_next_segment(monkeypatch):
    import specdiff.render as render
    seen = []
    original = render.render_segment

    def spy(ckpt, tokens, context, opts, k):
        seen.append(None if context is None else context.copy())
        return original(ckpt, tokens, context, opts, k)

    monkeypatch.setattr(render, "render_segment", spy)
    track = render_track(NOTES, ckpt_for(), FAST)
    assert seen[0] is None
    np.testing.assert_array_equal(seen[1], track.scaled[:256])


def test_vocabulary_mismatch_is_an_error():
    ckpt = ckpt_for()
    ckpt.vocab_digest = "x"
    with pytest.raises(CheckpointError):
        render_track(NOTES, ckpt, FAST)


def test_autoregressive_checkpoint_renders():
    ckpt = ckpt_for(mode=AUTOREGRESSIVE)
    track = render_track([TimedNote(0.0, 1.0, 60, 0)], ckpt, RenderOptions(vocoder_iters=1, seed=1))
    assert track.mel.shape == (256, 128)


def test_midi_path_input(tmp_path):
    path = tmp_path / "in.mid"
    path.write_bytes(notes_to_midi([TimedNote(0.0, 1.0, 60, 0)]))
    assert render_track(path, ckpt_for(), FAST).mel.shape == (256, 128)


def test_invalid_options():
    with pytest.raises(ValueError):
        RenderOptions(num_steps=0)
    with pytest.raises(ValueError):
        RenderOptions(vocoder_iters=0)
    with pytest.raises(ValueError):
        RenderOptions(guidance_weight=-1.0)
