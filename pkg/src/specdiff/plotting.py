"""PNG figures for spectrograms, loss curves and render diagnostics.

Spectrogram images map model range linearly to 8-bit gray: -1 is black,
+1 is white. Time runs left to right, low mel bins sit at the bottom.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.image as mimage  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def to_gray(scaled: np.ndarray) -> np.ndarray:
    """(frames, bins) model-range array -> (bins, frames) uint8 image."""
    x = np.clip(np.asarray(scaled, dtype=np.float64), -1.0, 1.0)
    pixels = np.round((x + 1.0) * 127.5).astype(np.uint8)
    return pixels.T[::-1]


def save_spectrogram_image(path, scaled: np.ndarray) -> tuple[int, int]:
    """One pixel per frame and bin; returns (width, height)."""
    img = to_gray(scaled)
    mimage.imsave(str(path), img, cmap="gray", vmin=0, vmax=255)
    return img.shape[1], img.shape[0]


def plot_spectrogram(path, scaled: np.ndarray, boundaries=(), title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(max(4, scaled.shape[0] / 64), 3))
    ax.imshow(to_gray(scaled), cmap="gray", vmin=0, vmax=255, aspect="auto",
              extent=(0, scaled.shape[0], 0, scaled.shape[1]))
    for b in boundaries:
        ax.axvline(b, color="tab:red", lw=0.8, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss(path, steps, losses, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, losses, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_frame_rms(path, scaled: np.ndarray, boundaries=(), labels=None, others=()) -> None:
    """Per-frame RMS over bins, with segment boundaries marked."""
    fig, ax = plt.subplots(figsize=(6, 3))
    series = [scaled, *others]
    names = labels or [f"track {i}" for i in range(len(series))]
    for s, name in zip(series, names):
        ax.plot(np.sqrt(np.mean(np.asarray(s, dtype=np.float64) ** 2, axis=1)), lw=1, label=name)
    for b in boundaries:
        ax.axvline(b, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("RMS (model range)")
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_metrics(path, report: dict) -> None:
    """Bar chart of per-example reconstruction distances."""
    fig, ax = plt.subplots(figsize=(5, 3))
    recon = report.get("recon") or []
    ax.bar(range(len(recon)), recon)
    ax.set_xticks(range(len(recon)))
    ax.set_xticklabels(report.get("examples") or [], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("recon distance")
    fad = report.get("fad")
    ax.set_title("FAD n/a" if fad is None else f"FAD {fad:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
