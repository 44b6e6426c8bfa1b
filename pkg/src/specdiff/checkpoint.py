"""Checkpoint archive: a zip holding ``manifest.json`` plus one tensor per entry.

Tensors are stored in the MelSpec dump layout (16-byte header + float32
rows); the manifest records each tensor's true shape. Training state
(optimizer moments, RNG state, step) is optional and rides along for resume.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import ModelConfig, SpectrogramTransformer, config_from_dict
from .spectrogram import SpecConfig, matrix_from_bytes, matrix_to_bytes

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: SpectrogramTransformer
    spec: SpecConfig
    lo: float
    hi: float
    vocab_digest: str
    train_state: Optional[dict] = None  # step, optimizer, generator
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def _as_matrix(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().to(torch.float32).numpy()
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a.reshape(-1, a.shape[-1])


def _write(zf: zipfile.ZipFile, name: str, data) -> None:
    # fixed timestamp keeps archives byte-identical across runs
    zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data,
                compress_type=zipfile.ZIP_DEFLATED)


def _put(zf: zipfile.ZipFile, name: str, t: torch.Tensor, index: dict):
    _write(zf, name, matrix_to_bytes(_as_matrix(t)))
    index[name] = list(t.shape)


def _get(zf: zipfile.ZipFile, name: str, shape) -> torch.Tensor:
    return torch.from_numpy(matrix_from_bytes(zf.read(name)).reshape(shape).copy())


def parameter_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(_as_matrix(p).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint, optimizer: Optional[torch.optim.Optimizer] = None,
                    generator: Optional[torch.Generator] = None, step: Optional[int] = None) -> None:
    index: dict = {}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model.cfg.to_dict(),
        "spec_config": asdict(ckpt.spec),
        "scaling": {"lo": ckpt.lo, "hi": ckpt.hi},
        "vocab_digest": ckpt.vocab_digest,
        "param_digest": parameter_digest(ckpt.model),
        "meta": ckpt.meta,
    }
    tmp = Path(str(path) + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, p in ckpt.model.state_dict().items():
            _put(zf, f"params/{name}", p, index)
        if optimizer is not None:
            state = optimizer.state_dict()
            manifest["optimizer"] = {"class": type(optimizer).__name__,
                                     "param_groups": state["param_groups"]}
            for pid, slots in state["state"].items():
                for key, value in slots.items():
                    _put(zf, f"optim/{pid}/{key}", torch.as_tensor(value), index)
        if generator is not None:
            _write(zf, "rng_state.bin", generator.get_state().numpy().tobytes())
        if step is not None:
            manifest["step"] = int(step)
        manifest["tensors"] = index
        _write(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path, expected_vocab_digest: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint, verifying format version, parameter digest and vocabulary."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        if expected_vocab_digest and manifest["vocab_digest"] != expected_vocab_digest:
            raise CheckpointError(f"{path}: vocabulary {manifest['vocab_digest']} does not match "
                                  f"{expected_vocab_digest}")
        index = manifest["tensors"]
        model = SpectrogramTransformer(config_from_dict(manifest["model_config"]))
        state = {}
        for name in model.state_dict():
            key = f"params/{name}"
            if key not in index:
                raise CheckpointError(f"{path}: missing parameter {name}")
            state[name] = _get(zf, key, index[key])
        model.load_state_dict(state)
        if parameter_digest(model) != manifest["param_digest"]:
            raise CheckpointError(f"{path}: parameter digest mismatch")

        train_state = None
        if "optimizer" in manifest:
            slots: dict = {}
            for key, shape in index.items():
                if key.startswith("optim/"):
                    _, pid, slot = key.split("/", 2)
                    slots.setdefault(int(pid), {})[slot] = _get(zf, key, shape)
            train_state = {
                "optimizer": {"state": slots, "param_groups": manifest["optimizer"]["param_groups"]},
                "optimizer_class": manifest["optimizer"]["class"],
                "step": manifest.get("step", 0),
            }
            if "rng_state.bin" in zf.namelist():
                raw = np.frombuffer(zf.read("rng_state.bin"), dtype=np.uint8).copy()
                train_state["generator"] = torch.from_numpy(raw)
    spec = SpecConfig(**manifest["spec_config"])
    return Checkpoint(model, spec, manifest["scaling"]["lo"], manifest["scaling"]["hi"],
                      manifest["vocab_digest"], train_state, manifest.get("meta", {}))


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def checkpoint_bytes_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
