"""Versioned checkpoint container shared by both generators."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict
from pathlib import Path

import torch

from .errors import ShapeError

FORMAT = "cyclexr-checkpoint"
VERSION = 1


def pack(kind: str, model, meta: dict | None = None) -> dict:
    """In-memory checkpoint: kind, config, vocabulary size and a detached state dict."""
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": asdict(model.config),
        "vocab_size": model.vocab_size,
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }


def save(ckpt: dict, path) -> None:
    torch.save(ckpt, Path(path))


def load(path) -> dict:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != FORMAT:
        raise ShapeError(f"{path} is not a {FORMAT} file")
    if ckpt.get("version") != VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def restore(model, ckpt: dict):
    """Load a state dict after checking every tensor shape against ``model``."""
    expected = model.state_dict()
    state = ckpt["state"]
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise ShapeError(f"checkpoint keys differ: missing={missing[:3]} unexpected={extra[:3]}")
    for name, tensor in expected.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ShapeError(f"{name}: checkpoint shape {tuple(state[name].shape)} "
                             f"!= model shape {tuple(tensor.shape)}")
    model.load_state_dict(state)
    return model


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        buf = io.BytesIO()
        buf.write(tensor.detach().cpu().contiguous().numpy().tobytes())
        h.update(buf.getvalue())
    return h.hexdigest()
