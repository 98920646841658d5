"""Versioned checkpoint container: named parameter tensors plus an
architecture hash that is verified on load."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

FORMAT_VERSION = 1


def arch_hash(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


def state_hash(module: torch.nn.Module) -> str:
    """Digest of all parameters and buffers; detects any weight drift."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, *, arch: dict, state: dict, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "arch": arch,
            "arch_hash": arch_hash(arch),
            "state": state,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, expected_arch: dict | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    if arch_hash(payload["arch"]) != payload["arch_hash"]:
        raise ValueError(f"architecture hash mismatch in {path} (corrupt checkpoint)")
    if expected_arch is not None and payload["arch"] != expected_arch:
        raise ValueError(
            f"checkpoint {path} was produced by a different architecture: "
            f"{payload['arch']} != {expected_arch}"
        )
    return payload


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    """Make a module functionally constant: no grads, inference-mode
    normalization statistics."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module
