"""Portable checkpoints: an ``.npz`` array payload plus a JSON manifest.

The manifest records the shape and dtype of every array. It also holds the
training position with the curriculum sigma, plus JSON-able extras such as
optimizer hyperparameters or memory contents. A checkpoint written under one config refuses to
resume under another.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "cidacap-checkpoint/1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    epoch: int
    phase: str = ""
    sigma: float | None = None
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    # ---------------------------------------------------------- helpers
    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "/"
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(p)}

    def has(self, prefix: str) -> bool:
        p = prefix + "/"
        return any(k.startswith(p) for k in self.arrays)

    def optimizer_state(self, prefix: str) -> dict:
        info = self.meta[f"{prefix}.optimizer"]
        state = {}
        for key, arr in self.state_dict(prefix).items():
            idx, name = key.split("/", 1)
            state.setdefault(int(idx), {})[name] = arr
        for idx, scalars in info["scalars"].items():
            state.setdefault(int(idx), {}).update(scalars)
        return {"state": state, "param_groups": info["param_groups"]}


def flatten_module(prefix: str, state: dict) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in state.items()}


def flatten_optimizer(prefix: str, optimizer) -> tuple[dict[str, np.ndarray], dict]:
    sd = optimizer.state_dict()
    arrays, scalars = {}, {}
    for idx, entry in sd["state"].items():
        for name, value in entry.items():
            if torch.is_tensor(value):
                arrays[f"{prefix}/{idx}/{name}"] = value.detach().cpu().numpy().copy()
            else:
                scalars.setdefault(str(idx), {})[name] = value
    return arrays, {"param_groups": sd["param_groups"], "scalars": scalars}


def rng_arrays() -> dict[str, np.ndarray]:
    return {"rng/torch": torch.get_rng_state().numpy().copy()}


def restore_rng(ckpt: Checkpoint) -> None:
    if "rng/torch" in ckpt.arrays:
        torch.set_rng_state(torch.from_numpy(ckpt.arrays["rng/torch"].copy()))


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
    return base.with_suffix(".npz"), base.with_suffix(".json")


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write ``<path>.npz`` and ``<path>.json``; returns the manifest path."""
    npz, manifest = _paths(path)
    npz.parent.mkdir(parents=True, exist_ok=True)
    for k, v in ckpt.arrays.items():
        if not isinstance(v, np.ndarray):
            raise CheckpointError(f"array {k!r} is not a numpy array")
    doc = {
        "format": FORMAT,
        "epoch": int(ckpt.epoch),
        "phase": ckpt.phase,
        "sigma": ckpt.sigma,
        "config_hash": ckpt.config_hash,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in sorted(ckpt.arrays.items())},
        "meta": ckpt.meta,
    }
    tmp = npz.with_name(npz.stem + ".tmp.npz")
    np.savez(tmp, **ckpt.arrays)
    tmp.replace(npz)
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    npz, manifest = _paths(path)
    if not manifest.exists() or not npz.exists():
        raise CheckpointError(f"no checkpoint at {npz.with_suffix('')}")
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{manifest}: unsupported checkpoint format {doc.get('format')!r}")
    if expected_hash is not None and doc["config_hash"] != expected_hash:
        raise CheckpointError(f"{manifest}: written under config {doc['config_hash']}, "
                              f"current config is {expected_hash}; refusing to resume")
    with np.load(npz, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    listed = doc["arrays"]
    if set(listed) != set(arrays):
        raise CheckpointError(f"{manifest}: array names do not match the payload")
    for k, info in listed.items():
        if list(arrays[k].shape) != info["shape"] or str(arrays[k].dtype) != info["dtype"]:
            raise CheckpointError(f"{manifest}: array {k!r} does not match its manifest entry")
    return Checkpoint(arrays=arrays, epoch=doc["epoch"], phase=doc["phase"], sigma=doc["sigma"],
                      config_hash=doc["config_hash"], meta=doc["meta"])
