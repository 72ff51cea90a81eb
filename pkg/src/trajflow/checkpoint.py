"""Single-file checkpoints: a JSON header line followed by raw little-endian tensor bytes.

The layout carries no timestamps, so identical parameters give identical files.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import Normalizer
from .network import MotionDenoiser, NetworkConfig

MAGIC = b"TRAJFLOW-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    kind: str  # "teacher" or "student"
    network: NetworkConfig
    state: dict[str, np.ndarray]
    normalizer: Normalizer
    agent_types: list[str]
    config_hash: str
    extra: dict | None = None

    def build_model(self) -> MotionDenoiser:
        model = MotionDenoiser(self.network, time_conditioned=self.kind == "teacher")
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        model.eval()
        return model

    @classmethod
    def from_model(cls, kind: str, model: MotionDenoiser, normalizer: Normalizer,
                   agent_types, config_hash: str, extra: dict | None = None) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
        return cls(kind, model.cfg, state, normalizer, list(agent_types), config_hash, extra)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors, offset, blobs = [], 0, []
    for name, arr in ckpt.state.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "network": ckpt.network.to_dict(),
        "normalizer": ckpt.normalizer.to_dict(),
        "agent_types": ckpt.agent_types,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra or {},
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} "
                              f"unsupported (expected {FORMAT_VERSION})")
    body = memoryview(data)[end + 1:]
    state = {}
    for t in header["tensors"]:
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        state[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return Checkpoint(header["kind"], NetworkConfig(**header["network"]), state,
                      Normalizer.from_dict(header["normalizer"]), header["agent_types"],
                      header["config_hash"], header["extra"])
