"""Checkpoint container: JSON header followed by a raw weight blob.

Layout::

    b"ECGDIFF\\0" | u32 format version | u64 header length | header JSON | blob

The header lists every tensor as ``{name, shape, dtype, offset, nbytes}``
into the little-endian blob, plus the model config, schedule parameters and
free-form training metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import make_schedule
from .errors import CheckpointError
from .model import Denoiser, ModelConfig

MAGIC = b"ECGDIFF\x00"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


@dataclass
class Checkpoint:
    model: Denoiser
    schedule: object
    metadata: dict = field(default_factory=dict)


def _encode(model, schedule, metadata):
    tensors, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        raw = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[tensor.dtype]).tobytes()
        tensors.append({"name": name, "shape": list(tensor.shape), "dtype": _DTYPES[tensor.dtype],
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "schedule": schedule.params(),
        "metadata": metadata,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)


def save_checkpoint(path, model, schedule, metadata=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _encode(model, schedule, metadata or {})
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_header(path):
    data = _read(path)
    return _parse(data, path)[0]


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def _parse(data, path):
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[20:20 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    return header, data[20 + hlen:]


def load_checkpoint(path):
    header, blob = _parse(_read(path), path)
    try:
        model = Denoiser(ModelConfig.from_dict(header["model_config"]))
        state = {}
        for t in header["tensors"]:
            raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
            if len(raw) != t["nbytes"]:
                raise CheckpointError(f"{path}: truncated tensor {t['name']}")
            arr = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"])
            state[t["name"]] = torch.from_numpy(arr.copy())
        # keep the stored precision
        if state and next(iter(state.values())).dtype == torch.float64:
            model.double()
        model.load_state_dict(state)
        schedule = make_schedule(**header["schedule"])
    except (KeyError, RuntimeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: incompatible checkpoint ({exc})") from exc
    model.eval()
    return Checkpoint(model, schedule, header.get("metadata", {}))


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
