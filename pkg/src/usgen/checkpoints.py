"""Versioned single-file checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON header
(format version, pipeline tag, architecture echo, epoch, array directory),
then the raw array payload.  Arrays are stored little-endian with a per-array
CRC32 so truncation and corruption are detected before any state is returned.
"""

import json
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .errors import UsgenError

MAGIC = b"USGENCKP"
FORMAT_VERSION = 1
_RNG_KEY = "__rng_state__"


class CheckpointError(UsgenError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    pipeline: str
    config: dict
    arrays: dict
    epoch: int = 0
    rng_state: bytes = b""
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    created: str = ""


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    named = dict(ckpt.arrays)
    if ckpt.rng_state:
        named[_RNG_KEY] = np.frombuffer(ckpt.rng_state, dtype=np.uint8)
    directory = []
    payload = bytearray()
    for name in sorted(named):
        arr = np.asarray(named[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()  # C-order bytes regardless of memory layout
        directory.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        payload.extend(raw)
    header = {
        "format_version": ckpt.format_version,
        "pipeline": ckpt.pipeline,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "created": ckpt.created or datetime.now(timezone.utc).isoformat(),
        "meta": ckpt.meta,
        "arrays": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        f.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    header_len = int.from_bytes(data[len(MAGIC):len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + header_len
    if len(data) < header_end:
        raise ChecksumError(f"{path} is truncated inside the header")
    header = json.loads(data[len(MAGIC) + 8:header_end].decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path} has format_version {version}, this reader supports {FORMAT_VERSION}")
    payload = data[header_end:]
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start:start + nbytes]
        if len(raw) != nbytes:
            raise ChecksumError(f"{path} is truncated in array {entry['name']!r}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"checksum mismatch in array {entry['name']!r} of {path}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    rng_state = b""
    if _RNG_KEY in arrays:
        rng_state = arrays.pop(_RNG_KEY).tobytes()
    return ModelCheckpoint(
        pipeline=header["pipeline"],
        config=header["config"],
        arrays=arrays,
        epoch=header["epoch"],
        rng_state=rng_state,
        meta=header.get("meta", {}),
        format_version=version,
        created=header.get("created", ""),
    )


def check_architecture(expected: dict, found: dict) -> None:
    """Raise ConfigMismatchError naming every differing architecture key."""
    diffs = []
    for key in sorted(set(expected) | set(found)):
        a, b = expected.get(key, "<missing>"), found.get(key, "<missing>")
        if a != b:
            diffs.append(f"{key}: expected {a!r}, found {b!r}")
    if diffs:
        raise ConfigMismatchError("architecture mismatch: " + "; ".join(diffs))


def module_to_arrays(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}/{name}": tensor.detach().cpu().numpy().copy()
            for name, tensor in module.state_dict().items()}


def module_from_arrays(module: torch.nn.Module, arrays: dict, prefix: str) -> None:
    state = {}
    want = f"{prefix}/"
    for name, arr in arrays.items():
        if name.startswith(want):
            state[name[len(want):]] = torch.from_numpy(np.array(arr))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks arrays for {prefix}: {sorted(missing)[:5]}")
    module.load_state_dict(state)


def optimizer_to_arrays(opt: torch.optim.Optimizer, prefix: str):
    """Flatten an optimizer state_dict into named arrays plus JSON-safe meta."""
    sd = opt.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}/{idx}/{key}"] = value.detach().cpu().numpy().copy()
            else:
                arrays[f"{prefix}/{idx}/{key}"] = np.array(value)
    meta = {"param_groups": sd["param_groups"], "state_keys": sorted(sd["state"].keys())}
    return arrays, meta


def optimizer_from_arrays(opt: torch.optim.Optimizer, arrays: dict, prefix: str, meta: dict) -> None:
    state = {}
    for idx in meta["state_keys"]:
        entry = {}
        want = f"{prefix}/{idx}/"
        for name, arr in arrays.items():
            if name.startswith(want):
                entry[name[len(want):]] = torch.from_numpy(np.array(arr))
        state[idx] = entry
    groups = []
    for group in meta["param_groups"]:
        group = dict(group)
        if isinstance(group.get("betas"), list):  # JSON turned the tuple into a list
            group["betas"] = tuple(group["betas"])
        groups.append(group)
    opt.load_state_dict({"state": state, "param_groups": groups})
