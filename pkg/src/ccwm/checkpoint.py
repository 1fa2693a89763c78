"""Checkpoint container: a flat name->array map with a JSON header.

Layout: 4-byte magic, uint32 version, uint64 header length, UTF-8 JSON
header, then the raw little-endian array payload. The header carries the
array directory (dtype, shape, offset) plus arbitrary JSON metadata, so the
file stays readable without Python.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CCWM"
VERSION = 1


def save_arrays(path: Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        directory[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": directory}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic {magic!r})")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for name, info in header["arrays"].items():
        dtype = np.dtype(info["dtype"])
        count = int(np.prod(info["shape"], dtype=np.int64)) if info["shape"] else 1
        start = info["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        arrays[name] = arr.reshape(info["shape"]).copy()
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# torch bridges
# ---------------------------------------------------------------------------

def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for key, tensor in module.state_dict().items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise KeyError(f"checkpoint misses array {name}")
        state[key] = torch.from_numpy(arrays[name]).to(tensor.dtype)
    module.load_state_dict(state)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    arrays = {}
    scalars: dict[str, float] = {}
    for pid, slots in sd["state"].items():
        for key, value in slots.items():
            name = f"{prefix}/state/{pid}/{key}"
            if torch.is_tensor(value):
                arrays[name] = value.detach().cpu().numpy()
            else:
                scalars[name] = value
    meta = {"param_groups": sd["param_groups"], "scalars": scalars}
    return arrays, meta


def load_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], meta: dict,
                   prefix: str) -> None:
    state: dict[int, dict] = {}
    marker = f"{prefix}/state/"
    for name, arr in arrays.items():
        if not name.startswith(marker):
            continue
        pid_str, key = name[len(marker):].split("/", 1)
        state.setdefault(int(pid_str), {})[key] = torch.from_numpy(arr.copy())
    for name, value in meta.get("scalars", {}).items():
        if name.startswith(marker):
            pid_str, key = name[len(marker):].split("/", 1)
            state.setdefault(int(pid_str), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def generator_state_array(generator: torch.Generator) -> np.ndarray:
    return generator.get_state().numpy()


def set_generator_state(generator: torch.Generator, arr: np.ndarray) -> None:
    generator.set_state(torch.from_numpy(arr.copy()).to(torch.uint8))
