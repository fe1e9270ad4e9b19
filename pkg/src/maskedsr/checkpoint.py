"""Single-file checkpoints.

Layout::

    b"MSRCKPT\\0" | u32 version | u32 count
    count x ( u16 name_len | name | u8 ndim | u32 dims[ndim] | float32 data )
    u32 trailer_len | trailer (JSON text)

All integers and floats are little-endian. Integer tensors (step counters,
RNG bytes) are stored as float32, which is exact for their ranges.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MSRCKPT\0"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_checkpoint(path, arrays: dict[str, np.ndarray], trailer: dict) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer) and arr.size and np.abs(arr).max() > 2**24:
            raise CheckpointError(f"{name}: integer values exceed float32 exact range")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    text = json.dumps(trailer, sort_keys=True, indent=1).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    fh = io.BytesIO(path.read_bytes())
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(fh.read(nbytes), dtype="<f4").reshape(shape).copy()
        (tlen,) = struct.unpack("<I", fh.read(4))
        trailer = json.loads(fh.read(tlen).decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return arrays, trailer


def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    own = module.state_dict()
    state = {}
    for key, ref in own.items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks {name}")
        state[key] = torch.from_numpy(arrays[name]).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], list]:
    sd = opt.state_dict()
    arrays = {}
    for idx in sorted(sd["state"]):
        for key in sorted(sd["state"][idx]):
            val = sd["state"][idx][key]
            arrays[f"{prefix}/{idx}/{key}"] = (val.detach().cpu().numpy() if torch.is_tensor(val)
                                               else np.asarray(val, dtype=np.float32))
    return arrays, sd["param_groups"]


def load_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], groups: list) -> None:
    state: dict[int, dict] = {}
    head = prefix + "/"
    for name, arr in arrays.items():
        if not name.startswith(head):
            continue
        idx, key = name[len(head):].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})
