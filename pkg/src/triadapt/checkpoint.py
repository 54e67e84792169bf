"""Single-file checkpoint container.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"TRIPLCKP"
    version      u32
    header_len   u64       length of the UTF-8 JSON header that follows
    header       bytes     JSON, keys sorted (config snapshot, iteration, seeds, ...)
    n_records    u32
    n_records x record:
        name_len u32, name (UTF-8)       module-path key, e.g. "G/mapping.layers.0.weight"
        dtype_len u8, dtype (ASCII)      numpy dtype string, e.g. "<f4"
        ndim     u32, shape u64 * ndim
        nbytes   u64, data               C-order, little-endian

Records keep insertion order, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TRIPLCKP"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arrays: dict[str, np.ndarray], header: dict) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        dtype = np.dtype(dt).str.encode("ascii")
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", len(dtype)))
        buf.write(dtype)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        return _decode(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    if len(blob) < 20:
        raise CheckpointError("truncated checkpoint header")
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack_from("<IQ", view, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos = 20
    header = json.loads(bytes(view[pos:pos + head_len]).decode("utf-8"))
    pos += head_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + klen]).decode("utf-8")
        pos += klen
        (dlen,) = struct.unpack_from("<B", view, pos)
        pos += 1
        dtype = np.dtype(bytes(view[pos:pos + dlen]).decode("ascii"))
        pos += dlen
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated record {name!r}")
        arrays[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after the last record")
    return arrays, header


def save(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    atomic_write_bytes(path, encode(arrays, header))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


# torch helpers --------------------------------------------------------------

def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + "/")}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{prefix}: missing {missing}, unexpected {unexpected}")


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    """Split an optimizer state dict into tensor records and a JSON-able remainder."""
    sd = opt.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arrays[f"{prefix}/state/{idx}/{key}"] = torch.as_tensor(value).cpu().numpy()
    return arrays, {"param_groups": sd["param_groups"]}


def load_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], meta: dict) -> None:
    state: dict[int, dict] = {}
    for name, value in arrays.items():
        if not name.startswith(prefix + "/state/"):
            continue
        idx, key = name[len(prefix) + 7:].split("/")
        state.setdefault(int(idx), {})[key] = torch.from_numpy(value.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
