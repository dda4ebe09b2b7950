"""Reader/writer for the safetensors tensor container.

Layout: an 8-byte little-endian header length N, N bytes of JSON header
mapping tensor name to ``{"dtype", "shape", "data_offsets": [begin, end)}``
(plus an optional ``__metadata__`` string map), then the raw little-endian
row-major tensor bytes. Offsets are relative to the end of the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ContainerError

_READ_DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "F64": np.dtype("<f8"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
}
_MAX_HEADER = 100 * 1024 * 1024


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    """Write ``tensors`` as F32 in name order."""
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        blobs.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    hbytes += b" " * (-len(hbytes) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def _bf16_to_f32(raw: bytes) -> np.ndarray:
    u16 = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
    return (u16 << 16).view(np.float32)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read every tensor in the container; floating tensors come back as float32."""
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"no such container: {path}")
    data = path.read_bytes()
    if len(data) < 8:
        raise ContainerError("malformed header: file shorter than 8 bytes")
    (n,) = struct.unpack("<Q", data[:8])
    if n > _MAX_HEADER or 8 + n > len(data):
        raise ContainerError(f"malformed header: declared length {n} exceeds file size")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError("malformed header: not a JSON object")
    metadata = header.pop("__metadata__", None) or {}
    body = memoryview(data)[8 + n :]
    out: dict[str, np.ndarray] = {}
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise ContainerError(f"malformed header entry for {name!r}") from None
        if not 0 <= begin <= end <= len(body):
            raise ContainerError(f"tensor {name!r} offsets [{begin}, {end}) out of bounds")
        raw = bytes(body[begin:end])
        count = int(np.prod(shape, dtype=np.int64))
        if dtype == "BF16":
            if len(raw) != 2 * count:
                raise ContainerError(f"tensor {name!r}: byte length does not match shape {shape}")
            arr = _bf16_to_f32(raw)
        elif dtype in _READ_DTYPES:
            dt = _READ_DTYPES[dtype]
            if len(raw) != dt.itemsize * count:
                raise ContainerError(f"tensor {name!r}: byte length does not match shape {shape}")
            arr = np.frombuffer(raw, dtype=dt)
            if dt.kind == "f":
                arr = arr.astype(np.float32)
        else:
            raise ContainerError(f"tensor {name!r}: unsupported dtype {dtype}")
        out[name] = np.array(arr.reshape(shape))
    return out, dict(metadata)
