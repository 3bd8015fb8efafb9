"""Self-contained reader/writer for the tensor interchange format.

Layout: 8-byte little-endian header length, UTF-8 JSON header mapping tensor
name -> {dtype, shape, data_offsets}, then a raw little-endian data block.
Offsets are relative to the data block. The layout matches the de-facto
safetensors format, so this module also reads real safetensors files
(F16/BF16 included); it only ever writes F32/F64.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

WRITE_TAGS = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}
READ_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),  # converted on read
}


class BridgeFormatError(Exception):
    """File does not follow the interchange/safetensors layout."""


def _bf16_to_f32(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.uint32) << 16).view(np.float32)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read every tensor plus header metadata; BF16 is widened to float32."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise BridgeFormatError(f"{path}: shorter than the 8-byte length prefix")
    header_len = int.from_bytes(blob[:8], "little")
    if 8 + header_len > len(blob):
        raise BridgeFormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BridgeFormatError(f"{path}: malformed header: {exc}") from exc
    block = blob[8 + header_len :]

    metadata = {str(k): str(v) for k, v in header.pop("__metadata__", {}).items()}
    tensors: dict[str, np.ndarray] = {}
    for name, desc in header.items():
        tag = desc.get("dtype")
        if tag not in READ_DTYPES:
            raise BridgeFormatError(f"{path}: tensor '{name}' has unsupported dtype {tag!r}")
        begin, end = desc["data_offsets"]
        if end > len(block):
            raise BridgeFormatError(f"{path}: tensor '{name}' data runs past end of file")
        flat = np.frombuffer(block, dtype=READ_DTYPES[tag], offset=begin,
                             count=int(np.prod(desc["shape"], dtype=np.int64)))
        if tag == "BF16":
            flat = _bf16_to_f32(flat)
        tensors[name] = flat.reshape(desc["shape"])
    return tensors, metadata


def write_tensors(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    """Write float32/float64 tensors; round trips are bit-exact."""
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in WRITE_TAGS:
            raise BridgeFormatError(
                f"tensor '{name}': cannot write dtype {arr.dtype}; expected float32 or float64"
            )
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header[name] = {
            "dtype": WRITE_TAGS[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    Path(path).write_bytes(len(raw).to_bytes(8, "little") + raw + b"".join(chunks))
