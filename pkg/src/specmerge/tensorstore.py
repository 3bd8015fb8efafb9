"""Named tensor collections and the binary interchange format.

File layout (bit-exact, compatible with the de-facto safetensors layout):

    [8-byte unsigned little-endian N]
    [N bytes of UTF-8 JSON header]
    [contiguous little-endian raw data block]

The header maps tensor name -> {"dtype": "F32"|"F64", "shape": [ints],
"data_offsets": [begin, end]} with offsets relative to the start of the
data block.  An optional "__metadata__" entry carries string-to-string
provenance (model_id, role, LoRA rank/alpha).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError, ShapeError, TruncatedDataError, ValidationError

__all__ = [
    "DTYPE_TAGS",
    "ROLES",
    "TensorMeta",
    "TensorMap",
    "TaskVector",
    "LoraFactorPair",
    "load_checkpoint",
    "save_checkpoint",
    "load_lora_adapter",
    "save_lora_adapter",
    "compute_task_vector",
    "apply_delta",
    "materialize_lora",
    "lora_to_task_vector",
]

DTYPE_TAGS: Mapping[str, np.dtype] = MappingProxyType(
    {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
)
_TAG_FOR_KIND = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}

ROLES = frozenset({"pretrained", "finetuned", "delta", "merged"})

_METADATA_KEY = "__metadata__"
_LORA_A_SUFFIX = ".lora_a"
_LORA_B_SUFFIX = ".lora_b"


@dataclass(frozen=True)
class TensorMeta:
    """Header index entry for one stored tensor."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int
    byte_length: int

    def __post_init__(self) -> None:
        if not self.name:
            raise FormatError("tensor name must be a non-empty string")
        if self.dtype not in DTYPE_TAGS:
            raise FormatError(f"tensor '{self.name}': unsupported dtype tag {self.dtype!r}")
        if len(self.shape) == 0 or any(d < 1 for d in self.shape):
            raise FormatError(
                f"tensor '{self.name}': shape must be non-empty with all dims >= 1, got {self.shape}"
            )
        expected = int(np.prod(self.shape)) * DTYPE_TAGS[self.dtype].itemsize
        if self.byte_length != expected:
            raise FormatError(
                f"tensor '{self.name}': byte length {self.byte_length} does not match "
                f"shape {self.shape} x {self.dtype} (expected {expected})"
            )
        if self.byte_offset < 0:
            raise FormatError(f"tensor '{self.name}': negative byte offset")


def _freeze_tensor(name: str, value: np.ndarray) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in _TAG_FOR_KIND:
        raise ValidationError(
            f"tensor '{name}': dtype {arr.dtype} unsupported (expected float32 or float64)"
        )
    if arr.ndim not in (1, 2):
        raise ValidationError(f"tensor '{name}': only 1-D and 2-D tensors supported, got ndim={arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ValidationError(f"tensor '{name}': all dims must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"tensor '{name}' contains non-finite elements")
    out = np.ascontiguousarray(arr)
    if out is arr or out.base is arr:
        out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TensorMap:
    """Immutable ordered collection of named dense tensors for one model or delta.

    Arithmetic between two maps requires identical key sets and per-key
    identical shapes.  Every element is finite; violations raise at
    construction time, so a constructed map is always safe to save.
    """

    entries: Mapping[str, np.ndarray]
    model_id: str
    role: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r} (expected one of {sorted(ROLES)})")
        frozen: dict[str, np.ndarray] = {}
        for name, value in self.entries.items():
            if not isinstance(name, str) or not name:
                raise ValidationError(f"tensor names must be non-empty strings, got {name!r}")
            if name == _METADATA_KEY:
                raise ValidationError(f"tensor name {name!r} is reserved")
            frozen[name] = _freeze_tensor(name, value)
        object.__setattr__(self, "entries", MappingProxyType(frozen))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterable[str]:
        return iter(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    def with_role(self, role: str, model_id: str | None = None) -> "TensorMap":
        return TensorMap(dict(self.entries), model_id if model_id is not None else self.model_id, role)


# A task vector is a TensorMap tagged role="delta"; model_id records provenance.
TaskVector = TensorMap


@dataclass(frozen=True)
class LoraFactorPair:
    """Low-rank adapter factors perturbing one dense 2-D layer.

    The dense update materializes as (alpha / rank) * b_factor @ a_factor,
    an m x n matrix of rank at most `rank`.
    """

    a_factor: np.ndarray = field(repr=False)
    b_factor: np.ndarray = field(repr=False)
    rank: int
    alpha: float
    target_name: str

    def __post_init__(self) -> None:
        a = _freeze_tensor(f"{self.target_name}{_LORA_A_SUFFIX}", self.a_factor)
        b = _freeze_tensor(f"{self.target_name}{_LORA_B_SUFFIX}", self.b_factor)
        object.__setattr__(self, "a_factor", a)
        object.__setattr__(self, "b_factor", b)
        if not self.target_name:
            raise ValidationError("LoRA pair needs a non-empty target layer name")
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"LoRA factors for '{self.target_name}' must both be 2-D")
        if self.rank < 1:
            raise ValidationError(f"LoRA rank must be positive, got {self.rank}")
        if a.shape[0] != self.rank or b.shape[1] != self.rank:
            raise ShapeError(
                f"LoRA '{self.target_name}': a_factor rows ({a.shape[0]}) and b_factor "
                f"columns ({b.shape[1]}) must both equal rank {self.rank}"
            )
        m, n = b.shape[0], a.shape[1]
        if self.rank > min(m, n):
            raise ShapeError(
                f"LoRA '{self.target_name}': rank {self.rank} exceeds min(m, n) = {min(m, n)}"
            )
        if not self.alpha > 0:
            raise ValidationError(f"LoRA alpha must be positive, got {self.alpha}")

    @property
    def dense_shape(self) -> tuple[int, int]:
        return (self.b_factor.shape[0], self.a_factor.shape[1])


# ---------------------------------------------------------------------------
# Interchange I/O
# ---------------------------------------------------------------------------


def _parse_header(raw: bytes) -> tuple[dict[str, TensorMeta], dict[str, str]]:
    def reject_duplicates(pairs):
        seen = {}
        for key, value in pairs:
            if key in seen:
                raise FormatError(f"duplicate tensor name {key!r} in header")
            seen[key] = value
        return seen

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not valid UTF-8 at byte {8 + exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON at byte {8 + exc.pos}: {exc.msg}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object mapping tensor names to descriptors")

    metadata: dict[str, str] = {}
    metas: dict[str, TensorMeta] = {}
    for name, desc in header.items():
        if name == _METADATA_KEY:
            if not isinstance(desc, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in desc.items()
            ):
                raise FormatError("__metadata__ must map strings to strings")
            metadata = dict(desc)
            continue
        if not isinstance(desc, dict):
            raise FormatError(f"tensor '{name}': descriptor must be a JSON object")
        missing = {"dtype", "shape", "data_offsets"} - desc.keys()
        if missing:
            raise FormatError(f"tensor '{name}': descriptor missing {sorted(missing)}")
        shape = desc["shape"]
        offsets = desc["data_offsets"]
        if not isinstance(shape, list) or not all(isinstance(d, int) for d in shape):
            raise FormatError(f"tensor '{name}': shape must be a list of integers")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
            or offsets[0] > offsets[1]
        ):
            raise FormatError(f"tensor '{name}': data_offsets must be [begin, end] with begin <= end")
        metas[name] = TensorMeta(
            name=name,
            dtype=str(desc["dtype"]),
            shape=tuple(shape),
            byte_offset=offsets[0],
            byte_length=offsets[1] - offsets[0],
        )
    return metas, metadata


def _read_raw_header(fh, path: Path) -> bytes:
    size = path.stat().st_size
    prefix = fh.read(8)
    if len(prefix) < 8:
        raise FormatError(f"{path}: file shorter than the 8-byte header-length prefix")
    header_len = int.from_bytes(prefix, "little", signed=False)
    if 8 + header_len > size:
        raise FormatError(
            f"{path}: header declares {header_len} bytes but only {size - 8} present after byte 8"
        )
    return fh.read(header_len)


def read_header(path: str | Path) -> tuple[dict[str, TensorMeta], dict[str, str]]:
    """Parse only the header of an interchange file (no tensor data read)."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = _read_raw_header(fh, path)
    return _parse_header(raw)


def load_checkpoint(
    path: str | Path,
    model_id: str | None = None,
    role: str | None = None,
) -> TensorMap:
    """Load an interchange file into a TensorMap.

    Header metadata supplies model_id and role when present; explicit
    arguments override, and the fallbacks are the file stem and "finetuned".

    Raises FormatError for malformed headers, TruncatedDataError when the
    data block is shorter than the header declares, and ValidationError for
    non-finite elements (the message names the offending tensor).
    """
    path = Path(path)
    with open(path, "rb") as fh:
        metas, metadata = _parse_header(_read_raw_header(fh, path))
        block = fh.read()

    entries: dict[str, np.ndarray] = {}
    for name, meta in metas.items():
        end = meta.byte_offset + meta.byte_length
        if end > len(block):
            raise TruncatedDataError(
                f"{path}: tensor '{name}' needs data bytes [{meta.byte_offset}, {end}) "
                f"but the data block holds only {len(block)} bytes"
            )
        flat = np.frombuffer(block, dtype=DTYPE_TAGS[meta.dtype], count=int(np.prod(meta.shape)),
                             offset=meta.byte_offset)
        entries[name] = flat.reshape(meta.shape)

    return TensorMap(
        entries=entries,
        model_id=model_id if model_id is not None else metadata.get("model_id", path.stem),
        role=role if role is not None else metadata.get("role", "finetuned"),
    )


def _serialize(entries: Mapping[str, np.ndarray], metadata: dict[str, str]) -> bytes:
    header: dict[str, object] = {}
    if metadata:
        header[_METADATA_KEY] = dict(metadata)
    chunks: list[bytes] = []
    offset = 0
    for name, arr in entries.items():
        tag = _TAG_FOR_KIND[arr.dtype]
        data = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
        header[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return len(raw).to_bytes(8, "little") + raw + b"".join(chunks)


def save_checkpoint(tmap: TensorMap, path: str | Path) -> None:
    """Write a TensorMap so that load_checkpoint reproduces it bit-exactly."""
    metadata = {"model_id": tmap.model_id, "role": tmap.role}
    Path(path).write_bytes(_serialize(tmap.entries, metadata))


def save_lora_adapter(
    pairs: Iterable[LoraFactorPair],
    path: str | Path,
    model_id: str = "",
) -> None:
    """Write LoRA factor pairs as an interchange file.

    Each pair becomes two tensors, "<target>.lora_a" and "<target>.lora_b",
    with rank and alpha recorded in the header metadata.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("cannot save an empty LoRA adapter")
    ranks = {p.rank for p in pairs}
    alphas = {float(p.alpha) for p in pairs}
    if len(ranks) != 1 or len(alphas) != 1:
        raise ValidationError("all LoRA pairs in one adapter must share rank and alpha")
    entries: dict[str, np.ndarray] = {}
    for pair in pairs:
        a_name = pair.target_name + _LORA_A_SUFFIX
        b_name = pair.target_name + _LORA_B_SUFFIX
        if a_name in entries:
            raise ValidationError(f"duplicate LoRA target '{pair.target_name}'")
        entries[a_name] = pair.a_factor
        entries[b_name] = pair.b_factor
    metadata = {
        "model_id": model_id,
        "role": "delta",
        "lora_rank": str(ranks.pop()),
        "lora_alpha": repr(alphas.pop()),
    }
    Path(path).write_bytes(_serialize(entries, metadata))


def load_lora_adapter(path: str | Path) -> tuple[list[LoraFactorPair], str]:
    """Read a LoRA factor file; returns the pairs and the adapter's model_id."""
    path = Path(path)
    metas, metadata = read_header(path)
    if "lora_rank" not in metadata or "lora_alpha" not in metadata:
        raise FormatError(f"{path}: missing lora_rank/lora_alpha metadata; not a LoRA factor file")
    rank = int(metadata["lora_rank"])
    alpha = float(metadata["lora_alpha"])
    tmap = load_checkpoint(path)

    targets: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in tmap.items():
        if name.endswith(_LORA_A_SUFFIX):
            targets.setdefault(name[: -len(_LORA_A_SUFFIX)], {})["a"] = arr
        elif name.endswith(_LORA_B_SUFFIX):
            targets.setdefault(name[: -len(_LORA_B_SUFFIX)], {})["b"] = arr
        else:
            raise FormatError(f"{path}: tensor '{name}' is neither a .lora_a nor a .lora_b factor")
    pairs = []
    for target in sorted(targets):
        factors = targets[target]
        if "a" not in factors or "b" not in factors:
            raise FormatError(f"{path}: target '{target}' is missing one of its paired factors")
        pairs.append(
            LoraFactorPair(
                a_factor=factors["a"],
                b_factor=factors["b"],
                rank=rank,
                alpha=alpha,
                target_name=target,
            )
        )
    return pairs, tmap.model_id


# ---------------------------------------------------------------------------
# Task-vector arithmetic
# ---------------------------------------------------------------------------


def _require_matching(a: TensorMap, b: TensorMap) -> None:
    if a.keys() != b.keys():
        only_a = sorted(a.keys() - b.keys())
        only_b = sorted(b.keys() - a.keys())
        raise ShapeError(f"key sets differ: only in first {only_a}, only in second {only_b}")
    for name in a.keys():
        if a[name].shape != b[name].shape:
            raise ShapeError(
                f"tensor '{name}': shape {a[name].shape} vs {b[name].shape}"
            )


def compute_task_vector(finetuned: TensorMap, pretrained: TensorMap) -> TaskVector:
    """Per-element difference finetuned - pretrained, carried in float64."""
    _require_matching(finetuned, pretrained)
    entries = {
        name: finetuned[name].astype(np.float64) - pretrained[name].astype(np.float64)
        for name in finetuned.keys()
    }
    return TensorMap(entries=entries, model_id=finetuned.model_id, role="delta")


def apply_delta(pretrained: TensorMap, delta: TaskVector) -> TensorMap:
    """Add a delta onto pretrained weights, preserving per-tensor storage dtype."""
    _require_matching(pretrained, delta)
    entries = {}
    for name in pretrained.keys():
        base = pretrained[name]
        merged = base.astype(np.float64) + delta[name].astype(np.float64)
        entries[name] = merged.astype(base.dtype)
    return TensorMap(entries=entries, model_id=delta.model_id, role="merged")


def materialize_lora(pair: LoraFactorPair) -> np.ndarray:
    """Densify one adapter: (alpha / rank) * b_factor @ a_factor."""
    scale = float(pair.alpha) / float(pair.rank)
    return scale * (pair.b_factor.astype(np.float64) @ pair.a_factor.astype(np.float64))


def lora_to_task_vector(
    pairs: Iterable[LoraFactorPair],
    pretrained: TensorMap,
    model_id: str = "",
) -> TaskVector:
    """Expand LoRA factors into a dense delta over the full pretrained key set.

    Adapted layers get the materialized low-rank update; every other layer is
    an explicit zero so the result is arithmetic-compatible with dense deltas.
    """
    entries = {name: np.zeros(arr.shape, dtype=np.float64) for name, arr in pretrained.items()}
    seen: set[str] = set()
    for pair in pairs:
        if pair.target_name in seen:
            raise ShapeError(f"duplicate LoRA target '{pair.target_name}'")
        seen.add(pair.target_name)
        if pair.target_name not in entries:
            raise ShapeError(f"LoRA target '{pair.target_name}' not present in pretrained keys")
        base_shape = pretrained[pair.target_name].shape
        if base_shape != pair.dense_shape:
            raise ShapeError(
                f"LoRA target '{pair.target_name}': dense shape {pair.dense_shape} "
                f"does not match pretrained shape {base_shape}"
            )
        entries[pair.target_name] = materialize_lora(pair)
    if not seen:
        raise ValidationError("LoRA adapter contains no factor pairs")
    return TensorMap(entries=entries, model_id=model_id, role="delta")
