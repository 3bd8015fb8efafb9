"""Export torch/PEFT checkpoints into the interchange format and back.

Dense sources: a directory holding `model.safetensors` or `pytorch_model.bin`.
LoRA sources: a PEFT adapter directory holding `adapter_config.json` plus
`adapter_model.safetensors` or `adapter_model.bin`; factor pairs are emitted
as `<target>.lora_a` / `<target>.lora_b` with rank and alpha recorded in the
header metadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .interchange import read_tensors, write_tensors

DENSE_FILES = ("model.safetensors", "pytorch_model.bin")
ADAPTER_FILES = ("adapter_model.safetensors", "adapter_model.bin")
ADAPTER_CONFIG = "adapter_config.json"

_LORA_MARKERS = (".lora_A.weight", ".lora_B.weight")
_PEFT_PREFIXES = ("base_model.model.", "base_model.")


class BridgeError(Exception):
    """Source layout, manifest, or key-mapping problem."""


@dataclass
class ExportManifest:
    """What to export and under which names.

    target_keys maps source layer names to interchange names; empty means
    identity over everything discovered in the source. dtype_policy is
    "preserve" (float32/float64 only) or "cast_fp32".
    """

    source_path: Path
    target_keys: dict[str, str] = field(default_factory=dict)
    dtype_policy: str = "preserve"

    def __post_init__(self) -> None:
        self.source_path = Path(self.source_path)
        if self.dtype_policy not in ("preserve", "cast_fp32"):
            raise BridgeError(f"unknown dtype policy {self.dtype_policy!r}")
        targets = list(self.target_keys.values())
        if len(set(targets)) != len(targets):
            raise BridgeError("manifest target_keys mapping must be injective")

    @classmethod
    def from_json(cls, path: str | Path) -> "ExportManifest":
        spec = json.loads(Path(path).read_text())
        return cls(
            source_path=Path(spec["source_path"]),
            target_keys=dict(spec.get("target_keys", {})),
            dtype_policy=spec.get("dtype_policy", "preserve"),
        )


def _to_numpy(name: str, value, policy: str) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        tensor = value.detach().cpu().contiguous()
        if tensor.dtype in (torch.float16, torch.bfloat16):
            if policy == "preserve":
                raise BridgeError(
                    f"tensor '{name}' is {tensor.dtype}; not representable under the "
                    "preserve policy, use cast_fp32"
                )
            arr = tensor.float().numpy()
        elif tensor.dtype == torch.float64:
            arr = tensor.numpy()
        elif tensor.dtype == torch.float32:
            arr = tensor.numpy()
        else:
            raise BridgeError(f"tensor '{name}' has unsupported dtype {tensor.dtype}")
    else:
        arr = np.asarray(value)
        if arr.dtype == np.float16:
            if policy == "preserve":
                raise BridgeError(
                    f"tensor '{name}' is float16; not representable under the "
                    "preserve policy, use cast_fp32"
                )
            arr = arr.astype(np.float32)
        elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise BridgeError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
    if policy == "cast_fp32":
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise BridgeError(f"tensor '{name}' contains non-finite values")
    return arr


def _load_state_dict(directory: Path, candidates: tuple[str, ...]):
    for filename in candidates:
        path = directory / filename
        if not path.exists():
            continue
        if filename.endswith(".safetensors"):
            tensors, _ = read_tensors(path)
            return tensors
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            raise BridgeError(f"{path}: expected a state dict, got {type(state).__name__}")
        return state
    raise BridgeError(
        f"{directory}: unknown source layout; looked for {', '.join(candidates)}"
    )


def _lora_target(key: str) -> tuple[str, str] | None:
    """Map a PEFT factor key to (dense target name, 'a'|'b')."""
    for marker in _LORA_MARKERS:
        if key.endswith(marker):
            stem = key[: -len(marker)]
            for prefix in _PEFT_PREFIXES:
                if stem.startswith(prefix):
                    stem = stem[len(prefix):]
                    break
            side = "a" if marker == ".lora_A.weight" else "b"
            return f"{stem}.weight", side
    return None


def export_checkpoint(manifest: ExportManifest, out_path: str | Path, lora: bool = False) -> None:
    """Write the source checkpoint (or adapter) as one interchange file."""
    if lora:
        _export_lora(manifest, out_path)
    else:
        _export_dense(manifest, out_path)


def _apply_mapping(manifest: ExportManifest, names) -> dict[str, str]:
    if not manifest.target_keys:
        return {name: name for name in names}
    missing = sorted(set(manifest.target_keys) - set(names))
    if missing:
        raise BridgeError(f"manifest names sources not present in checkpoint: {missing}")
    return dict(manifest.target_keys)


def _export_dense(manifest: ExportManifest, out_path: str | Path) -> None:
    state = _load_state_dict(manifest.source_path, DENSE_FILES)
    mapping = _apply_mapping(manifest, state.keys())
    tensors = {
        target: _to_numpy(source, state[source], manifest.dtype_policy)
        for source, target in mapping.items()
    }
    metadata = {"model_id": manifest.source_path.name, "role": "finetuned"}
    write_tensors(out_path, tensors, metadata)


def _export_lora(manifest: ExportManifest, out_path: str | Path) -> None:
    config_path = manifest.source_path / ADAPTER_CONFIG
    if not config_path.exists():
        raise BridgeError(f"{manifest.source_path}: missing {ADAPTER_CONFIG}")
    config = json.loads(config_path.read_text())
    if "r" not in config or "lora_alpha" not in config:
        raise BridgeError(f"{config_path}: adapter config lacks 'r'/'lora_alpha'")
    rank = int(config["r"])
    alpha = float(config["lora_alpha"])

    state = _load_state_dict(manifest.source_path, ADAPTER_FILES)
    factors: dict[str, dict[str, np.ndarray]] = {}
    for key, value in state.items():
        parsed = _lora_target(key)
        if parsed is None:
            raise BridgeError(f"unknown source layout: key '{key}' is not a LoRA factor")
        target, side = parsed
        factors.setdefault(target, {})[side] = _to_numpy(key, value, manifest.dtype_policy)

    mapping = _apply_mapping(manifest, factors.keys())
    tensors: dict[str, np.ndarray] = {}
    for source, target in mapping.items():
        pair = factors[source]
        if "a" not in pair or "b" not in pair:
            raise BridgeError(f"adapter target '{source}' is missing one of its paired factors")
        if pair["a"].shape[0] != rank or pair["b"].shape[1] != rank:
            raise BridgeError(
                f"adapter target '{source}': factor shapes {pair['a'].shape}/{pair['b'].shape} "
                f"inconsistent with rank {rank}"
            )
        tensors[f"{target}.lora_a"] = pair["a"]
        tensors[f"{target}.lora_b"] = pair["b"]
    metadata = {
        "model_id": manifest.source_path.name,
        "role": "delta",
        "lora_rank": str(rank),
        "lora_alpha": f"{alpha:g}",
    }
    write_tensors(out_path, tensors, metadata)


def import_merged(
    in_path: str | Path,
    target_dir: str | Path,
    manifest: ExportManifest | None = None,
) -> Path:
    """Write an interchange checkpoint back out as `model.safetensors`.

    Keys are renamed through the inverse of the manifest mapping (identity
    when no manifest is given); any tensor without an inverse entry is an
    error naming it.
    """
    tensors, metadata = read_tensors(in_path)
    inverse = {}
    if manifest is not None and manifest.target_keys:
        inverse = {target: source for source, target in manifest.target_keys.items()}
    renamed = {}
    for name, arr in tensors.items():
        if inverse:
            if name not in inverse:
                raise BridgeError(f"tensor '{name}' has no inverse mapping in the manifest")
            renamed[inverse[name]] = arr
        else:
            renamed[name] = arr
    target_dir = Path(target_dir)
    target_dir.mkdir(parents=True, exist_ok=True)
    out = target_dir / "model.safetensors"
    write_tensors(out, renamed, {"model_id": metadata.get("model_id", "")})
    return out
