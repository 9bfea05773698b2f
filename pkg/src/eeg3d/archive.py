"""Checkpoint archives and JSONL logs shared by every stage.

A checkpoint is a single safetensors file. Its string metadata carries a JSON
header ``{"schema_version": 1, "config_hash": ..., "step": ..., ...}`` under
the key ``header``; tensors are stored under their ``state_dict`` names.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping

import torch
from safetensors import safe_open
from safetensors.torch import save_file

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(cfg: Mapping[str, Any]) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], *,
                    config: Mapping[str, Any] | None = None, step: int = 0,
                    **extra: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema_version": SCHEMA_VERSION,
              "config_hash": config_hash(config or {}),
              "step": int(step)}
    header.update(extra)
    if config is not None:
        header["config"] = dict(config)
    flat = {k: v.detach().to("cpu").contiguous() for k, v in tensors.items()}
    save_file(flat, str(path), metadata={"header": json.dumps(header, sort_keys=True)})
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    tensors = {}
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        for k in f.keys():
            tensors[k] = f.get_tensor(k)
    if "header" not in meta:
        raise CheckpointError(f"{path}: missing header")
    header = json.loads(meta["header"])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    return tensors, header


def _clean(v: Any) -> Any:
    if isinstance(v, torch.Tensor):
        v = v.item() if v.numel() == 1 else v.tolist()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


class JsonlLog:
    """Append-only JSONL writer that also keeps records in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: Mapping[str, Any]) -> None:
        rec = _clean(dict(record))
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def stream(self, key: str) -> list[Any]:
        return [r[key] for r in self.records if key in r]


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
    return path


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    if not sub:
        raise CheckpointError(f"no tensors under prefix {prefix!r}")
    module.load_state_dict(sub)


def tensor_digest(tensors: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:12]
