"""Checkpoint directories: ``manifest.json`` plus one raw tensor file per array.

Tensor files hold an 8-byte magic, the rank and each dimension as
little-endian int64, then the values as little-endian float32.
"""

from __future__ import annotations

import dataclasses
import json
import re
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .exceptions import CheckpointError
from .model import PrototypeNet, PrototypeRecord, build_model

FORMAT_VERSION = 1
MAGIC = b"XPNTNSR\x01"


def write_tensor(path, array) -> None:
    arr = np.array(array, dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray([arr.ndim, *arr.shape], dtype="<i8").tobytes())
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad tensor magic")
    rank = int(np.frombuffer(data, "<i8", 1, 8)[0])
    if not 0 <= rank <= 8 or len(data) < 16 + 8 * rank:
        raise CheckpointError(f"{path}: corrupt tensor header (rank {rank})")
    shape = tuple(int(v) for v in np.frombuffer(data, "<i8", rank, 16))
    offset = 16 + 8 * rank
    count = int(np.prod(shape)) if shape else 1
    if any(d < 0 for d in shape) or len(data) - offset != 4 * count:
        raise CheckpointError(f"{path}: payload size does not match header shape {shape}")
    return np.frombuffer(data, "<f4", count, offset).reshape(shape).copy()


def _fname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".f32"


def save_checkpoint(path, model: PrototypeNet, train_state: dict | None = None,
                    optimizer_state: dict | None = None, hyperparameters: dict | None = None) -> Path:
    """Write ``model`` (and optionally trainer/optimizer state) to directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, list[int]] = {}

    def put(name, value):
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        write_tensor(path / _fname(name), arr)
        tensors[name] = list(arr.shape)

    for name, value in model.state_dict().items():
        if value.dtype == torch.bool:
            continue
        put(f"model.{name}", value)

    provenance = []
    for (c, k), rec in sorted(model.provenance.items()):
        put(f"provenance.{c}.{k}.occurrence_map", rec.occurrence_map)
        put(f"provenance.{c}.{k}.pooled", rec.pooled)
        if rec.bbox_mask is not None:
            put(f"provenance.{c}.{k}.bbox_mask", rec.bbox_mask.astype(np.float32))
        provenance.append({"class": c, "proto": k, "image_id": rec.image_id, "similarity": rec.similarity,
                           "has_bbox": rec.bbox_mask is not None})

    optim_meta = None
    if optimizer_state is not None:
        optim_meta = {"param_groups": optimizer_state["param_groups"], "state": {}}
        for idx, st in optimizer_state["state"].items():
            optim_meta["state"][str(idx)] = sorted(st)
            for key, value in st.items():
                put(f"optim.{idx}.{key}", torch.as_tensor(value, dtype=torch.float32))

    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "variant": model.variant,
        "class_names": list(model.class_names),
        "active": model.active.cpu().numpy().astype(bool).tolist(),
        "pruned": bool(model.pruned),
        "hyperparameters": hyperparameters or {},
        "train_state": train_state,
        "optimizer": optim_meta,
        "provenance": provenance,
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version!r}")
    return manifest


def load_checkpoint(path):
    """Return ``(model, train_state, optimizer_state, manifest)``."""
    path = Path(path)
    manifest = load_manifest(path)
    try:
        cfg = ModelConfig(**manifest["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    names = manifest["class_names"]
    if len(names) != cfg.num_classes:
        raise CheckpointError(f"{path}: manifest lists {len(names)} classes but config says {cfg.num_classes}")
    model = build_model(cfg, names)
    state = {}
    for name, value in model.state_dict().items():
        if value.dtype == torch.bool:
            continue
        arr = read_tensor(path / _fname(f"model.{name}"))
        if tuple(arr.shape) != tuple(value.shape):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arr.shape}, manifest/config expect {tuple(value.shape)}"
            )
        state[name] = torch.from_numpy(arr).to(value.dtype)
    active = torch.tensor(manifest["active"], dtype=torch.bool)
    if tuple(active.shape) != tuple(model.active.shape):
        raise CheckpointError(f"{path}: active mask shape {tuple(active.shape)} does not match the model")
    state["active"] = active
    model.load_state_dict(state)
    model.pruned = bool(manifest.get("pruned", False))
    for entry in manifest.get("provenance", []):
        c, k = entry["class"], entry["proto"]
        base = f"provenance.{c}.{k}"
        model.provenance[(c, k)] = PrototypeRecord(
            image_id=entry["image_id"],
            class_index=c,
            proto_index=k,
            similarity=entry["similarity"],
            occurrence_map=read_tensor(path / _fname(base + ".occurrence_map")),
            pooled=read_tensor(path / _fname(base + ".pooled")),
            bbox_mask=read_tensor(path / _fname(base + ".bbox_mask")).astype(bool) if entry.get("has_bbox") else None,
        )
    optim = None
    meta = manifest.get("optimizer")
    if meta is not None:
        optim = {"param_groups": meta["param_groups"], "state": {}}
        for idx, keys in meta["state"].items():
            optim["state"][int(idx)] = {
                key: torch.from_numpy(read_tensor(path / _fname(f"optim.{idx}.{key}"))) for key in keys
            }
    return model, manifest.get("train_state"), optim, manifest
