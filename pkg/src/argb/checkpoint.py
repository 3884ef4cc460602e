"""Single-file checkpoint: JSON manifest followed by little-endian float32 blobs.

Layout::

    b"ARGBCKPT"            8 bytes magic
    manifest length        uint64, little endian
    manifest               UTF-8 JSON
    blobs                  concatenated float32 arrays; offsets relative to blob start

Integer buffers (batch-norm counters) and scalar optimizer fields live in the manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from argb.model import ARGBModel

MAGIC = b"ARGBCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ARGBModel
    step: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    optimizer_state: dict | None = None  # torch.optim.Adam.state_dict()


def _write_blobs(named: list[tuple[str, torch.Tensor]]):
    entries, chunks, offset = [], [], 0
    for name, t in named:
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    model = ckpt.model
    floats, ints = [], {}
    for name, t in model.state_dict().items():
        if t.is_floating_point():
            floats.append((f"model/{name}", t))
        else:
            ints[name] = int(t.item())

    optim_meta = None
    if ckpt.optimizer_state is not None:
        names = [n for n, _ in model.named_parameters()]
        state = ckpt.optimizer_state["state"]
        group = ckpt.optimizer_state["param_groups"][0]
        optim_meta = {"param_groups": [{k: v for k, v in g.items() if k != "params"} for g in ckpt.optimizer_state["param_groups"]], "steps": {}}
        for pid in group["params"]:
            if pid not in state:
                continue
            pname = names[pid]
            s = state[pid]
            optim_meta["steps"][pname] = float(s["step"])
            floats.append((f"optim/exp_avg/{pname}", s["exp_avg"]))
            floats.append((f"optim/exp_avg_sq/{pname}", s["exp_avg_sq"]))

    manifest = {
        "num_experts": model.num_experts,
        "embedding_dim": model.embedding_dim,
        "step": ckpt.step,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "int_buffers": ints,
        "optimizer": optim_meta,
    }
    return _write_container(path, manifest, floats)


def _write_container(path, manifest: dict, named: list[tuple[str, torch.Tensor]]) -> Path:
    path = Path(path)
    entries, blob = _write_blobs(named)
    manifest = dict(manifest, format_version=FORMAT_VERSION, tensors=entries)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)
    return path


def _read_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    manifest, start = read_manifest(path)
    data = Path(path).read_bytes()[start:]
    tensors = {}
    for e in manifest["tensors"]:
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return manifest, tensors


def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    """Write a plain name -> float32 tensor mapping in the checkpoint container format."""
    return _write_container(path, {"meta": meta or {}}, list(tensors.items()))


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    manifest, tensors = _read_container(path)
    return tensors, manifest.get("meta", {})


def read_manifest(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not an aRGB checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(n).decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest, 16 + n


def load_checkpoint(path) -> Checkpoint:
    manifest, tensors = _read_container(path)
    if "num_experts" not in manifest:
        raise CheckpointError(f"{path}: not a model checkpoint")
    model = ARGBModel(manifest["num_experts"], manifest["embedding_dim"])
    state = {}
    for name, ref in model.state_dict().items():
        if ref.is_floating_point():
            state[name] = tensors[f"model/{name}"]
        else:
            state[name] = torch.tensor(manifest["int_buffers"][name], dtype=ref.dtype)
    model.load_state_dict(state)

    optimizer_state = None
    om = manifest.get("optimizer")
    if om is not None:
        names = [n for n, _ in model.named_parameters()]
        st = {}
        for pid, pname in enumerate(names):
            if pname in om["steps"]:
                st[pid] = {
                    "step": torch.tensor(om["steps"][pname], dtype=torch.float32),
                    "exp_avg": tensors[f"optim/exp_avg/{pname}"],
                    "exp_avg_sq": tensors[f"optim/exp_avg_sq/{pname}"],
                }
        groups = [dict(g) for g in om["param_groups"]]
        groups[0]["params"] = list(range(len(names)))
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        optimizer_state = {"state": st, "param_groups": groups}

    return Checkpoint(model, manifest["step"], manifest["config"], manifest["meta"], optimizer_state)
