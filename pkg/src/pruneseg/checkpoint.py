"""Checkpoint serialization: one file holding a JSON manifest plus raw
little-endian parameter and optimizer-slot blobs.

Layout: 8-byte magic, u32 format version, u64 manifest length, manifest
JSON, then the blobs at the offsets the manifest declares.  Loading rebuilds
the network from the embedded architecture descriptor (pruned branch slots
stay empty), restores parameters and optimizer slots by name, and validates
sizes so truncation surfaces as a checkpoint error rather than a crash.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .network import Network, network_from_descriptor
from .pruning import ControllerState

MAGIC = b"PRSGCKP1"
VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    net: Network
    optimizer_kind: str
    optimizer_hyper: dict
    optimizer_meta: dict
    optimizer_slots: dict[str, np.ndarray]
    controller: Optional[ControllerState]
    rng_states: dict
    extra: dict

    @property
    def descriptor(self) -> dict:
        return self.net.descriptor()


def _rng_state_to_json(state: dict) -> dict:
    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__nd__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return conv(state)


def _rng_state_from_json(doc: dict) -> dict:
    def conv(v):
        if isinstance(v, dict) and "__nd__" in v:
            return np.asarray(v["__nd__"], dtype=v["dtype"])
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(doc)


def save_checkpoint(path, net: Network, optimizer, controller: Optional[ControllerState],
                    rng_states: dict, epoch: int, extra: Optional[dict] = None):
    """rng_states maps stream names to numpy BitGenerator state dicts."""
    blobs: list[bytes] = []
    offset = 0

    def add_blob(arr: np.ndarray) -> dict:
        nonlocal offset
        raw = np.ascontiguousarray(arr).tobytes()
        entry = {"shape": list(arr.shape), "dtype": str(arr.dtype),
                 "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
        return entry

    params_meta = []
    for name, t in net.parameters():
        entry = add_blob(t.data)
        entry["name"] = name
        params_meta.append(entry)
    slots_meta = []
    for name, arr in optimizer.slot_arrays():
        entry = add_blob(arr)
        entry["name"] = name
        slots_meta.append(entry)

    manifest = {
        "version": VERSION,
        "epoch": epoch,
        "seed": net.seed,
        "precision": str(net.dtype),
        "arch": net.descriptor(),
        "params": params_meta,
        "optimizer": {"kind": optimizer.kind, "hyper": optimizer.hyper(),
                      "meta": optimizer.state_meta(), "slots": slots_meta},
        "controller": controller.to_dict() if controller is not None else None,
        "rng": {k: _rng_state_to_json(v) for k, v in rng_states.items()},
        "extra": extra or {},
    }
    payload = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(payload)).tobytes())
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = int(np.frombuffer(raw[8:12], dtype=np.uint32)[0])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    mlen = int(np.frombuffer(raw[12:20], dtype=np.uint64)[0])
    try:
        manifest = json.loads(raw[20:20 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc
    body = raw[20 + mlen:]

    def read_blob(entry) -> np.ndarray:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise CheckpointError(
                f"checkpoint {path} truncated: blob {entry.get('name')} needs bytes "
                f"[{start}, {start + n}) of {len(body)}")
        arr = np.frombuffer(body[start:start + n], dtype=entry["dtype"])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"blob {entry.get('name')} holds {arr.size} values, "
                                  f"manifest shape {entry['shape']} needs {expected}")
        return arr.reshape(entry["shape"]).copy()

    net = network_from_descriptor(manifest["arch"], seed=manifest["seed"],
                                  dtype=np.dtype(manifest["precision"]))
    live = dict(net.parameters())
    seen = set()
    for entry in manifest["params"]:
        t = live.get(entry["name"])
        if t is None:
            raise CheckpointError(f"checkpoint parameter {entry['name']!r} has no slot "
                                  "in the architecture descriptor")
        arr = read_blob(entry)
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(f"parameter {entry['name']!r}: blob shape {arr.shape} "
                                  f"vs network shape {tuple(t.shape)}")
        t.data = arr.astype(net.dtype, copy=False)
        seen.add(entry["name"])
    missing = set(live) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters for {sorted(missing)[:4]}")

    slots = {e["name"]: read_blob(e) for e in manifest["optimizer"]["slots"]}
    controller = None
    if manifest["controller"] is not None:
        controller = ControllerState.from_dict(manifest["controller"])
    return Checkpoint(
        epoch=manifest["epoch"],
        net=net,
        optimizer_kind=manifest["optimizer"]["kind"],
        optimizer_hyper=manifest["optimizer"]["hyper"],
        optimizer_meta=manifest["optimizer"]["meta"],
        optimizer_slots=slots,
        controller=controller,
        rng_states={k: _rng_state_from_json(v) for k, v in manifest["rng"].items()},
        extra=manifest.get("extra", {}),
    )
