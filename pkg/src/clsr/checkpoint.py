"""Versioned checkpoint container stored as an uncompressed ``.npz`` archive.

Every array is little-endian float64 and keyed by a prefixed name:
``param/<name>``, ``buffer/<name>``, ``adam_m/<name>``, ``adam_v/<name>``.
One extra uint8 array ``meta`` holds UTF-8 JSON with the format tag,
version, model config, run config echo, dense-id maps, counters, trainer
bookkeeping and RNG stream description.  Loading never unpickles.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ClsrConfig, ClsrModel

FORMAT = "clsr-checkpoint"
VERSION = 1
DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the requested model."""


@dataclass
class Checkpoint:
    config: ClsrConfig
    params: dict
    buffers: dict = field(default_factory=dict)
    adam: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)
    epoch: int = 0
    step: int = 0
    trainer: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    run_config: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: ClsrModel, optimizer=None, **extra) -> "Checkpoint":
        """Copy the model's current tensors (and optimizer moments) into a checkpoint."""
        adam = None
        if optimizer is not None:
            st = optimizer.state_dict()
            adam = {"step": st["step"], "m": {k: v.copy() for k, v in st["m"].items()},
                    "v": {k: v.copy() for k, v in st["v"].items()}}
        return cls(config=model.config,
                   params={k: p.value.copy() for k, p in model.params.items()},
                   buffers={k: np.array(v, dtype=np.float64) for k, v in model.store.buffers.items()},
                   adam=adam, **extra)

    def build_model(self) -> ClsrModel:
        model = ClsrModel(self.config, len(self.user_ids), len(self.item_ids))
        self.apply(model)
        return model

    def apply(self, model: ClsrModel, optimizer=None) -> None:
        """Load tensors into ``model``; every name and shape must agree."""
        if model.config != self.config:
            raise CheckpointError(f"config mismatch: {config_diff(self.config, model.config)}")
        _match("parameter", self.params, {k: p.value for k, p in model.params.items()})
        _match("buffer", self.buffers, model.store.buffers)
        for k, v in self.params.items():
            model.params[k].value = v.copy()
        for k, v in self.buffers.items():
            model.store.buffers[k] = v.copy()
        if optimizer is not None:
            if self.adam is None:
                raise CheckpointError("checkpoint carries no optimizer state")
            optimizer.load_state_dict(self.adam)


def config_diff(a: ClsrConfig, b: ClsrConfig) -> str:
    da, db = a.to_dict(), b.to_dict()
    return ", ".join(f"{k}: {da.get(k)!r} vs {db.get(k)!r}" for k in sorted(set(da) | set(db))
                     if da.get(k) != db.get(k))


def _match(kind: str, saved: dict, live: dict) -> None:
    missing = sorted(set(live) - set(saved))
    extra = sorted(set(saved) - set(live))
    if missing or extra:
        raise CheckpointError(f"{kind} names differ: missing {missing}, unexpected {extra}")
    for k in saved:
        if np.shape(saved[k]) != np.shape(live[k]):
            raise CheckpointError(f"{kind} {k!r} has shape {np.shape(saved[k])}, "
                                  f"model expects {np.shape(live[k])}")


def save(path, ckpt: Checkpoint) -> Path:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "run_config": ckpt.run_config,
        "user_ids": list(ckpt.user_ids),
        "item_ids": list(ckpt.item_ids),
        "epoch": int(ckpt.epoch),
        "step": int(ckpt.step),
        "trainer": ckpt.trainer,
        "rng": ckpt.rng,
        "adam_step": None if ckpt.adam is None else int(ckpt.adam["step"]),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    groups = [("param", ckpt.params), ("buffer", ckpt.buffers)]
    if ckpt.adam is not None:
        groups += [("adam_m", ckpt.adam["m"]), ("adam_v", ckpt.adam["v"])]
    for prefix, table in groups:
        for name, value in table.items():
            arrays[f"{prefix}/{name}"] = np.ascontiguousarray(value, dtype=DTYPE)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load(path, expect: ClsrConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt metadata") from None
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
    try:
        config = ClsrConfig.from_dict(meta["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config echo ({exc})") from None
    if expect is not None and expect != config:
        raise CheckpointError(f"{path}: config mismatch: {config_diff(config, expect)}")
    tables = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for key, value in arrays.items():
        prefix, _, name = key.partition("/")
        if prefix not in tables or not name:
            raise CheckpointError(f"{path}: unexpected entry {key!r}")
        if value.dtype != DTYPE:
            raise CheckpointError(f"{path}: entry {key!r} has dtype {value.dtype}, expected <f8")
        tables[prefix][name] = value.astype(np.float64)
    adam = None
    if meta.get("adam_step") is not None:
        adam = {"step": meta["adam_step"], "m": tables["adam_m"], "v": tables["adam_v"]}
    return Checkpoint(config=config, params=tables["param"], buffers=tables["buffer"], adam=adam,
                      user_ids=meta["user_ids"], item_ids=meta["item_ids"], epoch=meta["epoch"],
                      step=meta["step"], trainer=meta.get("trainer", {}), rng=meta.get("rng", {}),
                      run_config=meta.get("run_config", {}))
