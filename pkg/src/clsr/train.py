"""Mini-batch training with per-epoch validation, best-checkpoint tracking and early stopping."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import InteractionDataset, build_examples, derive_rng
from .evaluation import evaluate
from .model import ClsrModel, make_batch


class NumericError(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 500
    epochs: int = 10
    patience: int = 3
    seed: int = 0
    train_negatives: int = 4
    eval_negatives: int = 99
    max_steps: int = 0  # 0 = unlimited
    validate: bool = True


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # {"step","epoch","rec","con","loss"}
    epochs: list = field(default_factory=list)  # {"epoch", metrics..., "seconds"}

    def rec_series(self) -> np.ndarray:
        return np.array([s["rec"] for s in self.steps])

    def loss_series(self) -> np.ndarray:
        return np.array([s["loss"] for s in self.steps])

    def append_lines(self, path, start: int = 0) -> None:
        with Path(path).open("a") as fh:
            for s in self.steps[start:]:
                fh.write(json.dumps(s) + "\n")


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0
    best_gauc: float = -math.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    best_params: dict | None = None
    best_buffers: dict | None = None


def epoch_examples(dataset: InteractionDataset, model: ClsrModel, settings: TrainSettings, epoch: int):
    """Training examples for one epoch; negatives are redrawn from a per-epoch stream."""
    seed = int(derive_rng(settings.seed, "negatives", epoch).integers(0, 2**31 - 1))
    return build_examples(dataset, settings.train_negatives, model.config.max_seq_len, seed, splits={"train"})


def train_step(model: ClsrModel, optimizer: ad.Adam, examples) -> dict:
    batch = make_batch(examples)
    loss, parts, _ = model.joint_loss(batch, train=True)
    if not math.isfinite(parts["loss"]):
        raise NumericError(f"non-finite loss {parts['loss']}")
    grads = ad.backward(loss, model.params.values())
    optimizer.step({name: grads[p] for name, p in model.params.items()})
    return parts


class Trainer:
    def __init__(self, model: ClsrModel, dataset: InteractionDataset, settings: TrainSettings,
                 val_examples=None, on_epoch=None):
        self.model = model
        self.dataset = dataset
        self.settings = settings
        self.optimizer = ad.Adam(model.params, lr=settings.lr)
        self.state = TrainState()
        self.log = TrainLog()
        self.val_examples = val_examples
        self.on_epoch = on_epoch

    def snapshot(self) -> tuple[dict, dict]:
        return ({k: p.value.copy() for k, p in self.model.params.items()},
                copy.deepcopy(self.model.store.buffers))

    def run(self) -> TrainLog:
        s, st = self.settings, self.state
        while st.epoch < s.epochs:
            if s.max_steps and st.step >= s.max_steps:
                break
            t0 = time.perf_counter()
            epoch = st.epoch
            examples = epoch_examples(self.dataset, self.model, s, epoch)
            order = derive_rng(s.seed, "order", epoch).permutation(len(examples))
            for lo in range(0, len(order), s.batch_size):
                idx = order[lo:lo + s.batch_size]
                if len(idx) < 2:
                    continue  # batch norm needs two rows
                parts = train_step(self.model, self.optimizer, [examples[i] for i in idx])
                st.step += 1
                self.log.steps.append({"step": st.step, "epoch": epoch, **parts})
                if s.max_steps and st.step >= s.max_steps:
                    break
            st.epoch += 1
            record = {"epoch": epoch, "steps": st.step}
            stop = False
            if s.validate and self.val_examples:
                rep = evaluate(self.model, self.val_examples)
                record.update(val_auc=rep.auc, val_gauc=rep.gauc, val_mrr=rep.mrr)
                if rep.gauc > st.best_gauc:
                    st.best_gauc, st.best_epoch, st.bad_epochs = rep.gauc, epoch, 0
                    st.best_params, st.best_buffers = self.snapshot()
                else:
                    st.bad_epochs += 1
                    stop = st.bad_epochs >= s.patience
            record["seconds"] = time.perf_counter() - t0
            self.log.epochs.append(record)
            if self.on_epoch is not None:
                self.on_epoch(self, record)
            if stop:
                break
        return self.log

    def restore_best(self) -> None:
        st = self.state
        if st.best_params is None:
            return
        for k, v in st.best_params.items():
            self.model.params[k].value = v.copy()
        self.model.store.buffers.update(copy.deepcopy(st.best_buffers))
