"""Training loop: SGD with momentum, reduce-on-plateau learning rate,
validation-accuracy early stopping and binary checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .arch import Network, ParamStore, build_model, spec_from_dict, spec_to_dict
from .tensor import NonFiniteError, backward

log = logging.getLogger(__name__)

MAGIC = b"PHIW"
VERSION = 1
HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "multiclass"
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.5
    plateau_patience: int = 10
    min_learning_rate: float = 1e-5
    early_stop_patience: int = 20
    max_epochs: int = 50
    seed: int = 0
    val_fraction: float = 0.2
    record_time: bool = True

    def __post_init__(self):
        if self.task not in ("multiclass", "binary"):
            raise ValueError(f"task must be 'multiclass' or 'binary', got {self.task!r}")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be at least 1")
        if not 0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float = 0.0


# ---------------------------------------------------------------- optimizer


class SGD:
    """v <- mu * v - lr * grad; p <- p + v (in place, per parameter)."""

    def __init__(self, params: ParamStore, momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity[name]
            v *= p.dtype.type(self.momentum)
            v -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
            p += v


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a lower validation loss."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10, floor: float = 1e-5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.bad_epochs = 0
                if self.lr * self.factor >= self.floor:
                    self.lr = self.lr * self.factor
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": None if self.best == float("inf") else self.best, "bad_epochs": self.bad_epochs}

    def load(self, state: dict) -> None:
        self.lr = state["lr"]
        self.best = float("inf") if state["best"] is None else state["best"]
        self.bad_epochs = state["bad_epochs"]


class EarlyStopping:
    """Tracks the best validation accuracy; ties keep the earliest epoch."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_acc = -1.0
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, acc: float) -> bool:
        if acc > self.best_acc:
            self.best_acc, self.best_epoch, self.bad_epochs = acc, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience

    def state(self) -> dict:
        return {"best_acc": self.best_acc, "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs}

    def load(self, state: dict) -> None:
        self.best_acc, self.best_epoch, self.bad_epochs = state["best_acc"], state["best_epoch"], state["bad_epochs"]


# ---------------------------------------------------------------- data helpers


def stratified_split(labels: np.ndarray, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split; each class keeps at least one training item."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5EED])
    train, val = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_val = min(int(round(val_fraction * len(idx))), len(idx) - 1)
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


def report_loss(probs: np.ndarray, labels: np.ndarray, task: str) -> float:
    """Cross-entropy as reported: categorical for multiclass, binary on P(class 1) otherwise."""
    from .tensor import Tensor

    if task == "binary":
        return float(ops.binary_cross_entropy(Tensor(probs[:, 1]), labels).data)
    return float(ops.categorical_cross_entropy(Tensor(probs), labels).data)


def evaluate(model: Network, X: np.ndarray, y: np.ndarray, task: str, batch_size: int = 8) -> Tuple[float, float]:
    """(loss, accuracy) in eval mode."""
    probs = predict_proba(model, X, batch_size)
    acc = float(np.mean(probs.argmax(axis=1) == y))
    return report_loss(probs, y, task), acc


def predict_proba(model: Network, X: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = [model.forward(X[i:i + batch_size], "eval").data for i in range(0, len(X), batch_size)]
    return np.concatenate(out)


# ---------------------------------------------------------------- epochs


def train_step(model: Network, opt: SGD, xb: np.ndarray, yb: np.ndarray, lr: float) -> float:
    logits, ctx = model.logits(xb, training=True, track=True)
    loss = ops.softmax_cross_entropy(logits, yb)
    backward(loss)
    grads = {name: t.grad for name, t in ctx.leaves.items() if t.grad is not None}
    opt.step(grads, lr)
    return float(loss.data)


def train_epoch(
    model: Network,
    opt: SGD,
    X: np.ndarray,
    y: np.ndarray,
    order: np.ndarray,
    config: TrainConfig,
    lr: float,
    epoch: int,
    X_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
) -> EpochRecord:
    """One pass over ``X[order]`` in mini-batches, then a validation evaluation."""
    start = time.perf_counter()
    total, seen = 0.0, 0
    for b, i in enumerate(range(0, len(order), config.batch_size)):
        idx = order[i:i + config.batch_size]
        try:
            loss = train_step(model, opt, X[idx], y[idx], lr)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch}, batch {b} (items {idx.tolist()}): {exc}") from exc
        if not np.isfinite(loss):
            raise NonFiniteError(f"epoch {epoch}, batch {b} (items {idx.tolist()}): non-finite loss")
        total += loss * len(idx)
        seen += len(idx)
    if X_val is not None and len(X_val):
        val_loss, val_acc = evaluate(model, X_val, y_val, config.task, config.batch_size)
    else:
        val_loss, val_acc = float("nan"), float("nan")
    seconds = time.perf_counter() - start if config.record_time else 0.0
    return EpochRecord(epoch, total / max(seen, 1), val_loss, val_acc, lr, seconds)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: ParamStore
    velocity: Dict[str, np.ndarray]
    epoch: int
    best_val_acc: float
    rng_state: dict
    model: dict
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def build_model(self) -> Network:
        net = build_model(spec_from_dict(self.model), seed=self.params.seed or 0)
        net.params = self.params
        return net


def _pack_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors: List[Tuple[str, np.ndarray]] = []
    tensors += [("param/" + k, v) for k, v in ckpt.params.params.items()]
    tensors += [("buffer/" + k, v) for k, v in ckpt.params.buffers.items()]
    tensors += [("momentum/" + k, v) for k, v in ckpt.velocity.items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors:
        _pack_tensor(buf, name, arr)
    trailer = {
        "epoch": ckpt.epoch,
        "best_val_acc": ckpt.best_val_acc,
        "metrics": ckpt.metrics,
        "rng_state": ckpt.rng_state,
        "config": ckpt.config,
        "model": ckpt.model,
        "param_seed": ckpt.params.seed,
        "state": ckpt.state,
    }
    raw = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _take(raw: bytes, pos: int, n: int) -> Tuple[bytes, int]:
    if pos + n > len(raw):
        raise CheckpointFormatError("truncated checkpoint payload")
    return raw[pos:pos + n], pos + n


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head, pos = _take(raw, 0, 12)
    if head[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {head[:4]!r} (expected {MAGIC!r})")
    version, count = struct.unpack("<II", head[4:12])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "momentum": {}}
    for _ in range(count):
        chunk, pos = _take(raw, pos, 4)
        (nlen,) = struct.unpack("<I", chunk)
        name_raw, pos = _take(raw, pos, nlen)
        chunk, pos = _take(raw, pos, 1)
        rank = chunk[0]
        chunk, pos = _take(raw, pos, 8 * rank)
        dims = struct.unpack(f"<{rank}Q", chunk)
        size = int(np.prod(dims)) if rank else 1
        payload, pos = _take(raw, pos, 4 * size)
        name = name_raw.decode("utf-8")
        group, _, key = name.partition("/")
        if group not in groups or not key:
            raise CheckpointFormatError(f"unexpected tensor name {name!r}")
        if key in groups[group]:
            raise CheckpointFormatError(f"duplicate tensor {name!r}")
        groups[group][key] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    chunk, pos = _take(raw, pos, 4)
    (tlen,) = struct.unpack("<I", chunk)
    trailer_raw, pos = _take(raw, pos, tlen)
    if pos != len(raw):
        raise CheckpointFormatError("trailing bytes after checkpoint trailer")
    trailer = json.loads(trailer_raw.decode("utf-8"))
    if set(groups["momentum"]) - set(groups["param"]):
        raise CheckpointFormatError("momentum buffers name parameters that are absent")
    store = ParamStore(trailer.get("param_seed"))
    store.params = groups["param"]
    store.buffers = groups["buffer"]
    ckpt = Checkpoint(
        params=store,
        velocity=groups["momentum"],
        epoch=trailer["epoch"],
        best_val_acc=trailer["best_val_acc"],
        rng_state=trailer["rng_state"],
        model=trailer["model"],
        config=trailer["config"],
        metrics=trailer["metrics"],
        state=trailer.get("state", {}),
    )
    expected = {name for name, _, kind in ckpt.build_model().entries if not kind.startswith("buffer")}
    if expected != set(store.params):
        raise CheckpointFormatError("tensor names do not match the stored model spec")
    return ckpt


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), repr(r.lr), f"{r.seconds:.3f}"])


def read_history_csv(path) -> List[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["val_acc"]), float(r["lr"]), float(r["seconds"]))
        for r in rows
    ]


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    best: Checkpoint
    history: List[EpochRecord]
    last: Checkpoint


def _snapshot(model, opt, epoch, stopper, rng, config, sched, history) -> Checkpoint:
    return Checkpoint(
        params=model.params.copy(),
        velocity={k: v.copy() for k, v in opt.velocity.items()},
        epoch=epoch,
        best_val_acc=stopper.best_acc,
        rng_state=rng.bit_generator.state,
        model=spec_to_dict(model.spec),
        config=config.to_dict(),
        metrics=dataclasses.asdict(history[-1]) if history else {},
        state={
            "scheduler": sched.state(),
            "early_stop": stopper.state(),
            "history": [dataclasses.asdict(r) for r in history],
        },
    )


def fit(
    model: Network,
    dataset: Tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    checkpoint_dir=None,
    resume: bool = False,
) -> FitResult:
    """Train until validation accuracy stalls for ``early_stop_patience`` epochs.

    Returns the checkpoint of the best-accuracy epoch (earliest on ties) and
    the full history. The model is left holding the best parameters. With
    ``checkpoint_dir`` set, ``last.phiw`` and ``best.phiw`` are written each
    epoch; ``resume=True`` continues from them.
    """
    X, y = dataset
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if config.task == "binary" and model.num_classes != 2:
        raise ValueError("binary task needs a 2-class model")
    tr, va = stratified_split(y, config.val_fraction, config.seed)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("train/validation split left an empty side")
    missing = sorted(set(range(model.num_classes)) - set(y[tr].tolist()))
    if missing:
        raise ValueError(f"classes missing from the training split: {missing}")
    X_tr, y_tr, X_va, y_va = X[tr], y[tr], X[va], y[va]

    opt = SGD(model.params, config.momentum)
    sched = PlateauScheduler(config.learning_rate, config.decay_factor, config.plateau_patience, config.min_learning_rate)
    stopper = EarlyStopping(config.early_stop_patience)
    rng = np.random.default_rng(config.seed)
    history: List[EpochRecord] = []
    best: Optional[Checkpoint] = None
    start_epoch = 1
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    if resume:
        if ckdir is None:
            raise ValueError("resume needs a checkpoint_dir")
        last = load_checkpoint(ckdir / "last.phiw")
        best = load_checkpoint(ckdir / "best.phiw")
        # a resumed run may extend max_epochs; outputs carry the current config
        best.config = config.to_dict()
        model.params = last.params
        opt = SGD(model.params, config.momentum)
        opt.velocity = last.velocity
        rng.bit_generator.state = last.rng_state
        sched.load(last.state["scheduler"])
        stopper.load(last.state["early_stop"])
        history = [EpochRecord(**r) for r in last.state["history"]]
        start_epoch = last.epoch + 1
        if stopper.should_stop:
            start_epoch = config.max_epochs + 1

    last_ckpt = None
    for epoch in range(start_epoch, config.max_epochs + 1):
        order = rng.permutation(len(X_tr))
        rec = train_epoch(model, opt, X_tr, y_tr, order, config, sched.lr, epoch, X_va, y_va)
        history.append(rec)
        improved = stopper.update(epoch, rec.val_acc)
        sched.step(rec.val_loss)
        log.info("epoch %d loss %.4f val_loss %.4f val_acc %.3f lr %g", epoch, rec.train_loss, rec.val_loss, rec.val_acc, rec.lr)
        last_ckpt = _snapshot(model, opt, epoch, stopper, rng, config, sched, history)
        if improved:
            best = last_ckpt
        if ckdir is not None:
            ckdir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(last_ckpt, ckdir / "last.phiw")
            if improved:
                save_checkpoint(best, ckdir / "best.phiw")
        if stopper.should_stop:
            break

    if best is None:
        raise RuntimeError("training produced no epochs")
    if last_ckpt is None:
        last_ckpt = load_checkpoint(ckdir / "last.phiw")
    model.params = best.params.copy()
    return FitResult(best, history, last_ckpt)
