"""SGD with momentum, cosine-annealed learning rate, and the epoch loop."""

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .data import batches
from .net import save_checkpoint
from .tensor import backward, get_tape, no_grad

logger = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "lr", "loss", "train_acc", "eval_acc", "wall_seconds"]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_init: float = 0.005
    lr_final: float = 0.00001
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    augmentation: bool = False
    checkpoint_every: int = 10

    def validate(self):
        if not self.lr_final < self.lr_init:
            raise ValueError(f"lr_final ({self.lr_final}) must be below lr_init ({self.lr_init})")
        if self.augmentation:
            raise ValueError("data augmentation is not supported")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def cosine_lr(t, T, cfg):
    """lr_final + (lr_init - lr_final) * (1 + cos(pi t / T)) / 2 for 0 <= t <= T."""
    if t < 0 or t > T:
        raise ValueError(f"schedule index {t} outside [0, {T}]")
    if T == 0:
        return cfg.lr_init
    # convex-combination form keeps both endpoints exact in floating point
    c = (1 + math.cos(math.pi * t / T)) / 2
    return cfg.lr_init * c + cfg.lr_final * (1 - c)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def sgd_step(params, lr, velocity, momentum=0.9, weight_decay=0.0, names=None):
    """v <- mu v + g (+ wd theta);  theta <- theta - lr v;  gradients are zeroed afterwards.

    ``velocity`` is a list of arrays parallel to ``params`` (created on first use).
    A non-finite gradient aborts before any parameter changes.
    """
    for i, p in enumerate(params):
        if p.grad is not None and not np.isfinite(p.grad).all():
            name = names[i] if names else f"#{i}"
            raise NonFiniteGradient(f"non-finite gradient in parameter {name} (shape {p.shape})")
    if not velocity:
        velocity.extend(np.zeros_like(p.data) for p in params)
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        g = p.grad.astype(p.dtype, copy=False)
        if weight_decay:
            g = g + weight_decay * p.data
        v *= momentum
        v += g
        p.data -= lr * v
        p.grad = None


class SGD:
    def __init__(self, named_params, momentum=0.9, weight_decay=0.0):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = []

    def step(self, lr):
        sgd_step(self.params, lr, self.velocity, self.momentum, self.weight_decay, self.names)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    log: list
    final_checkpoint: str = None
    best_epoch: int = None
    best_eval_acc: float = None


def accuracy(model, dataset, batch_size=64):
    if len(dataset) == 0:
        return float("nan")
    probs = model.predict_proba(dataset.images, batch_size)
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def train(model, dataset, cfg, eval_data=None, out_dir=None, progress=None):
    """Run ``cfg.epochs`` epochs of minibatch SGD.

    The learning rate is annealed per epoch from lr_init (first epoch) to
    lr_final (last epoch).  With ``out_dir`` the log is written as
    ``train_log.csv`` and ``train_log.jsonl`` and checkpoints land in
    ``out_dir/checkpoints``.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.labels.max() >= model.cfg.num_classes:
        raise ValueError(f"labels reach {dataset.labels.max()} but the model has {model.cfg.num_classes} classes")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        for name in ("train_log.csv", "train_log.jsonl"):
            (out / name).unlink(missing_ok=True)
    opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    T = cfg.epochs - 1
    result = TrainResult(log=[])
    last_ckpt = None
    snapshot = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, T, cfg)
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        for images, labels in batches(dataset, cfg.batch_size, seed=rng, shuffle=True):
            logits = model(images)
            loss = F.softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                get_tape().clear()
                model.load_state_dict(snapshot)
                raise TrainingDiverged(f"loss became {loss.item()} in epoch {epoch + 1}", last_ckpt)
            backward(loss)
            opt.step(lr)
            n = len(labels)
            total_loss += float(loss.data) * n
            correct += int(np.sum(logits.data.argmax(axis=1) == labels))
            seen += n
        row = {"epoch": epoch + 1, "lr": lr, "loss": total_loss / seen, "train_acc": correct / seen,
               "eval_acc": accuracy(model, eval_data, cfg.batch_size) if eval_data is not None else None,
               "wall_seconds": time.perf_counter() - t0}
        result.log.append(row)
        snapshot = copy.deepcopy(model.state_dict())
        if row["eval_acc"] is not None and (result.best_eval_acc is None or row["eval_acc"] > result.best_eval_acc):
            result.best_eval_acc, result.best_epoch = row["eval_acc"], row["epoch"]
        logger.info("epoch %d lr %.6g loss %.4f train_acc %.4f eval_acc %s", row["epoch"], lr,
                    row["loss"], row["train_acc"], row["eval_acc"])
        if progress is not None:
            progress(row)
        if out is not None:
            _append_log(out, row)
            last_epoch = epoch + 1 == cfg.epochs
            if last_epoch or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                last_ckpt = str(out / "checkpoints" / f"epoch_{epoch + 1:03d}.ckpt")
                save_checkpoint(last_ckpt, model, cfg.seed, epoch + 1, {"train": asdict(cfg)})
            if result.best_epoch == epoch + 1:
                save_checkpoint(out / "checkpoints" / "best.ckpt", model, cfg.seed, epoch + 1,
                                {"train": asdict(cfg)})
    if out is not None:
        final = out / "final.ckpt"
        save_checkpoint(final, model, cfg.seed, cfg.epochs, {"train": asdict(cfg)})
        result.final_checkpoint = str(final)
    return result


def _append_log(out, row):
    csv_path = out / "train_log.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: ("" if row[k] is None else row[k]) for k in LOG_FIELDS})
    with open(out / "train_log.jsonl", "a") as f:
        f.write(json.dumps(row) + "\n")


def read_log(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def evaluate_loss(model, images, labels):
    with no_grad():
        return float(F.softmax_cross_entropy(model(images), labels).data)


def overfit_batch(model, images, labels, lr=0.05, max_steps=200, momentum=0.9, progress=None):
    """Repeat SGD on one fixed batch until it is classified perfectly.

    Accuracy is read from the train-mode logits of each step, before that
    step's update.  Returns ``(steps_taken, accuracy_history)``; the first
    entry of the history reaching 1.0 ends the loop.
    """
    model.train()
    opt = SGD(model.named_parameters(), momentum)
    history = []
    for step in range(1, max_steps + 1):
        logits = model(images)
        loss = F.softmax_cross_entropy(logits, labels)
        acc = float(np.mean(logits.data.argmax(axis=1) == labels))
        history.append(acc)
        if progress is not None:
            progress(step, float(loss.data), acc)
        if acc == 1.0:
            get_tape().clear()
            return step, history
        backward(loss)
        opt.step(lr)
    return max_steps, history
