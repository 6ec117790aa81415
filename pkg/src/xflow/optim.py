"""Adam and the minibatch training loop."""
import csv
from dataclasses import dataclass, field

import numpy as np

from xflow import autodiff as ad
from xflow.errors import ContractError, ValidationError

DEFAULT_BATCH = {"cnn_mlp": 128, "cnn_mlp_lstm": 32}
HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_acc")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One in-place Adam update; moments are created lazily on the first step."""
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.value.shape or g.shape != p.value.shape:
            raise ContractError(f"Adam state/gradient shape mismatch for {p!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = None  # None: architecture default
    seed: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.lr}")

    def resolved_batch(self, architecture):
        return self.batch_size or DEFAULT_BATCH[architecture]


def make_batches(order, batch_size):
    """Consecutive chunks of ``order``; a trailing chunk of one is folded into its predecessor."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _encode_all(model, dataset):
    return [model.encode(e) for e in dataset], np.asarray(dataset.labels)


def evaluate(model, dataset, encoded=None):
    """(accuracy, mean cross-entropy) with the model in evaluation mode."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if encoded is None:
        encoded, labels = _encode_all(model, dataset)
    else:
        labels = np.asarray(dataset.labels)
    was_training = model.training
    model.eval()
    try:
        logp = []
        with ad.no_grad():
            for i in range(0, len(encoded), 256):
                logp.append(ad.log_softmax(model.logits(encoded[i:i + 256]).value))
    finally:
        model.train(was_training)
    logp = np.concatenate(logp)
    acc = float(np.mean(np.argmax(logp, axis=1) == labels))
    loss = float(-np.mean(logp[np.arange(len(labels)), labels]))
    return acc, loss


def train(model, dataset, config, val_dataset=None, on_epoch=None):
    """Train in place with Adam; returns the per-epoch history as a list of dicts.

    Train loss and accuracy are running averages over the epoch's minibatches
    (training mode). ``val_acc`` is None without a validation set.
    ``on_epoch(row)`` is called after every epoch; a truthy return stops training.
    """
    if len(dataset) < 2:
        raise ContractError("training needs at least 2 examples (batch norm)")
    encoded, labels = _encode_all(model, dataset)
    val_encoded = _encode_all(model, val_dataset)[0] if val_dataset is not None else None
    batch_size = config.resolved_batch(model.config.architecture)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        total_loss, correct = 0.0, 0
        for idx in make_batches(rng.permutation(len(encoded)), batch_size):
            opt.zero_grad()
            loss, probs = ad.softmax_cross_entropy(model.logits([encoded[i] for i in idx]), labels[idx])
            ad.backward(loss)
            opt.step()
            total_loss += float(loss.value) * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == labels[idx]))
        row = {"epoch": epoch, "train_loss": total_loss / len(encoded), "train_acc": correct / len(encoded),
               "val_acc": evaluate(model, val_dataset, val_encoded)[0] if val_dataset is not None else None}
        history.append(row)
        if on_epoch is not None and on_epoch(row):
            break
    model.eval()
    return history


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["train_acc"]),
                        "" if row["val_acc"] is None else repr(row["val_acc"])])
