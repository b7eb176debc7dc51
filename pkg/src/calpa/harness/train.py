"""Training loop shared by reference, shrunken and finetuned models."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from calpa import tensor as T
from calpa.arch import ArchGraph
from calpa.harness.checkpoint import ModelCheckpoint
from calpa.harness.data import Dataset, to_input
from calpa.network import Network

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamax", "sgd")
SCHEDULES = ("constant", "step_drop", "decay_pct_every")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamax"
    initial_lr: float = 1e-3
    lr_schedule: str = "constant"
    drop_at: int = 0
    drop_factor: float = 0.1
    decay_every: int = 5000
    decay_pct: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    max_iters: int = 600
    eval_every: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be an even count of images, got {self.batch_size}")
        if self.max_iters < 0 or self.eval_every < 1:
            raise ValueError("max_iters must be >= 0 and eval_every >= 1")

    def lr_at(self, iteration: int) -> float:
        """Learning rate used for the update that follows ``iteration`` completed steps."""
        if self.lr_schedule == "step_drop" and self.drop_at and iteration >= self.drop_at:
            return self.initial_lr * self.drop_factor
        if self.lr_schedule == "decay_pct_every":
            return self.initial_lr * (1.0 - self.decay_pct) ** (iteration // self.decay_every)
        return self.initial_lr


class Optimizer:
    """Adamax (infinity-norm Adam) or SGD with momentum; state is a flat dict."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, kind: str, momentum: float = 0.9, state: dict | None = None):
        self.kind = kind
        self.momentum = momentum
        self.state = {k: v.copy() for k, v in (state or {}).items()}

    def step(self, params: dict, grads: dict, lr: float, t: int) -> None:
        """Apply update number ``t`` (1-based)."""
        for name, g in grads.items():
            p = params[name]
            if self.kind == "adamax":
                m = self.state.setdefault(f"m:{name}", np.zeros_like(p))
                u = self.state.setdefault(f"u:{name}", np.zeros_like(p))
                m *= self.BETA1
                m += (1 - self.BETA1) * g
                np.maximum(self.BETA2 * u, np.abs(g), out=u)
                p -= (lr / (1 - self.BETA1 ** t)) * m / (u + self.EPS)
            else:
                v = self.state.setdefault(f"v:{name}", np.zeros_like(p))
                v *= self.momentum
                v += g
                p -= lr * v


def batch_pairs(seed: int, iteration: int, n: int, k: int) -> np.ndarray:
    """Indices (into the train split) of the ``k`` pairs drawn at ``iteration``.

    Each epoch is an independent seeded permutation, so the batch depends only
    on ``(seed, iteration)``.
    """
    pos = np.arange(iteration * k, (iteration + 1) * k)
    epochs = pos // n
    out = np.empty(k, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, int(e), 7]).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 200) -> float:
    """Fraction classified correctly; stego when its softmax score exceeds 0.5."""
    if len(images) == 0:
        raise ValueError("cannot compute accuracy of an empty split")
    scores = net.predict_scores(to_input(images, net.dtype), batch_size)
    return float(np.mean((scores > 0.5) == (labels == 1)))


@dataclass
class TrainResult:
    best: ModelCheckpoint
    last: ModelCheckpoint
    curves: list[tuple[int, float, float, float]] = field(default_factory=list)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "train_acc", "val_acc", "loss"])
        for it, tr, va, loss in self.curves:
            w.writerow([it, f"{tr:.6f}", f"{va:.6f}", f"{loss:.6f}"])
        return buf.getvalue()


def train(model: ArchGraph | Network | ModelCheckpoint, dataset: Dataset, config: TrainConfig,
          resume: bool = False) -> TrainResult:
    """Cross-entropy training on paired cover/stego batches.

    ``model`` may be a bare graph (fresh weights from ``config.seed``), an
    initialized :class:`Network`, or a checkpoint.  With ``resume=True`` a
    checkpoint's optimizer state and iteration counter are continued;
    otherwise only its weights are used.
    """
    config.validate()
    start, opt_state = 0, None
    if isinstance(model, ArchGraph):
        net = Network.init(model, config.seed)
    elif isinstance(model, ModelCheckpoint):
        net = model.network()
        if resume:
            start, opt_state = model.iteration, model.optimizer
    else:
        net = model.copy()
    opt = Optimizer(config.optimizer, config.momentum, opt_state)
    train_idx = dataset.splits["train"]
    val_images, val_labels = dataset.labeled("val")
    k = config.batch_size // 2
    labels = np.concatenate([np.zeros(k, np.int64), np.ones(k, np.int64)])

    def snapshot(it, val_acc):
        return ModelCheckpoint.from_network(net, optimizer={n: v.copy() for n, v in opt.state.items()},
                                            iteration=it, seed=config.seed, lr=config.lr_at(it),
                                            val_acc=val_acc)

    best: ModelCheckpoint | None = None
    curves = []
    hits, seen, loss_sum = 0, 0, 0.0
    it = start
    while it < config.max_iters:
        pairs = train_idx[batch_pairs(config.seed, it, len(train_idx), k)]
        x = to_input(np.concatenate([dataset.covers[pairs], dataset.stegos[pairs]]), net.dtype)
        logits = net.forward(x, train=True)
        loss, grad = T.softmax_cross_entropy(logits.astype(np.float64), labels)
        if not math.isfinite(loss):
            raise TrainingDiverged(it + 1, loss)
        grads = net.backward(grad.astype(net.dtype))
        opt.step(net.params, grads, config.lr_at(it), it + 1)
        it += 1
        hits += int(np.sum((logits[:, 1] > logits[:, 0]) == (labels == 1)))
        seen += len(labels)
        loss_sum += loss
        if it % config.eval_every == 0 or it == config.max_iters:
            val = accuracy(net, val_images, val_labels)
            steps = seen // len(labels)
            curves.append((it, hits / seen, val, loss_sum / steps))
            log.info("iter %d loss %.4f train %.3f val %.3f", it, loss_sum / steps, hits / seen, val)
            hits, seen, loss_sum = 0, 0, 0.0
            if best is None or val > best.val_acc:
                best = snapshot(it, val)
    last_val = curves[-1][2] if curves else None
    last = snapshot(it, last_val)
    if best is None:
        best = last
    return TrainResult(best, last, curves)
