"""Supervised pre-training of the metering network on (image, adjustment)
pairs: mean-squared-error loss, stepped learning rate, SGD with momentum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import SgdSpec, optimizer_step
from .network import forward_batch


@dataclass
class TrainSpec:
    epochs: int = 35
    batch_size: int = 128
    base_lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0002
    lr_halving_period: int = 15
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("invalid TrainSpec")


def mse_loss(pred, label):
    """Differentiable mean squared error; pred is a Tensor, label an array."""
    label = np.asarray(label, dtype=np.float64)
    if pred.data.shape != label.shape:
        raise ag.ShapeError(f"mse_loss: {pred.data.shape} vs {label.shape}")
    diff = ag.sub(pred, ag.constant(label))
    return ag.mean(ag.square(diff))


def lr_schedule(epoch, spec):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return spec.base_lr * 0.5 ** (epoch // spec.lr_halving_period)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float


def _batch_arrays(pairs, indices, scale_ev):
    images = np.stack([pairs[i][0] for i in indices]).astype(np.float64)
    labels = np.array([pairs[i][1] for i in indices], dtype=np.float64) / scale_ev
    return images, labels


def evaluate_mse(params, pairs, config, batch_size=256):
    """Eval-mode MSE over (image, label-in-EV) pairs."""
    total = 0.0
    n = len(pairs)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        images, labels = _batch_arrays(pairs, idx, config.scale_ev)
        pred, _, _ = forward_batch(params, images, config, mode="eval")
        total += float(((pred.data - labels) ** 2).sum())
    return total / n


def pretrain(params, dataset, config, spec=None, log=None):
    """SGD training loop; returns (best-on-validation ParamSet, history).

    `dataset` is a list of (chw image array, label in EV units); labels are
    normalized by config.scale_ev internally and must land in [-1, 1].
    """
    spec = spec or TrainSpec()
    if not dataset:
        raise ValueError("dataset is empty")
    for _, label in dataset[:64]:
        if abs(label) > config.scale_ev + 1e-9:
            raise ValueError(f"label {label} outside +-scale_ev")

    rng = np.random.default_rng(spec.seed)
    n_val = int(round(len(dataset) * spec.val_fraction))
    order = rng.permutation(len(dataset))
    val_pairs = [dataset[i] for i in order[:n_val]]
    train_pairs = [dataset[i] for i in order[n_val:]]
    if not train_pairs:
        raise ValueError("no training data left after validation split")

    history = []
    best = params.copy()
    best_val = math.inf
    for epoch in range(spec.epochs):
        lr = lr_schedule(epoch, spec)
        opt = SgdSpec(lr=lr, momentum=spec.momentum,
                      weight_decay=spec.weight_decay)
        epoch_rng = np.random.default_rng((spec.seed, epoch))
        perm = epoch_rng.permutation(len(train_pairs))
        loss_sum = 0.0
        for start in range(0, len(perm), spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            images, labels = _batch_arrays(train_pairs, idx, config.scale_ev)
            params.zero_grad()
            pred, _, _ = forward_batch(params, images, config,
                                       mode="train", rng=epoch_rng)
            loss = mse_loss(pred, labels)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}: loss {loss.data}"
                )
            ag.backward(loss)
            optimizer_step(params, params.grads(), opt)
            loss_sum += float(loss.data) * len(idx)
        train_mse = loss_sum / len(train_pairs)
        val_mse = evaluate_mse(params, val_pairs, config) if val_pairs else train_mse
        history.append(EpochStats(epoch, lr, train_mse, val_mse))
        if log:
            log(f"{epoch}\t{lr:.6g}\t{train_mse:.6f}\t{val_mse:.6f}")
        if val_mse <= best_val:
            best_val = val_mse
            best = params.copy()
    return best, history


def write_history(history, path):
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("epoch\tlr\ttrain_mse\tval_mse\n")
        for h in history:
            f.write(f"{h.epoch}\t{h.lr:.6g}\t{h.train_mse:.6f}\t{h.val_mse:.6f}\n")
    os.replace(tmp, path)
