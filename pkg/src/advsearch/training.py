"""Model training: SGD with momentum, Adam, cosine annealing, and optional
PGD adversarial training where each batch is replaced by its perturbation
before the weight step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, NumericError
from .gradcheck import grad_input
from .losses import cross_entropy_mean
from .util import rng_from


@dataclass
class AdversarialConfig:
    eps: float
    steps: int = 7
    step_size: float = None  # defaults to eps / 4

    def __post_init__(self):
        if self.eps < 0:
            raise ArgumentError(f"adversarial eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise ArgumentError(f"adversarial steps must be >= 1, got {self.steps}")


@dataclass
class TrainSchedule:
    epochs: int
    batch_size: int = 16
    learning_rate: float = 0.05
    weight_decay: float = 0.0
    optimizer: str = "sgd_momentum"
    cosine_anneal: bool = False
    adversarial: AdversarialConfig = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ArgumentError(f"unknown optimizer: {self.optimizer!r}")
        if isinstance(self.adversarial, dict):
            self.adversarial = AdversarialConfig(**self.adversarial)


class SGDMomentum:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def pgd_batch(model, x, y, eps, steps, step_size=None):
    """Deterministic Linf PGD on one batch (eval-mode model, CE loss)."""
    step = eps / 4.0 if step_size is None else step_size
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    for _ in range(steps):
        g = grad_input(model, x_adv, y, "CE_P")
        x_adv = np.clip(np.clip(x_adv + step * np.sign(g), x - eps, x + eps), 0.0, 1.0)
    return x_adv


@dataclass
class TrainResult:
    model: object
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)


def train(model, dataset, schedule, seed=0):
    """Train a copy of the model; returns the copy plus per-epoch traces.

    When an adversarial config is present each batch is replaced by its PGD
    perturbation before the weight step. Fixed seeds make the whole
    trajectory bit-reproducible.
    """
    if len(dataset) == 0:
        raise ArgumentError("train: empty dataset")
    model = model.copy()
    params = model.parameters()
    if schedule.optimizer == "adam":
        opt = Adam(params, schedule.learning_rate, weight_decay=schedule.weight_decay)
    else:
        opt = SGDMomentum(params, schedule.learning_rate, weight_decay=schedule.weight_decay)
    rng = rng_from(seed, "train")
    n = len(dataset)
    losses, accs = [], []
    adv = schedule.adversarial
    for epoch in range(schedule.epochs):
        if schedule.cosine_anneal:
            opt.lr = schedule.learning_rate * 0.5 * (1 + np.cos(np.pi * epoch / schedule.epochs))
        perm = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for start in range(0, n, schedule.batch_size):
            idx = perm[start:start + schedule.batch_size]
            xb = dataset.inputs[idx]
            yb = dataset.labels[idx]
            if adv is not None and adv.eps > 0:
                xb = pgd_batch(model, xb, yb, adv.eps, adv.steps, adv.step_size)
            xt = T.Tensor(xb)
            with T.Tape() as tape:
                logits = model.apply(xt, train=True)
                loss = cross_entropy_mean(logits, yb)
            if not np.isfinite(loss.data):
                raise NumericError("training loss is not finite", epoch=epoch)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            epoch_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        losses.append(epoch_loss / n)
        accs.append(correct / n)
    return TrainResult(model, losses, accs)
