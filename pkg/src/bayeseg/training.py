"""ELBO training of a :class:`~bayeseg.unet.BayesUNet` with Adam."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import to_arrays
from .evaluation import mean_foreground_dice
from .tensor import Tensor, cross_entropy, no_grad
from .uncertainty import mc_sample_batch

log = logging.getLogger(__name__)

KL_SCALE_MODES = ("per_pixel", "per_dataset", "per_batch", "raw")


class NumericalError(FloatingPointError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 10
    learning_rate: float = 1e-4
    lambda_kl: float = 1.0
    kl_scale_mode: str = "per_pixel"
    seed: int = 0
    samples_per_eval: int = 64
    val_samples: int = 8

    def validate(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate > 0 required")
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be >= 0")
        if self.kl_scale_mode not in KL_SCALE_MODES:
            raise ValueError(f"kl_scale_mode must be one of {KL_SCALE_MODES}")
        if self.samples_per_eval < 1 or self.val_samples < 1:
            raise ValueError("sample counts must be positive")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    nll: float
    kl: float


HISTORY_FIELDS = ["epoch", "train_loss", "val_loss", "val_dice", "nll", "kl"]


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(HISTORY_FIELDS)
            for r in self.records:
                wr.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_FIELDS[1:]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[k]) for k in HISTORY_FIELDS[1:]))
                    for r in rows])


def kl_scale(config: TrainConfig, n_train: int, n_batches: int, pixels: int = 1) -> float:
    """Factor applied to the summed KL before weighting by lambda.

    ``per_pixel`` divides by every likelihood term in the training set
    (images x pixels), which keeps the ratio of the true ELBO given that the
    NLL is a per-pixel mean.
    """
    if config.kl_scale_mode == "per_pixel":
        return 1.0 / max(n_train * pixels, 1)
    if config.kl_scale_mode == "per_dataset":
        return 1.0 / max(n_train, 1)
    if config.kl_scale_mode == "per_batch":
        return 1.0 / max(n_batches, 1)
    return 1.0


def elbo_terms(logits, target, kl, config: TrainConfig, n_train=1, n_batches=1):
    """``(loss, nll, kl)`` with ``loss = nll + lambda * scale * kl``."""
    nll = cross_entropy(logits, target)
    if config.lambda_kl == 0 or kl is None:
        return nll, nll, kl
    pixels = int(np.prod(np.shape(target)[1:]))
    return nll + kl * (config.lambda_kl * kl_scale(config, n_train, n_batches, pixels)), nll, kl


def elbo_loss(logits, target, kl, config: TrainConfig, n_train=1, n_batches=1) -> Tensor:
    """Negative ELBO for one minibatch; minimizing it maximizes the ELBO."""
    return elbo_terms(logits, target, kl, config, n_train, n_batches)[0]


# -- Adam ----------------------------------------------------------------------
@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params, lr=1e-4):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.zeros(self.params)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- loop --------------------------------------------------------------------
def _arrays(dataset):
    if isinstance(dataset, tuple):
        return dataset
    if not dataset:
        return None
    return to_arrays(dataset)


def evaluate_loss(model, images, masks, config, n_train, n_batches, seed):
    """Mean minibatch ELBO loss with one weight sample per batch."""
    losses = []
    with no_grad():
        kl = model.kl_total()
        for b, start in enumerate(range(0, len(images), config.batch_size)):
            sl = slice(start, start + config.batch_size)
            logits = model.forward(images[sl], np.random.default_rng([seed, 2, b]))
            losses.append(elbo_loss(logits, masks[sl], kl, config, n_train, n_batches).item())
    return float(np.mean(losses))


def validation_dice(model, images, masks, T, seed, batch=32):
    preds = []
    for start in range(0, len(images), batch):
        probs = mc_sample_batch(model, images[start:start + batch], T, seed)
        preds.extend(p.mean(axis=0).argmax(axis=0) for p in probs)
    return mean_foreground_dice(preds, list(masks), model.config.num_classes)


def train(model, train_set, val_set, config: TrainConfig, checkpoint_dir=None, progress=None):
    """Optimize the negative ELBO; returns ``(model, history)``.

    Datasets are lists of :class:`~bayeseg.data.LabeledSample` or
    ``(images, masks)`` array pairs (already normalized). Runs are fully
    determined by ``config.seed``.
    """
    config.validate()
    history = TrainHistory()
    if config.epochs == 0:
        return model, history
    images, masks = _arrays(train_set)
    val = _arrays(val_set)
    n = len(images)
    n_batches = math.ceil(n / config.batch_size)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses, nlls = [], []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            rng = np.random.default_rng([config.seed, epoch, b, 1])
            opt.zero_grad()
            logits = model.forward(images[idx], rng)
            kl = model.kl_total() if config.lambda_kl > 0 else None
            loss, nll, _ = elbo_terms(logits, masks[idx], kl, config, n, n_batches)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            losses.append(value)
            nlls.append(nll.item())
        with no_grad():
            kl_now = model.kl_total().item()
        if val is not None:
            vseed = config.seed * 1000 + epoch
            val_loss = evaluate_loss(model, val[0], val[1], config, n, n_batches, vseed)
            val_dice = validation_dice(model, val[0], val[1], config.val_samples, vseed)
        else:
            val_loss = val_dice = float("nan")
        rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_dice, float(np.mean(nlls)), kl_now)
        history.records.append(rec)
        msg = (f"epoch {epoch:3d}  train_loss {rec.train_loss:.4f}  val_loss {rec.val_loss:.4f}  "
               f"val_dice {rec.val_dice:.4f}  nll {rec.nll:.4f}  kl {rec.kl:.1f}  "
               f"({time.perf_counter() - t0:.1f}s)")
        log.info(msg)
        if progress is not None:
            progress(msg)
        if checkpoint_dir is not None:
            checkpoint.save(model, Path(checkpoint_dir), extra={"epoch": epoch, "seed": config.seed,
                                                                "train": asdict(config)})
    return model, history
