"""Monte-Carlo sampling of the posterior predictive and its variance split.

For a stack of softmax outputs ``p_t`` (t = 1..T) at one pixel, the per-class
diagonal terms are

    aleatoric = mean_t p_t (1 - p_t)
    epistemic = mean_t (p_t - p_bar)^2
    total     = aleatoric + epistemic = p_bar (1 - p_bar)
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tensor import no_grad, softmax_np


@dataclass
class SampleStack:
    probs: np.ndarray  # [T, C, H, W]
    image_id: str = ""

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 4:
            raise ValueError(f"stack must be [T, C, H, W], got shape {self.probs.shape}")

    @property
    def T(self):
        return self.probs.shape[0]

    @property
    def num_classes(self):
        return self.probs.shape[1]

    def mean(self):
        return self.probs.mean(axis=0)

    def validate(self, atol=1e-9):
        if self.probs.min() < 0 or self.probs.max() > 1:
            raise ValueError("stack probabilities must lie in [0, 1]")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ValueError("stack class fibers must sum to 1")
        return self


@dataclass
class UncertaintyMaps:
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray
    per_class_total: np.ndarray
    image_total: float

    def foreground_total(self):
        """Image total excluding class 0 (background)."""
        return float(self.per_class_total[1:].sum())


def _sample_seed(seed, t):
    return np.random.default_rng([int(seed), 7, int(t)])


def mc_sample(model, image, T: int = 64, seed: int = 0, threads: int = 1, image_id="") -> SampleStack:
    """``T`` stochastic forward passes over one image ``[Cin, H, W]``.

    Sample ``t`` draws its weights from a stream derived from ``(seed, t)``, so
    the result does not depend on ``threads``.
    """
    stacks = mc_sample_batch(model, np.asarray(image)[None], T, seed, threads)
    return SampleStack(stacks[0], image_id)


def mc_sample_batch(model, images, T: int = 64, seed: int = 0, threads: int = 1) -> np.ndarray:
    """Probabilities ``[N, T, C, H, W]`` for a batch ``images[N, Cin, H, W]``.

    Within one sample ``t`` all images share the weight draw.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    images = np.asarray(images, dtype=np.float64)

    def one(t):
        with no_grad():
            logits = model.forward(images, _sample_seed(seed, t)).data
        return softmax_np(logits, axis=1)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            outs = list(ex.map(one, range(T)))
    else:
        outs = [one(t) for t in range(T)]
    return np.stack(outs, axis=1)


def _probs(stack):
    return stack.probs if isinstance(stack, SampleStack) else np.asarray(stack, dtype=np.float64)


def aleatoric(stack) -> np.ndarray:
    p = _probs(stack)
    return (p * (1.0 - p)).mean(axis=0)


def epistemic(stack) -> np.ndarray:
    p = _probs(stack)
    return ((p - p.mean(axis=0)) ** 2).mean(axis=0)


def total(stack) -> UncertaintyMaps:
    ale = aleatoric(stack)
    epi = epistemic(stack)
    tot = ale + epi
    per_class = tot.sum(axis=(1, 2))
    return UncertaintyMaps(ale, epi, tot, per_class, float(per_class.sum()))


def flag_anomalies(scores, threshold: float):
    """Ids whose score exceeds ``threshold``, highest score first."""
    if math.isnan(threshold):
        raise ValueError("threshold must not be NaN")
    hits = [(i, s) for i, s in scores if s > threshold]
    hits.sort(key=lambda p: (-p[1], str(p[0])))
    return [i for i, _ in hits]


def nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if not len(v):
        raise ValueError("no values")
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


def suggest_threshold(clean_scores, percentile: float = 99.0) -> float:
    """Nearest-rank percentile of scores from images known to be clean."""
    if len(clean_scores) < 10:
        raise ValueError(f"need at least 10 clean scores, got {len(clean_scores)}")
    return nearest_rank(clean_scores, percentile)


def separation_auc(clean, corrupted) -> float:
    """Probability a corrupted score beats a clean one (ties count half)."""
    clean = np.asarray(clean, dtype=np.float64)
    corrupted = np.asarray(corrupted, dtype=np.float64)
    gt = (corrupted[:, None] > clean[None, :]).sum()
    eq = (corrupted[:, None] == clean[None, :]).sum()
    return float((gt + 0.5 * eq) / (len(clean) * len(corrupted)))
