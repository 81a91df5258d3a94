"""Segmentation losses for the five-label nested tumor problem.

All functions accept engine tensors and return scalar tensors, so gradients
flow back into the network logits.  Probabilities are laid out one row per
pixel, five columns (see :func:`hierseg.autodiff.channels_last`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    channel_sum,
    channels_last,
    log,
    log_softmax_channels,
    pick,
    softmax_channels,
    square,
)

NUM_CLASSES = 5
DEFAULT_CLASS_WEIGHTS = (0.1, 0.35, 0.1, 0.1, 0.35)

# label sets of the three nested targets
COMPLETE = (1, 2, 3, 4)
CORE = (1, 3, 4)
ENHANCING = (4,)

LOSS_KINDS = ("ce", "wce", "bootstrap", "ss", "dice", "hdice")


@dataclass
class LossParams:
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    threshold: float = 0.9
    ss_lambda: float = 0.5
    epsilon: float = 1e-5
    hdice_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    standard_dice: bool = False

    def validate(self) -> None:
        w = np.asarray(self.class_weights, dtype=float)
        if w.shape != (NUM_CLASSES,) or abs(w.sum() - 1.0) > 1e-6:
            raise ValueError("class_weights: need 5 weights summing to 1")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold: must lie in (0, 1]")
        if not 0 <= self.ss_lambda <= 1:
            raise ValueError("ss_lambda: must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon: must be positive")
        if len(self.hdice_weights) != 3:
            raise ValueError("hdice_weights: need three weights")


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if y.size != n:
        raise ValueError(f"expected {n} labels, got {y.size}")
    if y.size and (y.min() < 0 or y.max() >= NUM_CLASSES):
        raise ValueError("labels must lie in 0..4")
    return y


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean per-pixel softmax cross entropy."""
    logp = channels_last(log_softmax_channels(logits))
    y = _labels(labels, logp.shape[0])
    return -pick(logp, y).mean()


def weighted_ce(logits: Tensor, labels, weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS) -> Tensor:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (NUM_CLASSES,) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("weighted_ce: weights must be 5 values summing to 1")
    logp = channels_last(log_softmax_channels(logits))
    y = _labels(labels, logp.shape[0])
    per_pixel = pick(logp, y) * w[y].astype(logp.dtype)
    return -per_pixel.mean()


class BootstrapResult(NamedTuple):
    loss: Tensor
    retained: int

    @property
    def fully_filtered(self) -> bool:
        return self.retained == 0


def _bootstrap(true_logp: Tensor, true_p: np.ndarray, t: float) -> BootstrapResult:
    if not 0 < t <= 1:
        raise ValueError("bootstrap threshold must lie in (0, 1]")
    keep = true_p < t
    count = int(keep.sum())
    if count == 0:
        return BootstrapResult((true_logp * 0.0).sum(), 0)
    mask = keep.astype(true_logp.dtype)
    return BootstrapResult(-(true_logp * mask).sum() * (1.0 / count), count)


def bootstrap_loss(probs: Tensor, labels, t: float = 0.9) -> BootstrapResult:
    """Cross entropy averaged over the pixels whose true-class probability is below ``t``."""
    probs = channels_last(as_tensor(probs))
    y = _labels(labels, probs.shape[0])
    true_p = pick(probs, y)
    return _bootstrap(log(true_p), true_p.data, t)


def bootstrap_loss_from_logits(logits: Tensor, labels, t: float = 0.9) -> BootstrapResult:
    """Same value as :func:`bootstrap_loss` on softmax(logits), via a stable log-softmax."""
    logp = channels_last(log_softmax_channels(logits))
    y = _labels(labels, logp.shape[0])
    true_logp = pick(logp, y)
    return _bootstrap(true_logp, np.exp(true_logp.data), t)


def ss_loss(p: Tensor, r, lam: float = 0.5, eps: float = 1e-5) -> Tensor:
    """Sensitivity/specificity loss on a binary target."""
    if not 0 <= lam <= 1 or eps <= 0:
        raise ValueError("ss_loss: need lam in [0, 1] and eps > 0")
    p = as_tensor(p)
    r = np.asarray(r, dtype=p.dtype).reshape(p.shape)
    sq = square(p - r)
    sens = (sq * r).sum() / (float(r.sum()) + eps)
    spec = (sq * (1.0 - r)).sum() / (float((1.0 - r).sum()) + eps)
    return sens * lam + spec * (1.0 - lam)


def _dice_terms(pos_p, pos_r, neg_p, neg_r, eps: float, standard: bool) -> Tensor:
    # pos_* and neg_* are the foreground pair and the complementary pair
    num_pos = (pos_p * pos_r).sum()
    den_pos = pos_p.sum() + float(np.sum(pos_r))
    num_neg = (neg_p * neg_r).sum()
    den_neg = neg_p.sum() + float(np.sum(neg_r))
    if standard:
        a = (num_pos * 2.0 + eps) / (den_pos + eps)
        b = (num_neg * 2.0 + eps) / (den_neg + eps)
        return 1.0 - (a + b) * 0.5
    return 1.0 - (num_pos + eps) / (den_pos + eps) - (num_neg + eps) / (den_neg + eps)


def dice_loss(p: Tensor, r, eps: float = 1e-5, standard: bool = False) -> Tensor:
    """Two-sided binary dice loss.

    With ``standard=False`` the overlap terms carry no factor of two, so a
    perfect prediction scores between -1 and 0 depending on class balance.
    """
    if eps <= 0:
        raise ValueError("dice_loss: eps must be positive")
    p = as_tensor(p)
    r = np.asarray(r, dtype=p.dtype).reshape(p.shape)
    return _dice_terms(p, r, 1.0 - p, 1.0 - r, eps, standard)


@dataclass
class HierProbs:
    p0: Tensor
    p1: Tensor
    p2: Tensor
    r0: np.ndarray | None = None
    r1: np.ndarray | None = None
    r2: np.ndarray | None = None


def region_targets(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.asarray(labels).reshape(-1)
    return (
        np.isin(y, COMPLETE).astype(np.float64),
        np.isin(y, CORE).astype(np.float64),
        (y == 4).astype(np.float64),
    )


def aggregate_hierarchy(class_probs: Tensor, labels=None) -> HierProbs:
    """Sum class probabilities into complete / core / enhancing probabilities."""
    q = channels_last(as_tensor(class_probs))
    if q.shape[1] != NUM_CLASSES:
        raise ValueError("aggregate_hierarchy expects 5 class probabilities")
    hp = HierProbs(channel_sum(q, COMPLETE), channel_sum(q, CORE), channel_sum(q, ENHANCING))
    if labels is not None:
        y = _labels(labels, q.shape[0])
        hp.r0, hp.r1, hp.r2 = region_targets(y)
    return hp


class HDiceResult(NamedTuple):
    dl0: Tensor
    dl1: Tensor
    dl2: Tensor
    total: Tensor


def hdice_loss(
    hp: HierProbs,
    eps: float = 1e-5,
    weights: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    standard: bool = False,
) -> HDiceResult:
    """Three coupled dice losses on the nested regions and their weighted mean."""
    if hp.r0 is None:
        raise ValueError("hdice_loss: HierProbs carries no region targets")
    dt = hp.p0.dtype
    r0, r1, r2 = (np.asarray(r, dtype=dt) for r in (hp.r0, hp.r1, hp.r2))
    dl0 = _dice_terms(hp.p0, r0, 1.0 - hp.p0, 1.0 - r0, eps, standard)
    dl1 = _dice_terms(hp.p1, r1, hp.p0 - hp.p1, r0 - r1, eps, standard)
    dl2 = _dice_terms(hp.p2, r2, hp.p1 - hp.p2, r1 - r2, eps, standard)
    w0, w1, w2 = weights
    if np.allclose(weights, 1 / 3):
        total = (dl0 + dl1 + dl2) * (1.0 / 3.0)
    else:
        total = dl0 * w0 + dl1 * w1 + dl2 * w2
    return HDiceResult(dl0, dl1, dl2, total)


def one_vs_rest(loss_fn, probs: Tensor, labels, **kw) -> Tensor:
    """Average a binary loss over the five classes, each against the rest."""
    q = channels_last(probs)
    y = _labels(labels, q.shape[0])
    total = None
    for c in range(NUM_CLASSES):
        term = loss_fn(channel_sum(q, (c,)), (y == c).astype(q.dtype), **kw)
        total = term if total is None else total + term
    return total * (1.0 / NUM_CLASSES)


def compute_loss(kind: str, logits: Tensor, labels, params: LossParams | None = None) -> tuple[Tensor, bool]:
    """Evaluate the named loss on network logits.

    Returns the scalar loss and a flag that is True when the step carries no
    training signal (bootstrap with every pixel filtered out).
    """
    params = params or LossParams()
    if kind == "ce":
        return softmax_ce(logits, labels), False
    if kind == "wce":
        return weighted_ce(logits, labels, params.class_weights), False
    if kind == "bootstrap":
        res = bootstrap_loss_from_logits(logits, labels, params.threshold)
        return res.loss, res.fully_filtered
    probs = softmax_channels(logits)
    if kind == "ss":
        return one_vs_rest(ss_loss, probs, labels, lam=params.ss_lambda, eps=params.epsilon), False
    if kind == "dice":
        return one_vs_rest(dice_loss, probs, labels, eps=params.epsilon, standard=params.standard_dice), False
    if kind == "hdice":
        hp = aggregate_hierarchy(probs, labels)
        res = hdice_loss(hp, params.epsilon, params.hdice_weights, params.standard_dice)
        return res.total, False
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {', '.join(LOSS_KINDS)}")
