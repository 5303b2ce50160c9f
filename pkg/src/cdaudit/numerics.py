"""Shared dense float64 kernels: parameter blocks, Adam, losses, metrics,
seeded randomness, and the finite-difference gradient harness.

Everything here is deterministic: randomness flows through counter-based
Philox streams, so a (seed, stream) pair pins the entire draw sequence and
repeated runs are bit-identical on the same platform.
"""
from __future__ import annotations

import math

import numpy as np

PROB_EPS = 1e-7  # clamp applied before log() in the cross-entropy


class NumericError(ValueError):
    """A kernel met a non-finite input or produced a non-finite output."""


class SingleClassError(ValueError):
    """A binary metric was asked to score a single-class label set."""


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator: identical (seed, stream) -> identical draws."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# elementwise kernels
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def bce_loss(pred, label):
    """Binary cross-entropy and its gradient w.r.t. pred.

    pred is clamped to [PROB_EPS, 1 - PROB_EPS] before the logs; the gradient
    (p - y) / (p (1 - p)) is evaluated at the clamped value, so the result is
    finite for any pred in [0, 1].  Accepts scalars or same-shape arrays.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(label))):
        raise NumericError("bce_loss: non-finite input")
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(label * np.log(p) + (1.0 - label) * np.log1p(-p))
    grad = (p - label) / (p * (1.0 - p))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamBlock:
    """A named dense parameter matrix with a same-shape gradient accumulator."""

    __slots__ = ("name", "values", "grad")

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"ParamBlock {name!r}: non-finite values")
        self.grad = np.zeros_like(self.values)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "ParamBlock":
        blk = ParamBlock(self.name, self.values.copy())
        blk.grad = self.grad.copy()
        return blk

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ParamBlock({self.name!r}, shape={self.values.shape})"


Blocks = dict  # name -> ParamBlock


def copy_blocks(blocks: Blocks) -> Blocks:
    return {name: blk.copy() for name, blk in blocks.items()}


class Adam:
    """Standard bias-corrected Adam over a dict of ParamBlocks.

    step() consumes the accumulated .grad of every block and zeroes it
    afterwards.  A zero gradient on a fresh state leaves values untouched.
    """

    def __init__(self, blocks: Blocks, lr: float = 2e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(b.values) for name, b in blocks.items()}
        self.v = {name: np.zeros_like(b.values) for name, b in blocks.items()}

    def step(self, blocks: Blocks) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, blk in blocks.items():
            g = blk.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            blk.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            blk.zero_grad()


# ---------------------------------------------------------------------------
# binary metrics (shared by model evaluation and the attack audit)
# ---------------------------------------------------------------------------

def rank_auc(scores, labels) -> float:
    """AUC as the probability a random positive outscores a random negative,
    ties counted 1/2 (average-rank formula)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("rank_auc: scores and labels must be 1-D and equal length")
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("rank_auc: need both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    pos_rank_sum = float(ranks[pos].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of correct hard decisions; the decision is strict (> threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    decisions = (scores > threshold).astype(labels.dtype)
    return float(np.mean(decisions == labels))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(loss_and_grad, blocks: Blocks, h: float = 1e-5,
                      n_coords: int = 150, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_and_grad is a zero-argument callable returning (loss, grads-dict) and
    reading the live values of `blocks`; coordinates are perturbed in place and
    restored.  Relative error per coordinate is |g_a - g_fd| / max(1, |g_fd|).
    """
    loss0, grads = loss_and_grad()
    if not math.isfinite(loss0):
        raise NumericError("finite_diff_check: non-finite loss")
    names = sorted(blocks)
    sizes = np.array([blocks[n].values.size for n in names])
    total = int(sizes.sum())
    rng = make_rng(seed, stream=0xFD)
    n_pick = min(n_coords, total)
    flat_idx = rng.choice(total, size=n_pick, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fi in flat_idx:
        bi = int(np.searchsorted(offsets, fi, side="right")) - 1
        name = names[bi]
        local = int(fi - offsets[bi])
        vals = blocks[name].values
        orig = vals.flat[local]
        vals.flat[local] = orig + h
        lp = loss_and_grad()[0]
        vals.flat[local] = orig - h
        lm = loss_and_grad()[0]
        vals.flat[local] = orig
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericError("finite_diff_check: non-finite perturbed loss")
        g_fd = (lp - lm) / (2.0 * h)
        g_an = float(grads[name].flat[local])
        rel = abs(g_an - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, rel)
    return worst
