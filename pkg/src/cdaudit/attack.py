"""Membership-inference feature extraction and the three attack classifiers.

Feature layouts (the order is a serialization contract):
    black  [predict_proba, response]
    grey   [predict_proba, response, kstate_0, ..., kstate_{K-1}]

Attackers:
    GBDT        from-scratch gradient-boosted trees on the 2 black features
    DCA         standardized MLP (64, 32 hidden, ReLU, sigmoid out)
    MIAttacker  feature encoder * learnable membership embedding -> head MLP
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cdm import CdmModel
from .data import atomic_write_text
from .numerics import (Adam, ParamBlock, SingleClassError, copy_blocks,
                       make_rng, rank_auc, sigmoid)

MODES = ("black", "grey")

STD_FLOOR = 1e-8

# first-layer rows are drawn per input dimension with a scale independent of
# the feature count, so a grey run with zeroed kstate columns reproduces the
# black run draw-for-draw
_INIT_SCALE = 0.1
_STREAMS = {"w1": 31, "b1": 32, "w2": 33, "b2": 34, "w3": 35, "b3": 36,
            "wenc": 41, "benc": 42, "emem": 43,
            "wh1": 44, "bh1": 45, "wh2": 46, "bh2": 47}
_STREAM_VAL = 51
_STREAM_SHUFFLE = 52


class FeatureModeError(ValueError):
    """Feature vector does not match the attacker's training mode."""


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

def extract_features_batch(model: CdmModel, records, mode: str) -> np.ndarray:
    """Feature matrix for a list of records; one row per record."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not records:
        raise ValueError("extract_features_batch: no records")
    s = np.array([r.student_id for r in records], dtype=np.int64)
    j = np.array([r.question_id for r in records], dtype=np.int64)
    y = np.array([r.response for r in records], dtype=np.float64)
    proba = model.predict_proba_batch(s, j)
    cols = [proba[:, None], y[:, None]]
    if mode == "grey":
        cols.append(model.kstate_batch(s))
    return np.hstack(cols)


def extract_features(model: CdmModel, record, mode: str) -> np.ndarray:
    return extract_features_batch(model, [record], mode)[0]


@dataclass
class Standardizer:
    """Per-dimension mean/std fitted on the attack-training features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        mean = features.mean(axis=0)
        std = np.maximum(features.std(axis=0), STD_FLOOR)
        return cls(mean, std)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


def _check_classes(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if not ((labels == 1).any() and (labels == 0).any()):
        raise SingleClassError("attack training needs member and non-member samples")


def _infer_mode(n_features: int) -> str:
    return "black" if n_features == 2 else "grey"


# ---------------------------------------------------------------------------
# neural attackers
# ---------------------------------------------------------------------------

class DcaModel:
    """Direct classification attacker: standardize, MLP 64-32, sigmoid."""

    kind = "dca"

    def __init__(self, blocks, standardizer: Standardizer, mode: str):
        self.blocks = blocks
        self.standardizer = standardizer
        self.mode = mode
        self.n_features = blocks["w1"].values.shape[0]

    @classmethod
    def initialize(cls, n_features: int, mode: str, seed: int,
                   hidden=(64, 32)) -> "DcaModel":
        h1, h2 = hidden
        blocks = {
            "w1": ParamBlock("w1", _INIT_SCALE * make_rng(seed, _STREAMS["w1"]).standard_normal((n_features, h1))),
            "b1": ParamBlock("b1", np.zeros(h1)),
            "w2": ParamBlock("w2", _INIT_SCALE * make_rng(seed, _STREAMS["w2"]).standard_normal((h1, h2))),
            "b2": ParamBlock("b2", np.zeros(h2)),
            "w3": ParamBlock("w3", _INIT_SCALE * make_rng(seed, _STREAMS["w3"]).standard_normal((h2, 1))),
            "b3": ParamBlock("b3", np.zeros(1)),
        }
        return cls(blocks, Standardizer(np.zeros(n_features), np.ones(n_features)), mode)

    def forward(self, xs: np.ndarray):
        b = self.blocks
        a1 = xs @ b["w1"].values + b["b1"].values
        z1 = np.maximum(a1, 0.0)
        a2 = z1 @ b["w2"].values + b["b2"].values
        z2 = np.maximum(a2, 0.0)
        p = sigmoid(z2 @ b["w3"].values + b["b3"].values)[:, 0]
        return p, {"xs": xs, "a1": a1, "z1": z1, "a2": a2, "z2": z2, "p": p}

    def backward(self, cache, d_a3):
        b = self.blocks
        g = {"w3": cache["z2"].T @ d_a3, "b3": d_a3.sum(axis=0)}
        d_a2 = (d_a3 @ b["w3"].values.T) * (cache["a2"] > 0)
        g["w2"] = cache["z1"].T @ d_a2
        g["b2"] = d_a2.sum(axis=0)
        d_a1 = (d_a2 @ b["w2"].values.T) * (cache["a1"] > 0)
        g["w1"] = cache["xs"].T @ d_a1
        g["b1"] = d_a1.sum(axis=0)
        return g

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return self.forward(self.standardizer.transform(features))[0]


class MiAttackerModel:
    """Interaction attacker: encoded features multiplied elementwise by a
    learnable membership embedding, then a small prediction head."""

    kind = "miattacker"
    EMB_DIM = 32
    HEAD_HIDDEN = 16

    def __init__(self, blocks, standardizer: Standardizer, mode: str):
        self.blocks = blocks
        self.standardizer = standardizer
        self.mode = mode
        self.n_features = blocks["wenc"].values.shape[0]

    @classmethod
    def initialize(cls, n_features: int, mode: str, seed: int) -> "MiAttackerModel":
        e, hh = cls.EMB_DIM, cls.HEAD_HIDDEN
        blocks = {
            "wenc": ParamBlock("wenc", _INIT_SCALE * make_rng(seed, _STREAMS["wenc"]).standard_normal((n_features, e))),
            "benc": ParamBlock("benc", np.zeros(e)),
            "emem": ParamBlock("emem", 1.0 + _INIT_SCALE * make_rng(seed, _STREAMS["emem"]).standard_normal(e)),
            "wh1": ParamBlock("wh1", _INIT_SCALE * make_rng(seed, _STREAMS["wh1"]).standard_normal((e, hh))),
            "bh1": ParamBlock("bh1", np.zeros(hh)),
            "wh2": ParamBlock("wh2", _INIT_SCALE * make_rng(seed, _STREAMS["wh2"]).standard_normal((hh, 1))),
            "bh2": ParamBlock("bh2", np.zeros(1)),
        }
        return cls(blocks, Standardizer(np.zeros(n_features), np.ones(n_features)), mode)

    def forward(self, xs: np.ndarray):
        b = self.blocks
        ae = xs @ b["wenc"].values + b["benc"].values
        e_att = np.maximum(ae, 0.0)
        h = e_att * b["emem"].values
        ah = h @ b["wh1"].values + b["bh1"].values
        z = np.maximum(ah, 0.0)
        p = sigmoid(z @ b["wh2"].values + b["bh2"].values)[:, 0]
        return p, {"xs": xs, "ae": ae, "e_att": e_att, "h": h, "ah": ah,
                   "z": z, "p": p}

    def backward(self, cache, d_out):
        b = self.blocks
        g = {"wh2": cache["z"].T @ d_out, "bh2": d_out.sum(axis=0)}
        d_ah = (d_out @ b["wh2"].values.T) * (cache["ah"] > 0)
        g["wh1"] = cache["h"].T @ d_ah
        g["bh1"] = d_ah.sum(axis=0)
        d_h = d_ah @ b["wh1"].values.T
        g["emem"] = (d_h * cache["e_att"]).sum(axis=0)
        d_ae = d_h * b["emem"].values * (cache["ae"] > 0)
        g["wenc"] = cache["xs"].T @ d_ae
        g["benc"] = d_ae.sum(axis=0)
        return g

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return self.forward(self.standardizer.transform(features))[0]


def classifier_loss_and_grads(net, xs: np.ndarray, y: np.ndarray):
    """Mean clamped BCE of a neural attacker on standardized inputs."""
    from .numerics import PROB_EPS
    p, cache = net.forward(xs)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    d_out = ((pc - y) / (pc * (1.0 - pc)) * p * (1.0 - p) / y.size)[:, None]
    return loss, net.backward(cache, d_out)


def _fit_classifier(net, features: np.ndarray, labels: np.ndarray, seed: int,
                    lr: float = 1e-3, batch_size: int = 256,
                    max_epochs: int = 500, patience: int = 20):
    """Adam training with a 10% held-out split, early-stopped on its AUC.

    AUC ties are broken by held-out loss so training keeps calibrating the
    probabilities after the ranking saturates (AUC plateaus at 1.0 long
    before the 0.5-threshold decisions firm up).
    """
    from .numerics import PROB_EPS
    y = np.asarray(labels, dtype=np.float64)
    _check_classes(y)
    net.standardizer = Standardizer.fit(features)
    xs = net.standardizer.transform(features)

    n = xs.shape[0]
    perm = make_rng(seed, _STREAM_VAL).permutation(n)
    n_val = max(1, n // 10)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    xs_tr, y_tr = xs[tr_idx], y[tr_idx]
    xs_val, y_val = xs[val_idx], y[val_idx]
    val_usable = len(np.unique(y_val)) == 2

    adam = Adam(net.blocks, lr=lr)
    shuffle_rng = make_rng(seed, _STREAM_SHUFFLE)
    best = (-np.inf, -np.inf)  # (val_auc, -val_loss)
    best_blocks = None
    stale = 0
    history = []
    for epoch in range(max_epochs):
        order = shuffle_rng.permutation(len(tr_idx))
        losses = []
        for lo in range(0, len(order), batch_size):
            sel = order[lo:lo + batch_size]
            loss, grads = classifier_loss_and_grads(net, xs_tr[sel], y_tr[sel])
            for name, blk in net.blocks.items():
                blk.grad[...] = grads[name]
            adam.step(net.blocks)
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_usable:
            p_val = net.forward(xs_val)[0]
            val_auc = rank_auc(p_val, y_val.astype(np.int64))
            pc = np.clip(p_val, PROB_EPS, 1.0 - PROB_EPS)
            val_loss = float(np.mean(-(y_val * np.log(pc)
                                       + (1.0 - y_val) * np.log1p(-pc))))
            entry["val_auc"] = val_auc
            entry["val_loss"] = val_loss
            score = (val_auc, -val_loss)
            if score > best:
                best = score
                best_blocks = copy_blocks(net.blocks)
                stale = 0
            else:
                stale += 1
        history.append(entry)
        if val_usable and stale > patience:
            break
    if best_blocks is not None:
        net.blocks = best_blocks
    return net, history


def train_dca(features, labels, seed: int = 0, mode: str = None, **fit_kw) -> DcaModel:
    features = np.asarray(features, dtype=np.float64)
    mode = mode or _infer_mode(features.shape[1])
    net = DcaModel.initialize(features.shape[1], mode, seed)
    net, _ = _fit_classifier(net, features, labels, seed, **fit_kw)
    return net


def train_miattacker(features, labels, seed: int = 0, mode: str = None,
                     **fit_kw) -> MiAttackerModel:
    features = np.asarray(features, dtype=np.float64)
    mode = mode or _infer_mode(features.shape[1])
    net = MiAttackerModel.initialize(features.shape[1], mode, seed)
    net, _ = _fit_classifier(net, features, labels, seed, **fit_kw)
    return net


# ---------------------------------------------------------------------------
# gradient-boosted trees (black-box baseline)
# ---------------------------------------------------------------------------

def _build_tree(x, g, h, depth, max_depth, reg_lambda):
    """Exact greedy regression tree on the logistic-loss (g, h) statistics."""
    g_sum, h_sum = float(g.sum()), float(h.sum())
    leaf = {"value": -g_sum / (h_sum + reg_lambda)}
    if depth >= max_depth or x.shape[0] < 2:
        return leaf
    parent = g_sum * g_sum / (h_sum + reg_lambda)
    best = None
    for feat in range(x.shape[1]):
        order = np.argsort(x[:, feat], kind="mergesort")
        xv = x[order, feat]
        gc = np.cumsum(g[order])
        hc = np.cumsum(h[order])
        # candidate cuts between distinct consecutive values
        distinct = np.flatnonzero(xv[1:] != xv[:-1])
        for i in distinct:
            gl, hl = gc[i], hc[i]
            gr, hr = g_sum - gl, h_sum - hl
            gain = 0.5 * (gl * gl / (hl + reg_lambda)
                          + gr * gr / (hr + reg_lambda) - parent)
            if best is None or gain > best[0]:
                best = (gain, feat, 0.5 * (xv[i] + xv[i + 1]))
    if best is None or best[0] <= 1e-12:
        return leaf
    _, feat, thr = best
    feat, thr = int(feat), float(thr)
    mask = x[:, feat] <= thr
    return {
        "feature": feat,
        "threshold": thr,
        "left": _build_tree(x[mask], g[mask], h[mask], depth + 1, max_depth, reg_lambda),
        "right": _build_tree(x[~mask], g[~mask], h[~mask], depth + 1, max_depth, reg_lambda),
    }


def _tree_predict(node, x):
    out = np.empty(x.shape[0])
    if "feature" not in node:
        out[:] = node["value"]
        return out
    mask = x[:, node["feature"]] <= node["threshold"]
    out[mask] = _tree_predict(node["left"], x[mask])
    out[~mask] = _tree_predict(node["right"], x[~mask])
    return out


class GbdtModel:
    """Boosted depth-limited trees on [predict_proba, response] features."""

    kind = "gbdt"
    mode = "black"

    def __init__(self, trees, learning_rate: float, base_score: float):
        self.trees = trees
        self.learning_rate = learning_rate
        self.base_score = base_score
        self.n_features = 2

    def predict_raw(self, features: np.ndarray) -> np.ndarray:
        raw = np.full(features.shape[0], self.base_score)
        for tree in self.trees:
            raw += self.learning_rate * _tree_predict(tree, features)
        return raw

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return sigmoid(self.predict_raw(features))


def train_gbdt(features, labels, n_trees: int = 50, depth: int = 3,
               lr: float = 0.1, seed: int = 0, reg_lambda: float = 1.0) -> GbdtModel:
    """Logistic-loss boosting with exact greedy splits.  Black features only;
    the fit is deterministic (seed kept for interface symmetry)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise FeatureModeError("train_gbdt expects black-mode features of length 2")
    _check_classes(y)
    pos_rate = y.mean()
    base = float(np.log(pos_rate / (1.0 - pos_rate)))
    raw = np.full(x.shape[0], base)
    trees = []
    for _ in range(n_trees):
        p = sigmoid(raw)
        g = p - y
        h = p * (1.0 - p)
        tree = _build_tree(x, g, h, 0, depth, reg_lambda)
        trees.append(tree)
        raw += lr * _tree_predict(tree, x)
    return GbdtModel(trees, lr, base)


# ---------------------------------------------------------------------------
# shared prediction surface
# ---------------------------------------------------------------------------

def predict_membership_batch(attacker, features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != attacker.n_features:
        raise FeatureModeError(
            f"{attacker.kind} was trained on {attacker.n_features}-dim "
            f"({attacker.mode}) features, got {features.shape[1]}-dim")
    return attacker.predict_proba(features)


def predict_membership(attacker, feature) -> float:
    """Membership probability; the hard decision is strict (p > 0.5)."""
    return float(predict_membership_batch(attacker, feature)[0])


def membership_decision(p_mem: float) -> int:
    return int(p_mem > 0.5)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_attacker(attacker, path) -> None:
    doc = {"format": "attacker/1", "kind": attacker.kind, "mode": attacker.mode}
    if attacker.kind == "gbdt":
        doc["trees"] = attacker.trees
        doc["learning_rate"] = attacker.learning_rate
        doc["base_score"] = attacker.base_score
    else:
        doc["standardizer"] = {"mean": attacker.standardizer.mean.tolist(),
                               "std": attacker.standardizer.std.tolist()}
        doc["blocks"] = {name: blk.values.tolist()
                         for name, blk in attacker.blocks.items()}
    atomic_write_text(path, json.dumps(doc))


def load_attacker(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "attacker/1":
        raise ValueError(f"{path}: not an attacker/1 file")
    kind = doc["kind"]
    if kind == "gbdt":
        return GbdtModel(doc["trees"], doc["learning_rate"], doc["base_score"])
    std = Standardizer(np.array(doc["standardizer"]["mean"]),
                       np.array(doc["standardizer"]["std"]))
    blocks = {name: ParamBlock(name, np.array(vals, dtype=np.float64))
              for name, vals in doc["blocks"].items()}
    cls = DcaModel if kind == "dca" else MiAttackerModel
    return cls(blocks, std, doc["mode"])
