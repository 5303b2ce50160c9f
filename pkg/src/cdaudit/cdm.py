"""The three target diagnosis models (neuralcd, kscd, kancd): forward
prediction, per-skill knowledge states, hand-derived gradients, the
nonnegative-weight monotonicity projection, and the train/eval loops.

All three share the interaction pipeline
    x = q_j * (kstate_s - sigmoid(diff_j)) * sigmoid(disc_j)
    p = sigmoid(MLP(x))          # MLP weights clamped >= 0 after every step
with tanh hidden units (zero-centered, so the nonnegative-weight clamp does
not collapse under the early mean-error gradient) and differ only in how
kstate_s is produced from the student table:

    neuralcd   sigmoid of the student's own K-dim row
    kancd      sigmoid(e_s . c_k) over d-dim student/skill latents
    kscd       sigmoid(fusion . (e_s * c_k) + bias), fusion shared across k

Gradients are derived by hand (no autodiff); numerics.finite_diff_check is
the guard that keeps them honest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .data import ConfigError, Dataset, SplitPlan, atomic_write_text
from .numerics import (Adam, ParamBlock, SingleClassError, accuracy,
                       copy_blocks, make_rng, rank_auc, sigmoid)

ARCHS = ("neuralcd", "kscd", "kancd")

# fixed Philox stream per block so init draws are independent of each other
# and of the batch shuffle
_BLOCK_STREAMS = {
    "student": 11, "kc": 12, "fusion": 13, "fusion_bias": 14,
    "diff": 15, "disc": 16,
    "w1": 17, "b1": 18, "w2": 19, "b2": 20, "w3": 21, "b3": 22,
}
_STREAM_SHUFFLE = 23

_MLP_WEIGHTS = ("w1", "w2", "w3")


@dataclass
class CdmConfig:
    arch: str = "neuralcd"
    latent_dim: int = 16
    hidden: tuple = (64, 32)
    epochs: int = 60
    batch_size: int = 128
    lr: float = 2e-3
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.latent_dim < 1 or min(self.hidden) < 1:
            raise ConfigError("latent_dim and hidden widths must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


class CdmModel:
    """A trained (or initialized) diagnosis model over a fixed Q-matrix."""

    def __init__(self, arch: str, config: CdmConfig, q_matrix: np.ndarray,
                 n_students: int, blocks: dict):
        self.arch = arch
        self.config = config
        self.q_matrix = np.ascontiguousarray(q_matrix, dtype=np.float64)
        self.n_students = n_students
        self.n_questions, self.n_kcs = self.q_matrix.shape
        self.blocks = blocks

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, q_matrix: np.ndarray, n_students: int,
                   config: CdmConfig) -> "CdmModel":
        q = np.asarray(q_matrix, dtype=np.float64)
        n_q, n_k = q.shape
        d = config.latent_dim
        h1, h2 = config.hidden

        def draw(name, fn):
            return ParamBlock(name, fn(make_rng(config.seed, _BLOCK_STREAMS[name])))

        # the student table starts tight (std 0.05) so untrained rows form a
        # narrow mastery cluster; training spreads only the in-scope rows
        blocks = {}
        if config.arch == "neuralcd":
            blocks["student"] = draw("student", lambda r: 0.05 * r.standard_normal((n_students, n_k)))
        else:
            blocks["student"] = draw("student", lambda r: 0.05 * r.standard_normal((n_students, d)))
            blocks["kc"] = draw("kc", lambda r: 0.1 * r.standard_normal((n_k, d)))
        if config.arch == "kscd":
            blocks["fusion"] = draw("fusion", lambda r: 0.1 * r.standard_normal(d))
            blocks["fusion_bias"] = ParamBlock("fusion_bias", np.zeros(1))
        blocks["diff"] = draw("diff", lambda r: 0.1 * r.standard_normal((n_q, n_k)))
        blocks["disc"] = draw("disc", lambda r: 0.1 * r.standard_normal((n_q, 1)))
        # nonnegative init keeps the monotonicity projection valid from step 0;
        # the 1/fan_in scale stops the all-positive layers from saturating the
        # output sigmoid before training starts
        blocks["w1"] = draw("w1", lambda r: r.uniform(0, np.sqrt(6.0 / (n_k + h1)), (n_k, h1)))
        blocks["b1"] = ParamBlock("b1", np.zeros(h1))
        blocks["w2"] = draw("w2", lambda r: r.uniform(0, 2.0 / h1, (h1, h2)))
        blocks["b2"] = ParamBlock("b2", np.zeros(h2))
        blocks["w3"] = draw("w3", lambda r: r.uniform(0, 2.0 / h2, (h2, 1)))
        blocks["b3"] = ParamBlock("b3", np.zeros(1))
        return cls(config.arch, config, q, n_students, blocks)

    def copy(self) -> "CdmModel":
        return CdmModel(self.arch, self.config, self.q_matrix, self.n_students,
                        copy_blocks(self.blocks))

    def clamp_monotone(self) -> None:
        """Project interaction-MLP weights onto the nonnegative orthant."""
        for name in _MLP_WEIGHTS:
            np.maximum(self.blocks[name].values, 0.0,
                       out=self.blocks[name].values)

    # -- forward ------------------------------------------------------------

    def _check_students(self, s_idx):
        s_idx = np.asarray(s_idx, dtype=np.int64)
        if s_idx.size and (s_idx.min() < 0 or s_idx.max() >= self.n_students):
            raise IndexError(f"student id out of range [0, {self.n_students})")
        return s_idx

    def _check_questions(self, j_idx):
        j_idx = np.asarray(j_idx, dtype=np.int64)
        if j_idx.size and (j_idx.min() < 0 or j_idx.max() >= self.n_questions):
            raise IndexError(f"question id out of range [0, {self.n_questions})")
        return j_idx

    def kstate_batch(self, s_idx) -> np.ndarray:
        """(B, K) mastery estimates in [0, 1] for the given students."""
        s_idx = self._check_students(np.atleast_1d(s_idx))
        b = self.blocks
        if self.arch == "neuralcd":
            return sigmoid(b["student"].values[s_idx])
        emb = b["student"].values[s_idx]
        if self.arch == "kancd":
            return sigmoid(emb @ b["kc"].values.T)
        pre = (emb * b["fusion"].values) @ b["kc"].values.T + b["fusion_bias"].values[0]
        return sigmoid(pre)

    def kstate(self, student_id: int) -> np.ndarray:
        return self.kstate_batch([student_id])[0]

    def _forward(self, s_idx, j_idx):
        """Full forward pass; returns the cache needed by the backward passes."""
        b = self.blocks
        c = {"s_idx": s_idx, "j_idx": j_idx}
        if self.arch == "neuralcd":
            c["kst"] = sigmoid(b["student"].values[s_idx])
        else:
            c["emb"] = b["student"].values[s_idx]
            if self.arch == "kancd":
                c["kst"] = sigmoid(c["emb"] @ b["kc"].values.T)
            else:
                c["kst"] = sigmoid((c["emb"] * b["fusion"].values) @ b["kc"].values.T
                                   + b["fusion_bias"].values[0])
        c["q"] = self.q_matrix[j_idx]
        c["hdiff"] = sigmoid(b["diff"].values[j_idx])
        c["hdisc"] = sigmoid(b["disc"].values[j_idx])
        c["x"] = c["q"] * (c["kst"] - c["hdiff"]) * c["hdisc"]
        c["z1"] = np.tanh(c["x"] @ b["w1"].values + b["b1"].values)
        c["z2"] = np.tanh(c["z1"] @ b["w2"].values + b["b2"].values)
        c["p"] = sigmoid(c["z2"] @ b["w3"].values + b["b3"].values)[:, 0]
        return c

    def predict_proba_batch(self, s_idx, j_idx) -> np.ndarray:
        s_idx = self._check_students(np.atleast_1d(s_idx))
        j_idx = self._check_questions(np.atleast_1d(j_idx))
        return self._forward(s_idx, j_idx)["p"]

    def predict_proba(self, student_id: int, question_id: int) -> float:
        return float(self.predict_proba_batch([student_id], [question_id])[0])

    def predict_from_kstate(self, kstate: np.ndarray, question_id: int) -> float:
        """Response probability for an explicit mastery vector.

        Feeds the given kstate straight into the interaction pipeline in
        place of the student-table value; the monotonicity property is probed
        through this hook.
        """
        j_idx = self._check_questions([question_id])
        b = self.blocks
        kst = np.asarray(kstate, dtype=np.float64)[None, :]
        hdiff = sigmoid(b["diff"].values[j_idx])
        hdisc = sigmoid(b["disc"].values[j_idx])
        x = self.q_matrix[j_idx] * (kst - hdiff) * hdisc
        z1 = np.tanh(x @ b["w1"].values + b["b1"].values)
        z2 = np.tanh(z1 @ b["w2"].values + b["b2"].values)
        return float(sigmoid(z2 @ b["w3"].values + b["b3"].values)[0, 0])

    # -- backward -----------------------------------------------------------

    def _backprop_mlp(self, c, d_a3):
        """Shared MLP + interaction backward.  d_a3 is dLoss/d(pre-sigmoid
        output) per sample, shape (B, 1).  Returns grads plus d_kstate."""
        b = self.blocks
        g = {}
        g["w3"] = c["z2"].T @ d_a3
        g["b3"] = d_a3.sum(axis=0)
        d_a2 = (d_a3 @ b["w3"].values.T) * (1.0 - np.square(c["z2"]))
        g["w2"] = c["z1"].T @ d_a2
        g["b2"] = d_a2.sum(axis=0)
        d_a1 = (d_a2 @ b["w2"].values.T) * (1.0 - np.square(c["z1"]))
        g["w1"] = c["x"].T @ d_a1
        g["b1"] = d_a1.sum(axis=0)
        d_x = d_a1 @ b["w1"].values.T

        qh = c["q"] * c["hdisc"]
        d_kst = d_x * qh
        d_diff_raw = -d_x * qh * c["hdiff"] * (1.0 - c["hdiff"])
        g["diff"] = np.zeros_like(b["diff"].values)
        np.add.at(g["diff"], c["j_idx"], d_diff_raw)
        d_disc_raw = ((d_x * c["q"] * (c["kst"] - c["hdiff"])).sum(axis=1, keepdims=True)
                      * c["hdisc"] * (1.0 - c["hdisc"]))
        g["disc"] = np.zeros_like(b["disc"].values)
        np.add.at(g["disc"], c["j_idx"], d_disc_raw)
        return g, d_kst

    def _backprop_kstate(self, c, d_kst, g):
        """Arch-specific gradient of the kstate producer into g (in place)."""
        b = self.blocks
        d_pre = d_kst * c["kst"] * (1.0 - c["kst"])
        g["student"] = np.zeros_like(b["student"].values)
        if self.arch == "neuralcd":
            np.add.at(g["student"], c["s_idx"], d_pre)
            return
        if self.arch == "kancd":
            np.add.at(g["student"], c["s_idx"], d_pre @ b["kc"].values)
            g["kc"] = d_pre.T @ c["emb"]
            return
        t = d_pre @ b["kc"].values                       # (B, d)
        np.add.at(g["student"], c["s_idx"], t * b["fusion"].values)
        g["kc"] = d_pre.T @ (c["emb"] * b["fusion"].values)
        g["fusion"] = (c["emb"] * t).sum(axis=0)
        g["fusion_bias"] = np.array([d_pre.sum()])

    def batch_loss_and_grads(self, s_idx, j_idx, y):
        """Mean clamped BCE over the batch and its gradient per block."""
        from .numerics import PROB_EPS
        s_idx = np.asarray(s_idx, dtype=np.int64)
        j_idx = np.asarray(j_idx, dtype=np.int64)
        y = np.asarray(y, dtype=np.float64)
        c = self._forward(s_idx, j_idx)
        p = c["p"]
        pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
        # chain the clamped-BCE gradient through the output sigmoid
        d_a3 = ((pc - y) / (pc * (1.0 - pc)) * p * (1.0 - p) / y.size)[:, None]
        g, d_kst = self._backprop_mlp(c, d_a3)
        self._backprop_kstate(c, d_kst, g)
        return loss, g

    def squared_grad_sums(self, s_idx, j_idx, y):
        """Sum over records of the squared per-record gradient, per block.

        Exploits that each per-record MLP gradient is an outer product, so its
        square factorizes; embedding rows accumulate per-record squares.
        Verified in tests against a per-record loop.
        """
        from .numerics import PROB_EPS
        s_idx = np.asarray(s_idx, dtype=np.int64)
        j_idx = np.asarray(j_idx, dtype=np.int64)
        y = np.asarray(y, dtype=np.float64)
        b = self.blocks
        c = self._forward(s_idx, j_idx)
        p = c["p"]
        pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        d3 = ((pc - y) / (pc * (1.0 - pc)) * p * (1.0 - p))[:, None]  # per record
        sq = {}
        sq["w3"] = np.square(c["z2"]).T @ np.square(d3)
        sq["b3"] = np.square(d3).sum(axis=0)
        d2 = (d3 @ b["w3"].values.T) * (1.0 - np.square(c["z2"]))
        sq["w2"] = np.square(c["z1"]).T @ np.square(d2)
        sq["b2"] = np.square(d2).sum(axis=0)
        d1 = (d2 @ b["w2"].values.T) * (1.0 - np.square(c["z1"]))
        sq["w1"] = np.square(c["x"]).T @ np.square(d1)
        sq["b1"] = np.square(d1).sum(axis=0)
        d_x = d1 @ b["w1"].values.T

        qh = c["q"] * c["hdisc"]
        d_kst = d_x * qh
        d_diff_raw = -d_x * qh * c["hdiff"] * (1.0 - c["hdiff"])
        sq["diff"] = np.zeros_like(b["diff"].values)
        np.add.at(sq["diff"], j_idx, np.square(d_diff_raw))
        d_disc_raw = ((d_x * c["q"] * (c["kst"] - c["hdiff"])).sum(axis=1, keepdims=True)
                      * c["hdisc"] * (1.0 - c["hdisc"]))
        sq["disc"] = np.zeros_like(b["disc"].values)
        np.add.at(sq["disc"], j_idx, np.square(d_disc_raw))

        d_pre = d_kst * c["kst"] * (1.0 - c["kst"])
        sq["student"] = np.zeros_like(b["student"].values)
        if self.arch == "neuralcd":
            np.add.at(sq["student"], s_idx, np.square(d_pre))
        elif self.arch == "kancd":
            np.add.at(sq["student"], s_idx, np.square(d_pre @ b["kc"].values))
            sq["kc"] = np.square(d_pre).T @ np.square(c["emb"])
        else:
            t = d_pre @ b["kc"].values
            np.add.at(sq["student"], s_idx, np.square(t * b["fusion"].values))
            sq["kc"] = np.square(d_pre).T @ np.square(c["emb"] * b["fusion"].values)
            sq["fusion"] = np.square(c["emb"] * t).sum(axis=0)
            sq["fusion_bias"] = np.array([np.square(d_pre.sum(axis=1)).sum()])
        return sq


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

def _record_arrays(records):
    s = np.array([r.student_id for r in records], dtype=np.int64)
    j = np.array([r.question_id for r in records], dtype=np.int64)
    y = np.array([r.response for r in records], dtype=np.float64)
    return s, j, y


def train_cdm(dataset: Dataset, plan: SplitPlan, student_scope, config: CdmConfig):
    """Fit a model on the train split of the scoped students.

    Embeddings are allocated for every student in the dataset so the model
    stays queryable on out-of-scope ids; those rows never receive gradient
    and remain bit-identical to initialization.  Early-stops on validation
    AUC; ties keep the earlier checkpoint.  Returns (model, log).
    """
    scope = sorted(student_scope)
    if not scope:
        raise ConfigError("train_cdm: empty student scope")
    train = plan.records_for(dataset, scope, "train")
    if not train:
        raise ConfigError("train_cdm: no training records in scope")
    valid = plan.records_for(dataset, scope, "valid")

    model = CdmModel.initialize(dataset.q_matrix.entries, dataset.n_students, config)
    log = {"epochs": [], "best_epoch": None, "best_val_auc": None}
    if config.epochs == 0:
        return model, log

    ts, tj, ty = _record_arrays(train)
    vs, vj, vy = _record_arrays(valid) if valid else (None, None, None)
    adam = Adam(model.blocks, lr=config.lr)
    shuffle_rng = make_rng(config.seed, _STREAM_SHUFFLE)
    n = len(train)

    best_auc = -np.inf
    best_blocks = None
    stale = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            sel = perm[lo:lo + config.batch_size]
            loss, grads = model.batch_loss_and_grads(ts[sel], tj[sel], ty[sel])
            for name, blk in model.blocks.items():
                blk.grad[...] = grads[name]
            adam.step(model.blocks)
            model.clamp_monotone()
            losses.append(loss)

        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if vs is not None:
            preds = model.predict_proba_batch(vs, vj)
            try:
                val_auc = rank_auc(preds, vy.astype(np.int64))
            except SingleClassError:
                val_auc = float("nan")
            entry["val_auc"] = val_auc
            entry["val_acc"] = accuracy(preds, vy)
            if val_auc > best_auc:  # strict: equal-AUC ties keep the earlier epoch
                best_auc = val_auc
                best_blocks = copy_blocks(model.blocks)
                log["best_epoch"] = epoch
                stale = 0
            else:
                stale += 1
        log["epochs"].append(entry)
        if vs is not None and stale > config.patience:
            break

    if best_blocks is not None:
        model.blocks = best_blocks
        log["best_val_auc"] = float(best_auc)
    return model, log


def evaluate_cdm(model: CdmModel, records):
    """(accuracy at strict 0.5, AUC) over the records; AUC is None when the
    record set is single-class."""
    if not records:
        raise ValueError("evaluate_cdm: empty record set")
    s, j, y = _record_arrays(records)
    preds = model.predict_proba_batch(s, j)
    acc = accuracy(preds, y)
    try:
        auc = rank_auc(preds, y.astype(np.int64))
    except SingleClassError:
        auc = None
    return acc, auc


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(model: CdmModel, path, log=None) -> None:
    cfg = asdict(model.config)
    cfg["hidden"] = list(cfg["hidden"])
    doc = {
        "format": "cdm-ckpt/1",
        "arch": model.arch,
        "config": cfg,
        "n_students": model.n_students,
        "q_matrix": model.q_matrix.tolist(),
        "blocks": {name: blk.values.tolist() for name, blk in model.blocks.items()},
        "log": _log_summary(log),
    }
    atomic_write_text(path, json.dumps(doc))


def _log_summary(log):
    if not log:
        return None
    return {"best_epoch": log.get("best_epoch"),
            "best_val_auc": log.get("best_val_auc"),
            "n_epochs": len(log.get("epochs", []))}


def load_checkpoint(path) -> CdmModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "cdm-ckpt/1":
        raise ValueError(f"{path}: not a cdm-ckpt/1 file")
    cfg = dict(doc["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    config = CdmConfig(**cfg)
    q = np.array(doc["q_matrix"], dtype=np.float64)
    blocks = {name: ParamBlock(name, np.array(vals, dtype=np.float64))
              for name, vals in doc["blocks"].items()}
    return CdmModel(doc["arch"], config, q, doc["n_students"], blocks)
