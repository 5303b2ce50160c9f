"""The four-step membership-inference audit, end to end.

Step 1  partition students into retain / forget / nm_train / nm_eval
Step 2  train M_orig (retain+forget) and M_retrain (retain only)
Step 3  train the attacker on M_orig's outputs: forget-test records are
        members, nm_train-test records are non-members
Step 4  score every defended model on forget-test (pos) vs nm_eval-test
        (neg); ACC/AUC near 0.5 means the defense worked

Each requested (arch, defense, ratio, attacker) cell lands in an AuditReport
row; failures are recorded in place so a sweep survives one bad cell.
"""
from __future__ import annotations

import hashlib
import json
import time
import zlib
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import __version__
from .attack import (extract_features_batch, predict_membership_batch,
                     train_dca, train_gbdt, train_miattacker)
from .cdm import CdmConfig, CdmModel, evaluate_cdm, train_cdm
from .data import ConfigError, Dataset, SplitPlan, atomic_write_text, partition_students
from .numerics import accuracy, rank_auc
from .unlearn import (DEFAULT_GRIDS, AuditContext, ForgetRequest,
                      tune_defense, unlearn_model)

ATTACKER_KINDS = ("gbdt-black", "dca-grey", "mia-grey", "dca-black", "mia-black")
DEFENSES = ("none", "retrain", "amnesiac", "lcodec", "ssd")


# ---------------------------------------------------------------------------
# metrics (shared implementation lives in numerics)
# ---------------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Rank-based AUC with ties counted 1/2; raises on single-class input."""
    return rank_auc(scores, labels)


def acc(scores, labels) -> float:
    """Attack accuracy at the strict 0.5 decision threshold."""
    return accuracy(scores, labels)


# ---------------------------------------------------------------------------
# attack-set construction and defense scoring
# ---------------------------------------------------------------------------

def build_attack_training_set(m_orig: CdmModel, plan: SplitPlan,
                              dataset: Dataset, mode: str):
    """Step 3 features: forget-student test records (label 1) vs nm_train
    test records (label 0), all featured against M_orig."""
    pos = plan.records_for(dataset, plan.forget_students, "test")
    neg = plan.records_for(dataset, plan.nonmember_train_students, "test")
    if not pos or not neg:
        raise ConfigError("build_attack_training_set: empty test lists")
    x_pos = extract_features_batch(m_orig, pos, mode)
    x_neg = extract_features_batch(m_orig, neg, mode)
    features = np.vstack([x_pos, x_neg])
    labels = np.concatenate([np.ones(len(pos), dtype=np.int64),
                             np.zeros(len(neg), dtype=np.int64)])
    return features, labels


def evaluate_defense(m_defended: CdmModel, attacker, plan: SplitPlan,
                     dataset: Dataset, mode: str):
    """Step 4 metrics (acc_mia, auc_mia) of the attacker against one model."""
    pos = plan.records_for(dataset, plan.forget_students, "test")
    neg = plan.records_for(dataset, plan.nonmember_eval_students, "test")
    if not pos or not neg:
        raise ConfigError("evaluate_defense: empty test lists")
    x = np.vstack([extract_features_batch(m_defended, pos, mode),
                   extract_features_batch(m_defended, neg, mode)])
    labels = np.concatenate([np.ones(len(pos), dtype=np.int64),
                             np.zeros(len(neg), dtype=np.int64)])
    scores = predict_membership_batch(attacker, x)
    return acc(scores, labels), auc(scores, labels)


# ---------------------------------------------------------------------------
# plan / report
# ---------------------------------------------------------------------------

@dataclass
class AuditPlan:
    dataset: Dataset
    archs: list
    defenses: list
    ratios: list
    attackers: list
    seed: int = 0
    cdm: CdmConfig = field(default_factory=CdmConfig)
    grids: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_GRIDS.items()})
    tune: bool = True
    attack_fit: dict = field(default_factory=dict)  # lr/batch_size/max_epochs/patience

    def __post_init__(self):
        if not (self.archs and self.defenses and self.ratios and self.attackers):
            raise ConfigError("audit plan lists must be nonempty")
        for a in self.attackers:
            if a not in ATTACKER_KINDS:
                raise ConfigError(f"unknown attacker kind {a!r}")
        for d in self.defenses:
            if d not in DEFENSES:
                raise ConfigError(f"unknown defense {d!r}")
        for r in self.ratios:
            if not any(abs(r - v) < 1e-9 for v in (0.01, 0.05, 0.10)):
                raise ConfigError(f"forgetting ratio {r} not in {{0.01, 0.05, 0.10}}")


@dataclass
class AuditCell:
    arch: str
    defense: str
    ratio: float
    attacker: str
    acc_mia: float = None
    auc_mia: float = None
    defense_hyper: dict = field(default_factory=dict)
    utility_acc: float = None
    utility_auc: float = None
    seed: int = 0
    wall_time: float = 0.0
    error: str = None


@dataclass
class AuditReport:
    cells: list
    provenance: dict


def _subseed(base: int, tag: str) -> int:
    """Stable per-component seed: independent of list ordering in the plan."""
    return (base * 0x9E3779B97F4A7C15 + zlib.crc32(tag.encode())) & 0x7FFFFFFFFFFFFFFF


def _train_attacker(kind: str, features, labels, seed: int, fit_kw=None):
    name, mode = kind.split("-")
    if name == "gbdt":
        return train_gbdt(features, labels, seed=seed)
    fit_kw = fit_kw or {}
    if name == "dca":
        return train_dca(features, labels, seed=seed, mode=mode, **fit_kw)
    return train_miattacker(features, labels, seed=seed, mode=mode, **fit_kw)


def _dataset_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256()
    s, j, y = dataset.arrays()
    for arr in (s, j, y):
        h.update(arr.tobytes())
    h.update(dataset.q_matrix.entries.tobytes())
    return h.hexdigest()


def _plan_hash(plan: AuditPlan) -> str:
    doc = {
        "dataset": _dataset_fingerprint(plan.dataset),
        "archs": plan.archs, "defenses": plan.defenses,
        "ratios": plan.ratios, "attackers": plan.attackers,
        "seed": plan.seed, "tune": plan.tune, "grids": plan.grids,
        "attack_fit": plan.attack_fit,
        "cdm": {**asdict(plan.cdm), "hidden": list(plan.cdm.hidden)},
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def run_audit(plan: AuditPlan) -> AuditReport:
    dataset = plan.dataset
    cells = []
    for ratio in plan.ratios:
        split = partition_students(dataset, ratio, _subseed(plan.seed, f"split|{ratio}"))
        retain_test = split.records_for(dataset, split.retain_students, "test")
        for arch in plan.archs:
            cfg = replace(plan.cdm, arch=arch,
                          seed=_subseed(plan.seed, f"cdm|{arch}|{ratio}"))
            scope_orig = sorted(set(split.retain_students) | set(split.forget_students))
            m_orig, _ = train_cdm(dataset, split, scope_orig, cfg)
            m_retrain, _ = train_cdm(dataset, split, split.retain_students, cfg)
            for kind in plan.attackers:
                mode = kind.split("-")[1]
                atk_seed = _subseed(plan.seed, f"attacker|{kind}|{arch}|{ratio}")
                features, labels = build_attack_training_set(m_orig, split, dataset, mode)
                attacker = _train_attacker(kind, features, labels, atk_seed,
                                           plan.attack_fit)
                for defense in plan.defenses:
                    cell = AuditCell(arch=arch, defense=defense, ratio=ratio,
                                     attacker=kind, seed=plan.seed)
                    t0 = time.perf_counter()
                    try:
                        m_def, hyper = _defended_model(
                            plan, dataset, split, m_orig, m_retrain,
                            attacker, mode, defense,
                            _subseed(plan.seed, f"defense|{defense}|{kind}|{arch}|{ratio}"))
                        cell.defense_hyper = hyper
                        cell.acc_mia, cell.auc_mia = evaluate_defense(
                            m_def, attacker, split, dataset, mode)
                        u_acc, u_auc = evaluate_cdm(m_def, retain_test)
                        cell.utility_acc, cell.utility_auc = u_acc, u_auc
                    except Exception as exc:  # keep the sweep alive
                        cell.error = f"{type(exc).__name__}: {exc}"
                    cell.wall_time = time.perf_counter() - t0
                    cells.append(cell)
    provenance = {"config_hash": _plan_hash(plan), "toolkit_version": __version__,
                  "seed": plan.seed}
    return AuditReport(cells=cells, provenance=provenance)


def _defended_model(plan, dataset, split, m_orig, m_retrain, attacker, mode,
                    defense, seed):
    if defense == "none":
        return m_orig, {}
    if defense == "retrain":
        return m_retrain, {}
    grid = plan.grids.get(defense) or DEFAULT_GRIDS[defense]
    forget = split.records_for(dataset, split.forget_students, "train")
    retain = split.records_for(dataset, split.retain_students, "train")
    if plan.tune:
        ctx = AuditContext(m_orig, dataset, split, attacker, mode, seed=seed)
        hyper, rows = tune_defense(defense, grid, ctx)
        best_idx = min(rows, key=lambda r: r["score"])["index"]
        req = ForgetRequest(m_orig, forget, retain, defense, hyper,
                            seed=seed + best_idx)
        return unlearn_model(req), hyper
    hyper = {k: v[0] for k, v in grid.items()}
    req = ForgetRequest(m_orig, forget, retain, defense, hyper, seed=seed)
    return unlearn_model(req), hyper


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_CSV_COLUMNS = ("arch", "defense", "ratio", "attacker", "acc_mia", "auc_mia",
                "utility_acc", "utility_auc", "defense_hyper", "seed",
                "wall_time", "error")


def report_to_json(report: AuditReport) -> str:
    doc = {"format": "audit/1", "provenance": report.provenance,
           "cells": [asdict(c) for c in report.cells]}
    return json.dumps(doc, indent=1)


def report_to_csv(report: AuditReport) -> str:
    lines = [",".join(_CSV_COLUMNS)]
    for c in report.cells:
        row = []
        for col in _CSV_COLUMNS:
            v = getattr(c, col)
            if col == "defense_hyper":
                v = json.dumps(v, sort_keys=True).replace(",", ";")
            row.append("" if v is None else str(v))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def save_report(report: AuditReport, json_path, csv_path=None) -> None:
    atomic_write_text(json_path, report_to_json(report))
    if csv_path is not None:
        atomic_write_text(csv_path, report_to_csv(report))


def load_report(path) -> AuditReport:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "audit/1":
        raise ValueError(f"{path}: not an audit/1 file")
    cells = [AuditCell(**c) for c in doc["cells"]]
    return AuditReport(cells=cells, provenance=doc["provenance"])
