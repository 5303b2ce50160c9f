"""Student-response datasets: CSV loading/writing, validation, a slip/guess
synthetic generator with a known mastery oracle, and the student-level
partition scheme that drives the audit pipeline.

File schemas
------------
records CSV   header ``student_id,question_id,response``, one record per line.
Q-matrix CSV  header ``question_id,kc_0,...,kc_{K-1}``, binary cells.
split JSON    the four student-id sets plus per-student record splits,
              versioned ``"format": "splitplan/1"``.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng

# fixed Philox stream ids so independent draws never alias
_STREAM_SYNTH = 0x5D
_STREAM_SPLIT = 0x51


class ValidationError(ValueError):
    """Input data violates a schema or domain invariant."""


class ParseError(ValidationError):
    """A file could not be parsed; message carries the 1-based line number."""


class ConfigError(ValueError):
    """A requested configuration is infeasible or incomplete."""


@dataclass(frozen=True)
class InteractionRecord:
    """One (student, question, response) triplet; response is 0 or 1."""

    student_id: int
    question_id: int
    response: int


@dataclass(frozen=True)
class QMatrix:
    """Expert question-by-skill tagging: binary (J, K) matrix, no empty rows."""

    entries: np.ndarray

    def __post_init__(self):
        ent = np.asarray(self.entries)
        if ent.ndim != 2:
            raise ValidationError("QMatrix must be 2-D")
        if not np.isin(ent, (0, 1)).all():
            raise ValidationError("QMatrix entries must be 0 or 1")
        if (ent.sum(axis=1) == 0).any():
            bad = int(np.flatnonzero(ent.sum(axis=1) == 0)[0])
            raise ValidationError(f"QMatrix row {bad} tags no skill")
        object.__setattr__(self, "entries", np.ascontiguousarray(ent, dtype=np.float64))

    @property
    def n_questions(self) -> int:
        return self.entries.shape[0]

    @property
    def n_kcs(self) -> int:
        return self.entries.shape[1]


@dataclass
class Dataset:
    records: list
    q_matrix: QMatrix
    n_students: int
    n_questions: int
    n_kcs: int
    _arrays: tuple = field(default=None, repr=False, compare=False)

    def arrays(self):
        """(students, questions, responses) as int64 arrays, cached."""
        if self._arrays is None:
            s = np.array([r.student_id for r in self.records], dtype=np.int64)
            q = np.array([r.question_id for r in self.records], dtype=np.int64)
            y = np.array([r.response for r in self.records], dtype=np.int64)
            self._arrays = (s, q, y)
        return self._arrays

    def records_by_student(self) -> dict:
        """student_id -> record indices, in dataset order."""
        by = {}
        for i, r in enumerate(self.records):
            by.setdefault(r.student_id, []).append(i)
        return by


def make_dataset(records, q_matrix: QMatrix) -> Dataset:
    """Validate records against the Q-matrix and derive the counts."""
    if not records:
        raise ValidationError("dataset has no records")
    j_max = q_matrix.n_questions
    seen = set()
    for r in records:
        if r.response not in (0, 1):
            raise ValidationError(f"response {r.response} not in {{0,1}}")
        if r.student_id < 0:
            raise ValidationError(f"negative student_id {r.student_id}")
        if not 0 <= r.question_id < j_max:
            raise ValidationError(f"question_id {r.question_id} outside [0, {j_max})")
        key = (r.student_id, r.question_id)
        if key in seen:
            raise ValidationError(f"duplicate (student, question) pair {key}")
        seen.add(key)
    n_students = max(r.student_id for r in records) + 1
    return Dataset(records=list(records), q_matrix=q_matrix,
                   n_students=n_students, n_questions=j_max, n_kcs=q_matrix.n_kcs)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

_RECORDS_HEADER = ["student_id", "question_id", "response"]


def _parse_int(text: str, line_no: int, path: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}:{line_no}: not an integer: {text!r}") from None


def load_dataset(records_path, qmatrix_path) -> Dataset:
    """Load and validate a records CSV plus its Q-matrix CSV."""
    q_matrix = _load_qmatrix(str(qmatrix_path))
    records = []
    path = str(records_path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _RECORDS_HEADER:
            raise ParseError(f"{path}:1: expected header "
                             f"{','.join(_RECORDS_HEADER)!r}, got {header!r}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{line_no}: expected 3 fields, got {len(row)}")
            sid = _parse_int(row[0], line_no, path)
            qid = _parse_int(row[1], line_no, path)
            resp = _parse_int(row[2], line_no, path)
            if resp not in (0, 1):
                raise ParseError(f"{path}:{line_no}: response must be 0 or 1, got {resp}")
            records.append(InteractionRecord(sid, qid, resp))
    if not records:
        raise ParseError(f"{path}: no records")
    return make_dataset(records, q_matrix)


def _load_qmatrix(path: str) -> QMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "question_id":
            raise ParseError(f"{path}:1: first Q-matrix column must be question_id")
        n_kcs = len(header) - 1
        expected = [f"kc_{k}" for k in range(n_kcs)]
        if [h.strip() for h in header[1:]] != expected:
            raise ParseError(f"{path}:1: expected KC columns {expected}")
        rows = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_kcs + 1:
                raise ParseError(f"{path}:{line_no}: expected {n_kcs + 1} fields")
            qid = _parse_int(row[0], line_no, path)
            if qid in rows:
                raise ParseError(f"{path}:{line_no}: duplicate question_id {qid}")
            cells = [_parse_int(c, line_no, path) for c in row[1:]]
            for c in cells:
                if c not in (0, 1):
                    raise ParseError(f"{path}:{line_no}: Q-matrix cell must be 0 or 1")
            rows[qid] = cells
    if not rows:
        raise ParseError(f"{path}: empty Q-matrix")
    n_q = len(rows)
    if sorted(rows) != list(range(n_q)):
        raise ParseError(f"{path}: question_id values must be exactly 0..{n_q - 1}")
    entries = np.array([rows[j] for j in range(n_q)], dtype=np.float64)
    return QMatrix(entries)


def atomic_write_text(path, text: str) -> None:
    """Write via temp file + rename so partial files never land on disk."""
    path = str(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(dataset: Dataset, records_path, qmatrix_path) -> None:
    lines = [",".join(_RECORDS_HEADER)]
    for r in dataset.records:
        lines.append(f"{r.student_id},{r.question_id},{r.response}")
    atomic_write_text(records_path, "\n".join(lines) + "\n")

    header = ["question_id"] + [f"kc_{k}" for k in range(dataset.n_kcs)]
    qlines = [",".join(header)]
    ent = dataset.q_matrix.entries.astype(int)
    for j in range(dataset.n_questions):
        qlines.append(",".join([str(j)] + [str(int(v)) for v in ent[j]]))
    atomic_write_text(qmatrix_path, "\n".join(qlines) + "\n")


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Slip/guess response generator over a random Q-matrix.

    A student answers correctly with probability 1 - slip when they master
    every skill the question requires, otherwise with probability guess.  The
    returned mastery matrix is the test oracle.
    """

    n_students: int
    n_questions: int
    n_kcs: int
    slip: float = 0.1
    guess: float = 0.2
    density: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.n_students, self.n_questions, self.n_kcs) < 1:
            raise ConfigError("counts must be >= 1")
        for name in ("slip", "guess"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density must be in (0, 1], got {self.density}")


def generate_synthetic(spec: SyntheticSpec):
    """Returns (Dataset over all student-question pairs, S x K mastery matrix)."""
    rng = make_rng(spec.seed, stream=_STREAM_SYNTH)
    q = (rng.random((spec.n_questions, spec.n_kcs)) < spec.density).astype(np.float64)
    for j in np.flatnonzero(q.sum(axis=1) == 0):
        q[j, rng.integers(spec.n_kcs)] = 1.0
    mastery = (rng.random((spec.n_students, spec.n_kcs)) < 0.5).astype(np.int64)

    masters_all = (mastery @ q.T) >= q.sum(axis=1)[None, :]  # (S, J) conjunction
    p_correct = np.where(masters_all, 1.0 - spec.slip, spec.guess)
    resp = (rng.random((spec.n_students, spec.n_questions)) < p_correct).astype(int)

    records = [InteractionRecord(s, j, int(resp[s, j]))
               for s in range(spec.n_students)
               for j in range(spec.n_questions)]
    return make_dataset(records, QMatrix(q)), mastery


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

# per-student split fractions (train / valid / test)
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

VALID_RATIOS = (0.01, 0.05, 0.10)


@dataclass
class SplitPlan:
    """Four disjoint student sets plus a per-student train/valid/test split.

    retain + forget students train the original model; the two non-member
    sets feed attack training and attack evaluation respectively, sized to
    match the forget set so attack classes stay balanced.
    """

    retain_students: list
    forget_students: list
    nonmember_train_students: list
    nonmember_eval_students: list
    per_student_splits: dict  # student_id -> (train_idx, valid_idx, test_idx)
    forgetting_ratio: float
    seed: int

    def records_for(self, dataset: Dataset, student_ids, part: str):
        """Records of the given students restricted to one split part."""
        slot = {"train": 0, "valid": 1, "test": 2}[part]
        out = []
        for sid in student_ids:
            for idx in self.per_student_splits[sid][slot]:
                out.append(dataset.records[idx])
        return out


def partition_students(dataset: Dataset, ratio: float, seed: int) -> SplitPlan:
    """Draw the four disjoint student sets and split each student's records.

    |forget| = |nm_train| = |nm_eval| = round(ratio * S); everyone else
    retains.  Per-student records are shuffled once and cut 70/10/20.
    """
    s_total = dataset.n_students
    n_f = int(round(ratio * s_total))
    if n_f < 1:
        raise ConfigError(f"ratio {ratio} selects no forget students (S={s_total})")
    if 3 * n_f > s_total:
        raise ConfigError(
            f"ratio {ratio} infeasible: 3*{n_f} students exceed population {s_total}")

    rng = make_rng(seed, stream=_STREAM_SPLIT)
    order = rng.permutation(s_total)
    forget = sorted(int(x) for x in order[:n_f])
    nm_train = sorted(int(x) for x in order[n_f:2 * n_f])
    nm_eval = sorted(int(x) for x in order[2 * n_f:3 * n_f])
    retain = sorted(int(x) for x in order[3 * n_f:])

    by_student = dataset.records_by_student()
    splits = {}
    f_tr, f_va, _ = SPLIT_FRACTIONS
    for sid in sorted(by_student):
        idxs = np.array(by_student[sid])
        idxs = idxs[rng.permutation(len(idxs))]
        n = len(idxs)
        n_tr = int(round(f_tr * n))
        n_va = int(round(f_va * n))
        n_tr = min(n_tr, n)
        n_va = min(n_va, n - n_tr)
        splits[sid] = (
            [int(i) for i in idxs[:n_tr]],
            [int(i) for i in idxs[n_tr:n_tr + n_va]],
            [int(i) for i in idxs[n_tr + n_va:]],
        )
    return SplitPlan(retain, forget, nm_train, nm_eval, splits, ratio, seed)


def save_split_plan(plan: SplitPlan, path) -> None:
    doc = {
        "format": "splitplan/1",
        "forgetting_ratio": plan.forgetting_ratio,
        "seed": plan.seed,
        "retain_students": plan.retain_students,
        "forget_students": plan.forget_students,
        "nonmember_train_students": plan.nonmember_train_students,
        "nonmember_eval_students": plan.nonmember_eval_students,
        "per_student_splits": {str(k): list(v) for k, v in plan.per_student_splits.items()},
    }
    atomic_write_text(path, json.dumps(doc, indent=1))


def load_split_plan(path) -> SplitPlan:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "splitplan/1":
        raise ValidationError(f"{path}: not a splitplan/1 file")
    splits = {int(k): (v[0], v[1], v[2])
              for k, v in doc["per_student_splits"].items()}
    return SplitPlan(
        retain_students=doc["retain_students"],
        forget_students=doc["forget_students"],
        nonmember_train_students=doc["nonmember_train_students"],
        nonmember_eval_students=doc["nonmember_eval_students"],
        per_student_splits=splits,
        forgetting_ratio=doc["forgetting_ratio"],
        seed=doc["seed"],
    )
