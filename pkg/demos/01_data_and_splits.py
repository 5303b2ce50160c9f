"""Generate a synthetic response dataset, persist it as CSV, and carve the
student population into the four disjoint audit sets.

The generator follows a slip/guess response model: a student answers
correctly with probability 1 - slip when they master every skill the
question requires, otherwise with probability guess.  The returned mastery
matrix is the ground-truth oracle later demos diagnose against.
"""
import numpy as np

from cdaudit import SyntheticSpec, generate_synthetic, load_dataset, write_dataset
from cdaudit.data import partition_students

spec = SyntheticSpec(n_students=536, n_questions=20, n_kcs=8,
                     slip=0.1, guess=0.2, seed=7)
dataset, mastery = generate_synthetic(spec)
print(f"dataset: {dataset.n_students} students x {dataset.n_questions} questions "
      f"-> {len(dataset.records)} records, {dataset.n_kcs} skills")
print(f"overall correct rate: {np.mean([r.response for r in dataset.records]):.3f}")
print(f"mean skills per question: {dataset.q_matrix.entries.sum(axis=1).mean():.2f}")

write_dataset(dataset, "records.csv", "qmatrix.csv")
reloaded = load_dataset("records.csv", "qmatrix.csv")
assert reloaded.records == dataset.records
print("wrote records.csv / qmatrix.csv and verified the round trip")

# Student-level partition: forget / nm_train / nm_eval are equally sized so
# the attack classes stay balanced; everyone else retains.
plan = partition_students(dataset, ratio=0.05, seed=1)
print(f"\npartition at 5% forgetting ratio (seed 1):")
print(f"  retain    {len(plan.retain_students):4d} students")
print(f"  forget    {len(plan.forget_students):4d} students")
print(f"  nm_train  {len(plan.nonmember_train_students):4d} students")
print(f"  nm_eval   {len(plan.nonmember_eval_students):4d} students")

tr, va, te = plan.per_student_splits[plan.forget_students[0]]
print(f"per-student record split (70/10/20): train={len(tr)} valid={len(va)} test={len(te)}")
