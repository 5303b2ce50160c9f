"""Train each of the three diagnosis models on synthetic data and check how
well the learned per-skill mastery states track the generator's ground truth.

Also demonstrates the monotonicity guarantee: raising a required skill's
mastery never lowers the predicted success probability.
"""
import numpy as np

from cdaudit import CdmConfig, SyntheticSpec, evaluate_cdm, generate_synthetic, train_cdm
from cdaudit.cdm import CdmModel
from cdaudit.data import partition_students

dataset, mastery = generate_synthetic(
    SyntheticSpec(n_students=200, n_questions=20, n_kcs=8, slip=0.05, guess=0.1, seed=3))
plan = partition_students(dataset, ratio=0.10, seed=2)
scope = sorted(set(plan.retain_students) | set(plan.forget_students))
test_records = plan.records_for(dataset, scope, "test")

for arch in ("neuralcd", "kscd", "kancd"):
    config = CdmConfig(arch=arch, epochs=150, patience=150, lr=5e-3, seed=0)
    model, log = train_cdm(dataset, plan, scope, config)
    acc, auc = evaluate_cdm(model, test_records)

    ids = np.array(scope)
    untrained = CdmModel.initialize(dataset.q_matrix.entries, dataset.n_students, config)
    ks, ks0 = model.kstate_batch(ids), untrained.kstate_batch(ids)
    agree = np.mean((ks > 0.5) == mastery[ids])
    agree0 = np.mean((ks0 > 0.5) == mastery[ids])
    print(f"{arch:9s} best epoch {log['best_epoch']:3d}  "
          f"test acc={acc:.3f} auc={auc:.3f}  "
          f"mastery agreement {agree0:.3f} -> {agree:.3f}")

# monotonicity probe on the last model
student, question = scope[0], 0
required = np.flatnonzero(model.q_matrix[question] == 1)
k = int(required[0])
kst = model.kstate(student)
print(f"\nmonotonicity on question {question}, skill {k}:")
for bump in (0.0, 0.2, 0.4):
    probe = np.clip(kst.copy(), 0, 1)
    probe[k] = min(1.0, probe[k] + bump)
    print(f"  mastery[{k}]={probe[k]:.2f} -> p(correct)="
          f"{model.predict_from_kstate(probe, question):.4f}")
