"""Mount the profile-based membership inference attack against an
undefended model and measure how much the exposed knowledge state amplifies
it over a prediction-only black-box baseline.

Protocol: the original model trains on retain+forget students; the attacker
then learns to separate forget-student test records (members) from
nonmember-student test records using the model's outputs, and is scored on
a disjoint student set.
"""
from cdaudit import CdmConfig, SyntheticSpec, generate_synthetic, train_cdm
from cdaudit.attack import train_dca, train_gbdt, train_miattacker
from cdaudit.audit import build_attack_training_set, evaluate_defense
from cdaudit.data import partition_students

dataset, _ = generate_synthetic(
    SyntheticSpec(n_students=536, n_questions=20, n_kcs=8, slip=0.2, guess=0.3, seed=12))
plan = partition_students(dataset, ratio=0.05, seed=9)
scope = sorted(set(plan.retain_students) | set(plan.forget_students))

print("training the target model on retain+forget students ...")
m_orig, _ = train_cdm(dataset, plan, scope,
                      CdmConfig(epochs=200, patience=200, lr=1e-2, seed=0))

grey_x, labels = build_attack_training_set(m_orig, plan, dataset, "grey")
black_x, _ = build_attack_training_set(m_orig, plan, dataset, "black")
print(f"attack training set: {labels.sum():.0f} members / "
      f"{(1 - labels).sum():.0f} non-members, grey width {grey_x.shape[1]}")

fit = {"patience": 80, "max_epochs": 1500}
attackers = {
    "gbdt  (black)": (train_gbdt(black_x, labels, seed=5), "black"),
    "dca   (black)": (train_dca(black_x, labels, seed=5, **fit), "black"),
    "mia   (black)": (train_miattacker(black_x, labels, seed=5, **fit), "black"),
    "dca   (grey) ": (train_dca(grey_x, labels, seed=5, **fit), "grey"),
    "mia   (grey) ": (train_miattacker(grey_x, labels, seed=5, **fit), "grey"),
}

print(f"\n{'attacker':14s} {'ACC_MIA':>8s} {'AUC_MIA':>8s}")
for name, (attacker, mode) in attackers.items():
    acc_mia, auc_mia = evaluate_defense(m_orig, attacker, plan, dataset, mode)
    print(f"{name:14s} {acc_mia:8.4f} {auc_mia:8.4f}")
print("\nthe grey-box attackers see [p(correct), response, mastery vector];")
print("the black-box rows see only [p(correct), response]")
