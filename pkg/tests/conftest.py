import pytest

from cdaudit.data import SyntheticSpec, generate_synthetic, partition_students


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small noiseless dataset with its mastery oracle and a 10% split."""
    spec = SyntheticSpec(n_students=60, n_questions=20, n_kcs=6,
                         slip=0.0, guess=0.0, seed=21)
    dataset, mastery = generate_synthetic(spec)
    plan = partition_students(dataset, 0.10, seed=4)
    return dataset, mastery, plan
