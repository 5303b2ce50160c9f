import numpy as np
import pytest

from cdaudit.data import (ConfigError, InteractionRecord, ParseError,
                          QMatrix, SyntheticSpec, ValidationError,
                          generate_synthetic, load_dataset, load_split_plan,
                          make_dataset, partition_students, save_split_plan,
                          write_dataset)


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadDataset:
    def test_minimal_single_record(self, tmp_path):
        rec = _write(tmp_path, "r.csv", "student_id,question_id,response\n0,0,1\n")
        qm = _write(tmp_path, "q.csv", "question_id,kc_0\n0,1\n")
        ds = load_dataset(rec, qm)
        assert (ds.n_students, ds.n_questions, ds.n_kcs) == (1, 1, 1)

    def test_frcsub_shape_counts(self, tmp_path):
        spec = SyntheticSpec(536, 20, 8, seed=0)
        ds, _ = generate_synthetic(spec)
        write_dataset(ds, tmp_path / "r.csv", tmp_path / "q.csv")
        loaded = load_dataset(tmp_path / "r.csv", tmp_path / "q.csv")
        assert loaded.n_students == 536
        assert loaded.n_questions == 20
        assert loaded.n_kcs == 8
        assert len(loaded.records) == 10720

    def test_roundtrip_identity(self, tmp_path):
        ds, _ = generate_synthetic(SyntheticSpec(13, 7, 4, seed=5))
        write_dataset(ds, tmp_path / "r.csv", tmp_path / "q.csv")
        loaded = load_dataset(tmp_path / "r.csv", tmp_path / "q.csv")
        assert loaded.records == ds.records
        assert np.array_equal(loaded.q_matrix.entries, ds.q_matrix.entries)

    def test_bad_response_reports_line(self, tmp_path):
        rec = _write(tmp_path, "r.csv",
                     "student_id,question_id,response\n0,0,1\n1,0,2\n")
        qm = _write(tmp_path, "q.csv", "question_id,kc_0\n0,1\n")
        with pytest.raises(ParseError, match=r":3:"):
            load_dataset(rec, qm)

    def test_bad_header(self, tmp_path):
        rec = _write(tmp_path, "r.csv", "sid,qid,resp\n0,0,1\n")
        qm = _write(tmp_path, "q.csv", "question_id,kc_0\n0,1\n")
        with pytest.raises(ParseError, match="header"):
            load_dataset(rec, qm)

    def test_duplicate_pair_rejected(self, tmp_path):
        rec = _write(tmp_path, "r.csv",
                     "student_id,question_id,response\n0,0,1\n0,0,0\n")
        qm = _write(tmp_path, "q.csv", "question_id,kc_0\n0,1\n")
        with pytest.raises(ValidationError, match="duplicate"):
            load_dataset(rec, qm)

    def test_question_out_of_qmatrix_range(self, tmp_path):
        rec = _write(tmp_path, "r.csv", "student_id,question_id,response\n0,5,1\n")
        qm = _write(tmp_path, "q.csv", "question_id,kc_0\n0,1\n")
        with pytest.raises(ValidationError):
            load_dataset(rec, qm)


class TestQMatrix:
    def test_empty_row_rejected(self):
        with pytest.raises(ValidationError, match="row 1"):
            QMatrix(np.array([[1, 0], [0, 0]]))

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError):
            QMatrix(np.array([[2, 0]]))


class TestSynthetic:
    def test_noiseless_matches_mastery_conjunction(self):
        spec = SyntheticSpec(40, 12, 5, slip=0.0, guess=0.0, seed=9)
        ds, mastery = generate_synthetic(spec)
        q = ds.q_matrix.entries
        for rec in ds.records:
            needs = q[rec.question_id] == 1
            expected = int(mastery[rec.student_id][needs].all())
            assert rec.response == expected

    def test_deterministic(self):
        spec = SyntheticSpec(30, 10, 4, slip=0.2, guess=0.1, seed=77)
        a, ma = generate_synthetic(spec)
        b, mb = generate_synthetic(spec)
        assert a.records == b.records
        assert np.array_equal(ma, mb)

    def test_slip_rate_monte_carlo(self):
        # empirical correct-rate among mastery-satisfying pairs ~ 1 - slip
        spec = SyntheticSpec(200, 20, 8, slip=0.1, guess=0.2, seed=3)
        ds, mastery = generate_synthetic(spec)
        q = ds.q_matrix.entries
        hits = total = 0
        for rec in ds.records:
            needs = q[rec.question_id] == 1
            if mastery[rec.student_id][needs].all():
                total += 1
                hits += rec.response
        assert total > 300
        assert hits / total == pytest.approx(0.9, abs=0.03)

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(10, 5, 3, slip=1.5)
        with pytest.raises(ConfigError):
            SyntheticSpec(10, 5, 3, density=0.0)


class TestPartition:
    def test_frcsub_sizes(self):
        ds, _ = generate_synthetic(SyntheticSpec(536, 20, 8, seed=0))
        plan = partition_students(ds, 0.05, seed=1)
        assert len(plan.forget_students) == 27  # round(0.05 * 536)
        assert len(plan.nonmember_train_students) == 27
        assert len(plan.nonmember_eval_students) == 27
        assert len(plan.retain_students) == 536 - 3 * 27

    def test_infeasible_ratio(self):
        ds, _ = generate_synthetic(SyntheticSpec(100, 5, 3, seed=0))
        with pytest.raises(ConfigError):
            partition_students(ds, 0.40, seed=0)

    def test_ratio_selecting_nobody(self):
        ds, _ = generate_synthetic(SyntheticSpec(40, 5, 3, seed=0))
        with pytest.raises(ConfigError, match="no forget students"):
            partition_students(ds, 0.01, seed=0)

    def test_deterministic(self):
        ds, _ = generate_synthetic(SyntheticSpec(50, 10, 4, seed=2))
        a = partition_students(ds, 0.10, seed=8)
        b = partition_students(ds, 0.10, seed=8)
        assert a == b

    def test_disjoint_and_covering_over_seeds(self):
        ds, _ = generate_synthetic(SyntheticSpec(52, 8, 4, seed=6))
        n_records = len(ds.records)
        for seed in range(100):
            plan = partition_students(ds, 0.10, seed=seed)
            sets = [set(plan.retain_students), set(plan.forget_students),
                    set(plan.nonmember_train_students),
                    set(plan.nonmember_eval_students)]
            for i in range(4):
                for j in range(i + 1, 4):
                    assert not (sets[i] & sets[j])
            seen = []
            for parts in plan.per_student_splits.values():
                for part in parts:
                    seen.extend(part)
            assert sorted(seen) == list(range(n_records))

    def test_split_fractions_twenty_records(self):
        ds, _ = generate_synthetic(SyntheticSpec(20, 20, 4, seed=1))
        plan = partition_students(ds, 0.10, seed=0)
        for sid, (tr, va, te) in plan.per_student_splits.items():
            assert (len(tr), len(va), len(te)) == (14, 2, 4)

    def test_json_roundtrip(self, tmp_path):
        ds, _ = generate_synthetic(SyntheticSpec(30, 10, 4, seed=2))
        plan = partition_students(ds, 0.10, seed=5)
        save_split_plan(plan, tmp_path / "plan.json")
        loaded = load_split_plan(tmp_path / "plan.json")
        assert loaded == plan


def test_make_dataset_validates_ranges():
    qm = QMatrix(np.array([[1, 0], [1, 1]]))
    with pytest.raises(ValidationError):
        make_dataset([InteractionRecord(0, 0, 2)], qm)
    with pytest.raises(ValidationError):
        make_dataset([InteractionRecord(0, 7, 1)], qm)
