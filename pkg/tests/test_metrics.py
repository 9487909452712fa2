import numpy as np
import pytest

from semcl.errors import ProtocolError
from semcl.matching import SelectionRecord
from semcl.metrics import (
    AccuracyMatrix,
    avg_acc,
    export,
    forgetting,
    last_acc,
    selection_accuracy,
    selection_matrix,
)


def worked_matrix():
    """The two-task hand example: a[1][1]=0.9, a[2][1]=0.8, a[2][2]=0.7."""
    matrix = AccuracyMatrix(num_tasks=2, test_sizes={1: 10, 2: 10})
    matrix.add_session(1, {1: 0.9})
    matrix.add_session(2, {1: 0.8, 2: 0.7})
    return matrix


class TestLastAcc:
    def test_single_task(self):
        matrix = AccuracyMatrix(num_tasks=1, test_sizes={1: 10})
        matrix.add_session(1, {1: 0.9})
        assert last_acc(matrix) == pytest.approx(0.9)

    def test_equal_sizes_weighted_mean(self):
        assert last_acc(worked_matrix()) == pytest.approx(0.75)

    def test_sample_weighting(self):
        matrix = AccuracyMatrix(num_tasks=2, test_sizes={1: 30, 2: 10})
        matrix.add_session(1, {1: 0.9})
        matrix.add_session(2, {1: 0.8, 2: 0.4})
        assert last_acc(matrix) == pytest.approx((0.8 * 30 + 0.4 * 10) / 40)

    def test_incomplete_rejected(self):
        matrix = AccuracyMatrix(num_tasks=2, test_sizes={1: 10, 2: 10})
        matrix.add_session(1, {1: 0.9})
        with pytest.raises(ProtocolError):
            last_acc(matrix)


class TestAvgAcc:
    def test_worked_example(self):
        # sessions: 0.9 then (0.8+0.7)/2 = 0.75 -> mean 0.825
        assert avg_acc(worked_matrix()) == pytest.approx(0.825)

    def test_constant_matrix(self):
        matrix = AccuracyMatrix(num_tasks=3, test_sizes={1: 5, 2: 5, 3: 5})
        for t in range(1, 4):
            matrix.add_session(t, {i: 0.6 for i in range(1, t + 1)})
        assert avg_acc(matrix) == pytest.approx(0.6)

    def test_single_task_equals_last(self):
        matrix = AccuracyMatrix(num_tasks=1, test_sizes={1: 10})
        matrix.add_session(1, {1: 0.42})
        assert avg_acc(matrix) == last_acc(matrix)


class TestForgetting:
    def test_no_degradation_is_zero(self):
        matrix = AccuracyMatrix(num_tasks=3, test_sizes={1: 5, 2: 5, 3: 5})
        for t in range(1, 4):
            matrix.add_session(t, {i: 0.8 for i in range(1, t + 1)})
        assert forgetting(matrix) == 0.0

    def test_worked_example(self):
        assert forgetting(worked_matrix()) == pytest.approx(0.1)

    def test_uses_best_earlier_accuracy(self):
        matrix = AccuracyMatrix(num_tasks=3, test_sizes={1: 5, 2: 5, 3: 5})
        matrix.add_session(1, {1: 0.7})
        matrix.add_session(2, {1: 0.9, 2: 0.6})
        matrix.add_session(3, {1: 0.5, 2: 0.6, 3: 0.8})
        # task 1: max(0.7, 0.9) - 0.5 = 0.4; task 2: 0.6 - 0.6 = 0
        assert forgetting(matrix) == pytest.approx(0.2)

    def test_improvement_never_negative_contribution(self):
        matrix = AccuracyMatrix(num_tasks=2, test_sizes={1: 5, 2: 5})
        matrix.add_session(1, {1: 0.6})
        matrix.add_session(2, {1: 0.9, 2: 0.5})
        assert forgetting(matrix) == pytest.approx(-0.3)  # backward transfer shows as negative

    def test_single_task_undefined(self):
        matrix = AccuracyMatrix(num_tasks=1, test_sizes={1: 10})
        matrix.add_session(1, {1: 0.9})
        with pytest.raises(ProtocolError):
            forgetting(matrix)


def record(true_task, chosen, query_id=0):
    return SelectionRecord(
        p1=chosen, p2=chosen, p3=chosen, chosen=chosen,
        ground_truth_task=true_task, query_id=query_id,
    )


class TestSelectionMatrix:
    def test_perfect_selection_is_identity(self):
        records = [record(t, t, i) for i, t in enumerate([1, 1, 2, 2, 3, 3])]
        sel = selection_matrix(records, num_tasks=3)
        np.testing.assert_array_equal(sel.values, np.eye(3))
        assert sel.diagonal_mass() == 1.0

    def test_everything_to_task_one(self):
        records = [record(t, 1, i) for i, t in enumerate([1, 2, 3])]
        sel = selection_matrix(records, num_tasks=3)
        np.testing.assert_array_equal(sel.values[:, 0], np.ones(3))
        assert sel.values[:, 1:].sum() == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(3)
        records = []
        counts = np.zeros((4, 4))
        for i in range(200):
            true = int(rng.integers(1, 5))
            chosen = int(rng.integers(1, 5))
            counts[true - 1, chosen - 1] += 1
            records.append(record(true, chosen, i))
        sel = selection_matrix(records, num_tasks=4)
        np.testing.assert_allclose(
            sel.values, counts / counts.sum(axis=1, keepdims=True), atol=1e-12
        )
        assert sel.values.sum(axis=1) == pytest.approx(np.ones(4), abs=1e-9)
        hits = sum(1 for r in records if r.chosen == r.ground_truth_task)
        assert sel.diagonal_mass() == pytest.approx(hits / len(records), abs=1e-12)
        assert selection_accuracy(records) == pytest.approx(hits / len(records))

    def test_missing_ground_truth_rejected(self):
        bad = SelectionRecord(p1=1, p2=1, p3=1, chosen=1)
        with pytest.raises(ProtocolError):
            selection_matrix([bad], num_tasks=1)


class TestExport:
    def test_empty_run_writes_headers(self, tmp_path):
        files = export(tmp_path, matrix=None, records=None)
        metrics = (tmp_path / "metrics.csv").read_text().splitlines()
        assert metrics == ["session,last_acc_so_far,avg_acc_so_far,ff_so_far"]
        assert (tmp_path / "curve.csv").read_text().splitlines() == ["session,seen_accuracy"]
        assert len(files) == 3

    def test_curve_has_one_row_per_session(self, tmp_path):
        matrix = AccuracyMatrix(num_tasks=5, test_sizes={i: 4 for i in range(1, 6)})
        for t in range(1, 6):
            matrix.add_session(t, {i: 0.9 for i in range(1, t + 1)})
        export(tmp_path, matrix)
        lines = (tmp_path / "curve.csv").read_text().splitlines()
        assert len(lines) == 6  # header + 5 sessions

    def test_metrics_columns_match_worked_example(self, tmp_path):
        export(tmp_path, worked_matrix())
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[1].startswith("1,0.9,0.9,")
        session2 = lines[2].split(",")
        assert float(session2[1]) == pytest.approx(0.75)
        assert float(session2[2]) == pytest.approx(0.825)
        assert float(session2[3]) == pytest.approx(0.1)

    def test_reexport_is_byte_identical(self, tmp_path):
        records = [record(t, t, i) for i, t in enumerate([1, 1, 2, 2])]
        export(tmp_path / "a", worked_matrix(), records)
        export(tmp_path / "b", worked_matrix(), records)
        for name in ("metrics.csv", "curve.csv", "accuracy_matrix.csv", "selection_matrix.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_accuracy_matrix_round_trip(self, tmp_path):
        matrix = worked_matrix()
        text = matrix.to_csv()
        back = AccuracyMatrix.from_csv(text, matrix.test_sizes)
        assert back.rows == matrix.rows
        assert back.to_csv() == text
