import numpy as np
import pytest
from sklearn.metrics import f1_score

from core.errors import AlignmentError, InputValidationError, ManifestParseError
from data.manifest import save_manifest
from data.models import DatasetManifest
from metrics.calculator import (
    au_average_f1,
    binarize_au,
    ccc,
    ccc_with_flag,
    challenge_scores,
    confusion_matrix,
    f1_per_class,
    macro_f1,
    total_accuracy,
)
from metrics.evaluator import (
    compute_report,
    evaluate,
    evaluate_frames,
    load_predictions,
    save_predictions,
    write_report,
)
from metrics.models import MetricsReport
from tests.helpers import labeled_records, make_record, predictions_from_labels


class TestChallengeScores:
    def test_published_score_arithmetic(self):
        s_va, s_expr, s_au = challenge_scores(0.28, 0.44, 0.40, 0.61, 0.40, 0.88)
        assert abs(s_va - 0.36) < 1e-9
        assert abs(s_expr - 0.4693) < 1e-9
        assert abs(s_au - 0.64) < 1e-9

    def test_missing_components(self):
        assert challenge_scores(expr_f1=0.5, expr_tacc=0.5) == (None, 0.5, None)

    def test_report_rejects_inconsistent_score(self):
        with pytest.raises(ValueError):
            MetricsReport(ccc_v=0.2, ccc_a=0.4, s_va=0.5)


class TestCCC:
    def test_examples(self):
        assert abs(ccc([0.1, 0.5, -0.3], [0.1, 0.5, -0.3]) - 1.0) < 1e-12
        assert abs(ccc([1, -1], [-1, 1]) + 1.0) < 1e-12
        assert abs(ccc([1, 2, 3, 4], [2, 3, 4, 5]) - 2.5 / 3.5) < 1e-12

    def test_symmetry_shift_and_scale(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=50)
        y = rng.normal(size=50)
        assert abs(ccc(x, y) - ccc(y, x)) < 1e-12
        assert ccc(x, x + 0.3) < 1.0
        assert abs(ccc(1000 * x, 1000 * x) - 1.0) < 1e-12

    def test_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(2, 30))
            assert abs(ccc(rng.normal(size=n), rng.normal(size=n))) <= 1.0 + 1e-9

    def test_degenerate_returns_zero_with_flag(self):
        assert ccc_with_flag([0.3, 0.3, 0.3], [0.3, 0.3, 0.3]) == (0.0, True)

    def test_errors(self):
        with pytest.raises(InputValidationError):
            ccc([1.0], [1.0])
        with pytest.raises(InputValidationError):
            ccc([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(InputValidationError):
            ccc([1.0, float("nan")], [1.0, 2.0])


class TestClassification:
    def test_confusion_matrix(self):
        assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=np.int64))
        single = confusion_matrix([5], [2], 7)
        assert single[2, 5] == 1 and single.sum() == 1

        rng = np.random.default_rng(2)
        true = rng.integers(0, 7, size=100)
        pred = rng.integers(0, 7, size=100)
        cm = confusion_matrix(pred, true, 7)
        assert cm.sum() == 100
        assert cm.sum(axis=1).tolist() == np.bincount(true, minlength=7).tolist()

    def test_confusion_matrix_out_of_range(self):
        with pytest.raises(InputValidationError):
            confusion_matrix([7], [0], 7)
        with pytest.raises(InputValidationError):
            confusion_matrix([0, 1], [0], 7)

    def test_two_class_hand_values(self):
        cm = np.array([[8, 2], [3, 7]])
        f1 = f1_per_class(cm)
        assert abs(f1[0] - 0.7619047619) < 1e-6
        assert abs(f1[1] - 0.7368421053) < 1e-6
        assert abs(macro_f1(cm) - (f1[0] + f1[1]) / 2) < 1e-12
        assert abs(macro_f1(cm) - 0.7494) < 1e-4

    def test_absent_class_excluded_from_macro_mean(self):
        cm = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
        assert macro_f1(cm) == 1.0

    def test_predicted_but_absent_class_counts_against_precision(self):
        cm = np.array([[1, 1], [0, 0]])
        assert abs(macro_f1(cm) - 2 * 1.0 * 0.5 / 1.5) < 1e-12

    def test_empty_matrix(self):
        with pytest.raises(InputValidationError):
            macro_f1(np.zeros((3, 3), dtype=np.int64))
        with pytest.raises(InputValidationError):
            f1_per_class(np.zeros((0, 0)))

    def test_total_accuracy(self):
        assert total_accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
        assert total_accuracy([1, 2], [1, 2]) == 1.0
        with pytest.raises(InputValidationError):
            total_accuracy([], [])

    def test_au_total_accuracy_counts_bits(self):
        true = np.ones((2, 12), dtype=np.int64)
        pred = true.copy()
        pred[0, :4] = 0
        assert total_accuracy(pred, true) == 20 / 24

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        true = rng.integers(0, 7, size=60)
        pred = rng.integers(0, 7, size=60)
        perm = rng.permutation(60)
        assert macro_f1(confusion_matrix(pred, true, 7)) == macro_f1(confusion_matrix(pred[perm], true[perm], 7))
        assert total_accuracy(pred, true) == total_accuracy(pred[perm], true[perm])


class TestAUF1:
    def test_perfect(self):
        bits = np.array([[1, 0, 1], [0, 1, 1]])
        assert au_average_f1(bits, bits) == 1.0

    def test_all_negative_column_counts_as_zero(self):
        bits = np.array([[1, 0], [1, 0]])
        assert au_average_f1(bits, bits) == 0.5

    def test_hand_counts(self):
        true = np.array([[1, 1], [1, 0], [0, 1], [0, 0]])
        pred = np.array([[1, 0], [0, 0], [1, 1], [0, 1]])
        # 第 0 列 tp=1 fp=1 fn=1 -> 0.5；第 1 列 tp=1 fp=1 fn=1 -> 0.5
        assert abs(au_average_f1(pred, true) - 0.5) < 1e-12

    def test_inverted_all_ones_column(self):
        assert au_average_f1(np.zeros((3, 1)), np.ones((3, 1))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(InputValidationError):
            au_average_f1(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_binarize_is_strictly_greater(self):
        assert binarize_au(np.array([0.5, 0.51, 0.2]), 0.5).tolist() == [0, 1, 0]


def oracle_ccc(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    denominator = vx + vy + (mx - my) ** 2
    return 0.0 if denominator < 1e-12 else 2 * cov / denominator


def oracle_f1(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def oracle_report(va_pred, va_true, expr_pred, expr_true, au_pred, au_true, threshold=0.5):
    n = len(va_true)
    s_va = 0.5 * oracle_ccc([p[0] for p in va_pred], [t[0] for t in va_true]) \
        + 0.5 * oracle_ccc([p[1] for p in va_pred], [t[1] for t in va_true])

    f1s = []
    for c in range(7):
        if c not in expr_true:
            continue
        tp = sum(1 for p, t in zip(expr_pred, expr_true) if p == c and t == c)
        fp = sum(1 for p, t in zip(expr_pred, expr_true) if p == c and t != c)
        fn = sum(1 for p, t in zip(expr_pred, expr_true) if p != c and t == c)
        f1s.append(oracle_f1(tp, fp, fn))
    expr_f1 = sum(f1s) / len(f1s)
    expr_tacc = sum(1 for p, t in zip(expr_pred, expr_true) if p == t) / n
    s_expr = 0.67 * expr_f1 + 0.33 * expr_tacc

    k = len(au_true[0])
    bits = [[1 if v > threshold else 0 for v in row] for row in au_pred]
    column_f1 = []
    correct = 0
    for j in range(k):
        tp = fp = fn = 0
        for i in range(n):
            p, t = bits[i][j], int(au_true[i][j])
            tp += p and t
            fp += p and not t
            fn += (not p) and t
            correct += p == t
        column_f1.append(oracle_f1(tp, fp, fn))
    s_au = 0.5 * sum(column_f1) / k + 0.5 * correct / (n * k)
    return s_va, s_expr, s_au, expr_f1


def test_report_matches_brute_force_oracle():
    rng = np.random.default_rng(20220318)
    for trial in range(1000):
        n = int(rng.integers(2, 501)) if trial % 10 == 0 else int(rng.integers(2, 60))
        va_true = rng.uniform(-1, 1, size=(n, 2))
        va_pred = np.clip(va_true + rng.normal(scale=0.5, size=(n, 2)), -1, 1)
        expr_true = rng.integers(0, 7, size=n)
        expr_pred = np.where(rng.random(n) < 0.5, expr_true, rng.integers(0, 7, size=n))
        au_true = (rng.random((n, 12)) < 0.3).astype(np.float64)
        au_pred = rng.random((n, 12))

        report = compute_report(va_pred, va_true, expr_pred, expr_true, au_pred, au_true)
        s_va, s_expr, s_au, expr_f1 = oracle_report(
            va_pred.tolist(), va_true.tolist(), expr_pred.tolist(), expr_true.tolist(),
            au_pred.tolist(), au_true.tolist(),
        )
        assert abs(report.s_va - s_va) < 1e-9
        assert abs(report.s_expr - s_expr) < 1e-9
        assert abs(report.s_au - s_au) < 1e-9
        if trial % 100 == 0:
            present = sorted(set(expr_true.tolist()))
            reference = f1_score(expr_true, expr_pred, labels=present, average="macro", zero_division=0)
            assert abs(report.expr_f1 - reference) < 1e-9
            assert abs(expr_f1 - reference) < 1e-9


def labels_manifest(n=20):
    return DatasetManifest(records=labeled_records(n))


class TestEvaluate:
    def test_predictions_equal_labels_give_maximal_scores(self):
        labels = labels_manifest()
        report = evaluate_frames(predictions_from_labels(labels), labels)
        assert abs(report.ccc_v - 1.0) < 1e-12 and abs(report.ccc_a - 1.0) < 1e-12
        assert report.expr_f1 == 1.0 and report.expr_tacc == 1.0
        assert report.au_af1 == 1.0 and report.au_tacc == 1.0
        for score in (report.s_va, report.s_expr, report.s_au):
            assert abs(score - 1.0) < 1e-12
        assert report.va_mse == 0.0
        assert report.absent_tasks == []

    def test_absent_task_is_flagged_not_zero(self):
        records = [make_record(f"s{i}", va=(0.1 * i, -0.1 * i), expr=i % 7) for i in range(5)]
        labels = DatasetManifest(records=records)
        report = evaluate_frames(predictions_from_labels(labels), labels)
        assert report.s_au is None and report.au_af1 is None
        assert report.absent_tasks == ["au"]
        assert "s_au=absent" in report.to_key_value()
        assert report.counts == {"va": 5, "expr": 5, "au": 0}

    def test_metrics_only_use_samples_with_labels(self):
        records = labeled_records(6)
        records.append(make_record("unlabeled_va", expr=1))
        labels = DatasetManifest(records=records)
        predictions = predictions_from_labels(labels)
        predictions.loc[predictions["id"] == "unlabeled_va", ["valence", "arousal"]] = [0.99, -0.99]
        report = evaluate_frames(predictions, labels)
        assert report.counts["va"] == 6
        assert abs(report.ccc_v - 1.0) < 1e-12

    def test_single_va_label_is_absent(self):
        labels = DatasetManifest(records=[make_record("a", va=(0.1, 0.2), expr=1), make_record("b", expr=2)])
        report = evaluate_frames(predictions_from_labels(labels), labels)
        assert report.s_va is None and "va" in report.absent_tasks

    def test_alignment_errors(self):
        labels = labels_manifest(5)
        predictions = predictions_from_labels(labels)
        with pytest.raises(AlignmentError):
            evaluate_frames(predictions.iloc[:4], labels)
        with pytest.raises(AlignmentError):
            evaluate_frames(predictions.assign(id=["x"] + predictions["id"].tolist()[1:]), labels)
        duplicated = predictions.copy()
        duplicated.loc[1, "id"] = duplicated.loc[0, "id"]
        with pytest.raises(AlignmentError):
            evaluate_frames(duplicated, labels)

    def test_prediction_order_does_not_matter(self):
        labels = labels_manifest(12)
        predictions = predictions_from_labels(labels)
        predictions["valence"] = predictions["valence"] * 0.5
        shuffled = predictions.sample(frac=1.0, random_state=0).reset_index(drop=True)
        assert evaluate_frames(predictions, labels) == evaluate_frames(shuffled, labels)

    def test_evaluate_files_and_write_report(self, tmp_path):
        labels = labels_manifest(10)
        labels_path = save_manifest(labels, tmp_path / "labels.csv")
        predictions_path = save_predictions(predictions_from_labels(labels), tmp_path / "predictions.csv")
        report = evaluate(predictions_path, labels_path)
        assert abs(report.s_expr - 1.0) < 1e-12

        text_path, kv_path = write_report(report, tmp_path / "out")
        assert text_path.read_text(encoding="utf-8") == report.to_text()
        assert "s_va=" in kv_path.read_text(encoding="utf-8")
        assert evaluate(predictions_path, labels_path) == report

    def test_bad_prediction_file(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,valence\na,0.1\n", encoding="utf-8")
        with pytest.raises(ManifestParseError):
            load_predictions(path)
        path.write_text("id,valence,arousal,expr_class,au_0\na,x,0.1,1,0.5\n", encoding="utf-8")
        with pytest.raises(ManifestParseError):
            load_predictions(path)
