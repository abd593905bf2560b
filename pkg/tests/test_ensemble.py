from __future__ import annotations

import csv
import math
import random

import numpy as np
import pytest

from neuropipe.ensemble import (
    EnsembleError,
    LogitTable,
    StackerModel,
    auc_score,
    average_logits,
    compute_metrics,
    grad_check,
    impute_neutral,
    logistic,
    mcc_score,
    oversample_training,
    run_configuration,
    stratified_kfold,
    train_stacker,
    write_metrics_csv,
)
from oracles import auc_allpairs, mcc_direct


def synthetic_table(
    n=300, seed=9, missing_fraction=0.25, signal=(1.6, 1.2)
) -> LogitTable:
    """Two modalities (3 sources each) carrying independent noisy copies of the
    label signal; a seeded fraction of subjects misses the second modality."""
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < 0.35).astype(int)
    sign = 2.0 * labels - 1.0
    columns = [f"smri.{s}" for s in ("resnet18", "densenet121", "efficientnet_b0")] + [
        f"pet.{s}" for s in ("resnet18", "densenet121", "efficientnet_b0")
    ]
    matrix = np.empty((n, 6))
    base_a = sign * signal[0] + rng.normal(scale=1.0, size=n)
    base_b = sign * signal[1] + rng.normal(scale=1.0, size=n)
    for j in range(3):
        matrix[:, j] = base_a + rng.normal(scale=0.6, size=n)
        matrix[:, 3 + j] = base_b + rng.normal(scale=0.6, size=n)
    missing = rng.random(n) < missing_fraction
    matrix[missing, 3:] = np.nan
    return LogitTable(
        subject_ids=[f"S{i:04d}" for i in range(n)],
        labels=labels,
        columns=columns,
        matrix=matrix,
    )


class TestImputation:
    def test_missing_becomes_zero(self):
        matrix = np.array([[1.0, np.nan], [np.nan, -2.0]])
        imputed = impute_neutral(matrix)
        assert imputed.tolist() == [[1.0, 0.0], [0.0, -2.0]]

    def test_fully_present_unchanged(self):
        matrix = np.array([[0.5, -0.5]])
        assert impute_neutral(matrix).tolist() == [[0.5, -0.5]]

    def test_neutral_is_probability_half(self):
        assert logistic(np.array([0.0]))[0] == 0.5


class TestAveraging:
    def test_mean_of_opposites_is_neutral(self):
        fused = average_logits(np.array([[1.0, -1.0]]))
        assert fused[0] == 0.0
        assert logistic(fused)[0] == 0.5

    def test_single_column_identity(self):
        fused = average_logits(np.array([[0.7], [-0.2]]))
        assert fused.tolist() == [0.7, -0.2]

    def test_three_column_mean(self):
        fused = average_logits(np.array([[0.2, 0.4, 0.6]]))
        assert fused[0] == pytest.approx(0.4)

    def test_shift_linearity(self):
        rng = np.random.default_rng(3)
        matrix = rng.normal(size=(20, 4))
        shift = 0.9
        base = average_logits(matrix)
        shifted = average_logits(matrix + shift)
        assert shifted == pytest.approx(base + shift, abs=1e-12)


class TestStratifiedFolds:
    def test_four_positives_over_five_folds(self):
        labels = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
        assignment = stratified_kfold(labels, k=5, seed=0)
        counts = [int((labels[assignment.folds == f] == 1).sum()) for f in range(5)]
        assert sorted(counts) == [0, 1, 1, 1, 1]
        assert sum(counts) == 4

    def test_balanced_100(self):
        labels = np.array([1] * 50 + [0] * 50)
        assignment = stratified_kfold(labels, k=5, seed=1)
        for fold in range(5):
            fold_labels = labels[assignment.folds == fold]
            assert (fold_labels == 1).sum() == 10
            assert (fold_labels == 0).sum() == 10

    def test_same_seed_identical(self):
        labels = (np.random.default_rng(5).random(57) < 0.3).astype(int)
        a = stratified_kfold(labels, seed=11)
        b = stratified_kfold(labels, seed=11)
        assert a.folds.tolist() == b.folds.tolist()

    def test_every_subject_in_exactly_one_fold(self):
        labels = (np.random.default_rng(6).random(83) < 0.4).astype(int)
        assignment = stratified_kfold(labels, seed=2)
        assert np.all(assignment.folds >= 0) and np.all(assignment.folds < 5)

    def test_within_one_of_perfect_stratification(self):
        rng = np.random.default_rng(12)
        for trial in range(10):
            labels = (rng.random(rng.integers(20, 200)) < rng.uniform(0.1, 0.9)).astype(int)
            assignment = stratified_kfold(labels, seed=trial)
            for value in (0, 1):
                counts = [
                    int((labels[assignment.folds == f] == value).sum()) for f in range(5)
                ]
                assert max(counts) - min(counts) <= 1


class TestOversampling:
    def test_90_10_becomes_90_90(self):
        labels = np.array([0] * 90 + [1] * 10)
        train = np.arange(100)
        sampled = oversample_training(labels, train, seed=0)
        assert int((labels[sampled] == 0).sum()) == 90
        assert int((labels[sampled] == 1).sum()) == 90

    def test_balanced_unchanged(self):
        labels = np.array([0, 1, 0, 1])
        sampled = oversample_training(labels, np.arange(4), seed=0)
        assert sorted(sampled.tolist()) == [0, 1, 2, 3]

    def test_test_fold_untouched(self):
        labels = (np.random.default_rng(4).random(60) < 0.2).astype(int)
        assignment = stratified_kfold(labels, seed=4)
        train, test = assignment.train_test(0)
        before = test.tolist()
        sampled = oversample_training(labels, train, seed=4)
        assert test.tolist() == before
        assert not set(sampled) & set(test)


class TestStacker:
    def test_architecture_enforced(self):
        with pytest.raises(EnsembleError):
            StackerModel(d_in=6, hidden=(16,))  # type: ignore[arg-type]
        with pytest.raises(EnsembleError):
            StackerModel(d_in=0)

    def test_parameter_shapes(self):
        model = StackerModel(d_in=8, seed=0)
        assert [w.shape for w in model.weights] == [(8, 16), (16, 8), (8, 1)]
        assert [b.shape for b in model.biases] == [(16,), (8,), (1,)]

    def test_zero_weights_on_zero_inputs_gives_half(self):
        model = StackerModel(d_in=3, seed=0)
        for w in model.weights:
            w[:] = 0.0
        probs = model.predict(np.zeros((4, 3)))
        assert probs == pytest.approx([0.5] * 4)

    def test_seeded_init_bounds_and_determinism(self):
        a = StackerModel(d_in=6, seed=7)
        b = StackerModel(d_in=6, seed=7)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        bound = math.sqrt(6.0 / (6 + 16))
        assert np.all(np.abs(a.weights[0]) <= bound)

    def test_grad_check_random_model(self):
        rng = np.random.default_rng(21)
        model = StackerModel(d_in=6, seed=21)
        X = rng.normal(size=(16, 6))
        y = (rng.random(16) < 0.5).astype(float)
        assert grad_check(model, X, y) < 1e-4

    def test_training_reduces_loss_deterministically(self):
        table = synthetic_table(n=120, seed=2)
        X = impute_neutral(table.matrix)
        y = table.labels.astype(float)
        before = StackerModel(d_in=6, seed=3).loss(X, y)
        first = train_stacker(X, y, seed=3, epochs=200)
        second = train_stacker(X, y, seed=3, epochs=200)
        assert first.loss(X, y) < before
        for wa, wb in zip(first.weights, second.weights):
            assert np.array_equal(wa, wb)

    def test_nonfinite_loss_aborts(self):
        X = np.random.default_rng(0).normal(size=(8, 3)) * 10
        y = np.array([0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(EnsembleError):
                train_stacker(X, y, seed=0, epochs=100, learning_rate=1e308)


class TestMetrics:
    def test_perfect_separation(self):
        metrics = compute_metrics(np.array([0.9, 0.8, 0.3, 0.2]), np.array([1, 1, 0, 0]))
        assert metrics["AUC"] == 1.0
        assert metrics["MCC"] == 1.0
        assert metrics["F1-Score"] == 1.0
        assert metrics["Accuracy"] == 1.0

    def test_closed_form_mcc_case(self):
        # TP=6 FP=2 FN=1 TN=3 -> 16/sqrt(1120)
        assert mcc_score(6, 2, 1, 3) == pytest.approx(16 / math.sqrt(1120))
        assert mcc_score(6, 2, 1, 3) == pytest.approx(0.47809144373375745)
        assert mcc_direct(6, 2, 1, 3) == pytest.approx(mcc_score(6, 2, 1, 3))

    def test_all_one_class_predictions_zero_conventions(self):
        probabilities = np.array([0.1, 0.2, 0.3, 0.4])
        labels = np.array([0, 1, 0, 1])
        metrics = compute_metrics(probabilities, labels)
        assert metrics["Precision"] == 0.0
        assert metrics["Recall"] == 0.0
        assert metrics["F1-Score"] == 0.0
        assert metrics["MCC"] == 0.0

    def test_auc_matches_allpairs_with_ties(self):
        rng = random.Random(17)
        for _ in range(50):
            n = rng.randint(4, 40)
            scores = [rng.choice([0.1, 0.3, 0.5, 0.7, 0.9]) for _ in range(n)]
            labels = [rng.randint(0, 1) for _ in range(n)]
            if len(set(labels)) < 2:
                labels[0], labels[-1] = 0, 1
            assert auc_score(np.array(scores), np.array(labels)) == pytest.approx(
                auc_allpairs(scores, labels), abs=1e-12
            )

    def test_auc_rank_invariance(self):
        rng = np.random.default_rng(23)
        scores = rng.random(60)
        labels = (rng.random(60) < 0.4).astype(int)
        base = auc_score(scores, labels)
        for transform in (lambda s: 2 * s + 1, np.exp, lambda s: s**3 + 5):
            assert auc_score(transform(scores), labels) == pytest.approx(base, abs=1e-12)

    def test_mcc_inversion(self):
        probabilities = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([1, 1, 0, 0])
        perfect = compute_metrics(probabilities, labels)["MCC"]
        inverted = compute_metrics(1 - probabilities, labels)["MCC"]
        assert perfect == 1.0 and inverted == -1.0


class TestRunConfiguration:
    def test_no_subject_leaks_across_folds(self):
        table = synthetic_table(n=100, seed=5)
        assignment = stratified_kfold(table.labels, seed=5)
        for fold in range(5):
            train, test = assignment.train_test(fold)
            assert not set(train) & set(test)
            assert len(set(train) | set(test)) == 100

    def test_smri_pet_reports(self):
        table = synthetic_table(n=150, seed=6)
        reports = run_configuration(table, "smri_pet", seed=6, epochs=150)
        assert set(reports) == {"resnet18", "densenet121", "efficientnet_b0", "stacker"}
        for report in reports.values():
            assert len(report.per_fold) == 5
            for column in ("Accuracy", "AUC", "MCC"):
                fold_values = [fold[column] for fold in report.per_fold]
                assert report.averaged[column] == pytest.approx(np.mean(fold_values))

    def test_fusion_beats_single_modalities(self):
        # the Table 11 > Table 8 ordering analog on a synthetic cohort
        table = synthetic_table(n=400, seed=31)
        reports = run_configuration(table, "smri_pet", seed=31, epochs=400)
        stacker_auc = reports["stacker"].averaged["AUC"]
        features = impute_neutral(table.matrix)
        assignment = stratified_kfold(table.labels, seed=31)
        single_aucs = []
        for prefix in ("smri.", "pet."):
            indices = [i for i, c in enumerate(table.columns) if c.startswith(prefix)]
            per_fold = []
            for fold in range(5):
                _, test = assignment.train_test(fold)
                fused = average_logits(features[test], indices)
                per_fold.append(auc_score(logistic(fused), table.labels[test]))
            single_aucs.append(float(np.mean(per_fold)))
        assert stacker_auc >= max(single_aucs) - 0.01

    def test_wrong_column_count_rejected(self):
        table = synthetic_table(n=50, seed=1)
        with pytest.raises(EnsembleError):
            run_configuration(table, "four", seed=1)

    def test_intersection_cohort_smaller(self):
        table = synthetic_table(n=80, seed=3, missing_fraction=0.4)
        union = run_configuration(table, "smri_pet", seed=3, epochs=50, cohort="UNION")
        inter = run_configuration(table, "smri_pet", seed=3, epochs=50, cohort="INTERSECTION")
        assert union["stacker"].per_fold and inter["stacker"].per_fold


class TestCsvInterfaces:
    def test_logit_csv_round_trip(self, tmp_path):
        path = tmp_path / "logits.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "label", "smri.resnet18", "pet.resnet18"])
            writer.writerow(["S1", "1", "0.5", ""])
            writer.writerow(["S2", "0", "-0.25", "0.75"])
        table = LogitTable.from_csv(path)
        assert table.subject_ids == ["S1", "S2"]
        assert math.isnan(table.matrix[0, 1])
        assert table.matrix[1, 1] == 0.75

    def test_metrics_csv_has_avg_rows_in_table_order(self, tmp_path):
        table = synthetic_table(n=60, seed=8)
        reports = run_configuration(table, "smri", seed=8, epochs=50)
        out = tmp_path / "metrics.csv"
        write_metrics_csv(reports, out)
        lines = out.read_text().splitlines()
        assert lines[0] == "Model,Fold,Accuracy,Precision,Recall,F1-Score,AUC,MCC"
        assert any(",AVG," in line for line in lines[1:])

    def test_every_subject_needs_a_logit(self):
        with pytest.raises(EnsembleError):
            LogitTable(
                subject_ids=["S1"],
                labels=np.array([1]),
                columns=["smri.resnet18"],
                matrix=np.array([[np.nan]]),
            )
