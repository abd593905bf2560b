from __future__ import annotations

import datetime as _dt
import json
import random

import numpy as np
import pytest

from neuropipe.analysis import (
    AnalysisError,
    FeatureTable,
    LabelRow,
    RankDeficiencyError,
    bh_fdr,
    emit_figure_data,
    encode_design,
    group_age_regressions,
    match_visits,
    ols_fit,
    stats_report,
    t_cdf,
)
from oracles import bh_stepup_bruteforce, ols_gram, t_cdf_quad


def day(iso: str) -> _dt.date:
    return _dt.date.fromisoformat(iso)


class TestMatchVisits:
    def test_nearest_within_window(self):
        labels = [LabelRow("S1", day("2020-01-15"), "CN", 70.0, "F")]
        scans = [("S1", day("2020-01-20")), ("S1", day("2020-03-01"))]
        matched, unmatched = match_visits(labels, scans, 30)
        assert unmatched == []
        assert matched[0][1] == day("2020-01-20")
        assert matched[0][2] == 5

    def test_outside_window_unmatched(self):
        labels = [LabelRow("S1", day("2020-01-15"), "CN", 70.0, "F")]
        matched, unmatched = match_visits(labels, [("S1", day("2020-03-01"))], 30)
        assert matched == [] and len(unmatched) == 1

    def test_tie_prefers_earlier_scan(self):
        reference = day("2020-01-15")
        labels = [LabelRow("S1", reference, "CN", 70.0, "F")]
        scans = [("S1", day("2020-01-08")), ("S1", day("2020-01-22"))]
        matched, _ = match_visits(labels, scans, 30)
        # brute force over the two candidates under the stated rule
        best = min((abs((d - reference).days), d) for _, d in scans)[1]
        assert matched[0][1] == best == day("2020-01-08")

    def test_matching_optimality(self):
        rng = random.Random(5)
        labels, scans = [], []
        for i in range(40):
            subject = f"S{i}"
            reference = day("2020-06-15")
            labels.append(LabelRow(subject, reference, "CN", 70.0, "F"))
            for _ in range(rng.randint(0, 3)):
                offset = rng.randint(-90, 90)
                scans.append((subject, reference + _dt.timedelta(days=offset)))
        matched, unmatched = match_visits(labels, scans, 30)
        matched_subjects = {row.subject_id for row, _, _ in matched}
        for row in unmatched:
            in_window = [
                d for s, d in scans if s == row.subject_id
                and abs((d - row.reference_date).days) <= 30
            ]
            assert not in_window
            assert row.subject_id not in matched_subjects

    def test_window_must_be_positive(self):
        with pytest.raises(AnalysisError):
            match_visits([], [], 0)


class TestTCdf:
    def test_zero_is_exactly_half(self):
        for df in (1, 2, 10, 100):
            assert t_cdf(0.0, df) == 0.5

    def test_large_argument_saturates(self):
        assert t_cdf(1e6, 10) == pytest.approx(1.0, abs=1e-12)

    def test_frozen_quadrature_values(self):
        # frozen from the adaptive-quadrature oracle
        assert t_cdf(2.0, 10) == pytest.approx(0.9633059826146302, abs=1e-8)
        assert t_cdf(1.0, 5) == pytest.approx(0.8183912661754384, abs=1e-8)
        assert t_cdf(-2.5, 23) == pytest.approx(0.009997061163943666, abs=1e-8)

    def test_against_quadrature_grid(self):
        for df in (1, 3, 8, 30, 120):
            for x in (-4.0, -1.5, -0.3, 0.7, 2.2, 5.0):
                assert t_cdf(x, df) == pytest.approx(t_cdf_quad(x, df), abs=1e-10)

    def test_symmetry(self):
        for x in (0.5, 1.7, 3.0):
            assert t_cdf(x, 7) + t_cdf(-x, 7) == pytest.approx(1.0, abs=1e-12)


class TestOls:
    def test_exact_fit_degenerate(self):
        x = np.arange(5, dtype=float)
        X = np.column_stack([np.ones(5), x])
        y = 1.0 + 2.0 * x
        result = ols_fit(X, y, terms=["Intercept", "x"])
        assert result.beta == pytest.approx([1.0, 2.0], abs=1e-10)
        assert result.r2 == pytest.approx(1.0)
        assert result.degenerate
        assert list(result.p) == [0.0, 0.0]

    def test_intercept_only_is_mean(self):
        y = np.array([3.0, 5.0, 7.0, 9.0])
        result = ols_fit(np.ones((4, 1)), y, terms=["Intercept"])
        assert result.beta[0] == pytest.approx(y.mean())

    def test_20_seeded_fixtures_match_gram_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(20):
            n, k = 50, 4
            X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
            beta_true = rng.normal(size=k)
            y = X @ beta_true + rng.normal(scale=0.7, size=n)
            mine = ols_fit(X, y)
            oracle = ols_gram(X, y)
            assert mine.beta == pytest.approx(oracle["beta"], abs=1e-8)
            assert mine.se == pytest.approx(oracle["se"], abs=1e-8)
            assert mine.t == pytest.approx(oracle["t"], abs=1e-8)
            assert mine.p == pytest.approx(oracle["p"], abs=1e-8)
            assert mine.r2 == pytest.approx(oracle["r2"], abs=1e-10)

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(7)
        X = np.column_stack([np.ones(30), rng.normal(size=(30, 3))])
        y = rng.normal(size=30)
        result = ols_fit(X, y)
        residuals = y - X @ result.beta
        assert np.max(np.abs(X.T @ residuals)) < 1e-8

    def test_scale_equivariance(self):
        rng = np.random.default_rng(8)
        X = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
        y = rng.normal(size=40)
        scale = 3.7
        base = ols_fit(X, y)
        scaled = ols_fit(X, scale * y)
        assert scaled.beta == pytest.approx(scale * base.beta, abs=1e-10)
        assert scaled.t == pytest.approx(base.t, abs=1e-10)
        assert scaled.p == pytest.approx(base.p, abs=1e-10)
        assert scaled.r2 == pytest.approx(base.r2, abs=1e-10)

    def test_rank_deficiency_names_columns(self):
        x = np.arange(10, dtype=float)
        X = np.column_stack([np.ones(10), x, 2 * x])
        with pytest.raises(RankDeficiencyError) as excinfo:
            ols_fit(X, np.ones(10), terms=["Intercept", "x", "x_copy"])
        assert excinfo.value.columns  # at least one collinear column named

    def test_n_must_exceed_k(self):
        with pytest.raises(AnalysisError):
            ols_fit(np.ones((3, 3)), np.ones(3))


class TestEncodeDesign:
    def test_reference_coding_and_term_names(self):
        records = [
            {"y": 1.0, "age": 70.0, "sex": "F", "diagnosis": "CN"},
            {"y": 2.0, "age": 71.0, "sex": "M", "diagnosis": "MCI"},
            {"y": 3.0, "age": 72.0, "sex": "M", "diagnosis": "AD"},
        ]
        X, y, names = encode_design(records, "y ~ age + sex + diagnosis")
        assert names == ["Intercept", "age", "sex[M]", "dx[MCI]", "dx[AD]"]
        assert X[:, 0].tolist() == [1.0, 1.0, 1.0]
        assert X[:, 2].tolist() == [0.0, 1.0, 1.0]  # M indicator, F reference
        assert X[:, 3].tolist() == [0.0, 1.0, 0.0]  # MCI
        assert X[:, 4].tolist() == [0.0, 0.0, 1.0]  # AD, CN reference

    def test_malformed_formula(self):
        with pytest.raises(AnalysisError):
            encode_design([], "no tilde here")


class TestBhFdr:
    def test_hand_executed_examples(self):
        assert bh_fdr([0.01, 0.02, 0.03, 0.04]).adjusted_p == pytest.approx(
            [0.04, 0.04, 0.04, 0.04]
        )
        assert bh_fdr([0.005, 0.5]).adjusted_p == pytest.approx([0.01, 0.5])
        assert bh_fdr([0.2]).adjusted_p == [0.2]

    def test_1000_random_vectors_match_bruteforce(self):
        rng = random.Random(314)
        for _ in range(1000):
            m = rng.randint(1, 12)
            p = [round(rng.random(), 6) for _ in range(m)]
            assert bh_fdr(p).adjusted_p == pytest.approx(bh_stepup_bruteforce(p), abs=1e-12)

    def test_monotone_and_dominating(self):
        rng = random.Random(77)
        for _ in range(100):
            p = sorted(round(rng.random(), 6) for _ in range(10))
            adjusted = bh_fdr(p).adjusted_p
            assert all(a >= r for a, r in zip(adjusted, p))
            assert all(adjusted[i] <= adjusted[i + 1] + 1e-15 for i in range(9))
            assert all(a <= 1.0 for a in adjusted)

    def test_stepup_not_idempotent_by_construction(self):
        # The step-up procedure is not a fixed point of itself: re-adjusting
        # re-inflates non-plateau entries (min over j>=i of q[j]*m/(j+1)).
        once = bh_fdr([0.1, 0.5]).adjusted_p
        assert once == pytest.approx([0.2, 0.5])
        twice = bh_fdr(once).adjusted_p
        assert twice == pytest.approx([0.4, 0.5])
        assert twice == pytest.approx(bh_stepup_bruteforce(once), abs=1e-12)

    def test_method_tag(self):
        assert bh_fdr([0.5]).method == "benjamini-hochberg"


def synthetic_cohort(n_per_group=200, seed=42):
    """Known planted slopes: AD thickness declines with age, CN is flat."""
    rng = np.random.default_rng(seed)
    labels, features = [], FeatureTable(columns=["entorhinal"])
    slopes = {"CN": 0.0, "AD": -0.02}
    for diagnosis, slope in slopes.items():
        for i in range(n_per_group):
            subject = f"{diagnosis}{i:03d}"
            age = float(rng.uniform(60, 90))
            value = 3.2 + slope * age + float(rng.normal(scale=0.15))
            date = _dt.date(2020, 1, 1) + _dt.timedelta(days=int(rng.integers(0, 20)))
            labels.append(LabelRow(subject, date, diagnosis, age, "F" if i % 2 else "M"))
            features.rows[(subject, date.isoformat())] = {"entorhinal": value}
    return labels, features


class TestGroupRegressions:
    def test_planted_slopes_recovered(self):
        labels, features = synthetic_cohort()
        scans = [(s, _dt.date.fromisoformat(d)) for s, d in features.rows]
        matched, _ = match_visits(labels, scans, 30)
        fits = group_age_regressions(matched, features, "entorhinal")
        ad = fits["AD"].term("age")
        cn = fits["CN"].term("age")
        assert ad["beta"] < 0
        assert ad["p"] < 0.01
        assert abs(cn["beta"]) < abs(ad["beta"])

    def test_stats_report_fdr_column(self):
        labels, features = synthetic_cohort(n_per_group=60)
        rows, matched = stats_report(labels, features, "y ~ age + sex + diagnosis")
        assert matched
        assert all("p_fdr" in row for row in rows)
        dx_rows = [r for r in rows if r["term"] == "dx[AD]"]
        assert dx_rows and dx_rows[0]["p_fdr"] >= dx_rows[0]["p"] - 1e-15


class TestFigureData:
    def test_scatter_fit_json_and_svg(self, tmp_path):
        labels, features = synthetic_cohort(n_per_group=40)
        scans = [(s, _dt.date.fromisoformat(d)) for s, d in features.rows]
        matched, _ = match_visits(labels, scans, 30)
        json_path = emit_figure_data(matched, features, "entorhinal", "SCATTER_FIT", tmp_path)
        doc = json.loads(json_path.read_text())
        assert {g["name"] for g in doc["groups"]} == {"CN", "AD"}
        for group in doc["groups"]:
            assert {"slope", "intercept", "p"} <= set(group["fit"])
            assert group["summary"]["q1"] <= group["summary"]["median"] <= group["summary"]["q3"]
        svg = json_path.with_suffix(".svg").read_text()
        assert svg.startswith("<svg") and "circle" in svg

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(AnalysisError):
            emit_figure_data([], FeatureTable(columns=[]), "f", "PIE", tmp_path)
