from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from neuropipe import cli
from test_ensemble import synthetic_table


class TestRunAndStatus:
    def test_run_then_status_and_resume(self, tmp_path, demo_dataset, capsys):
        workspace = tmp_path / "ws"
        exit_code = cli.main(
            [
                "run",
                "--prompt",
                "Classify AD using sMRI volumes",
                "--data-root",
                str(demo_dataset),
                "--workspace",
                str(workspace),
                "--mock",
            ]
        )
        assert exit_code == 0
        workflow_id = next(workspace.glob("wf-*")).name

        assert cli.main(["status", workflow_id, "--workspace", str(workspace)]) == 0
        out = capsys.readouterr().out
        assert "phase=DONE" in out

        assert cli.main(["resume", workflow_id, "--workspace", str(workspace)]) == 0

    def test_unparseable_prompt_exits_1(self, tmp_path, demo_dataset):
        exit_code = cli.main(
            [
                "run",
                "--prompt",
                "hello world",
                "--data-root",
                str(demo_dataset),
                "--workspace",
                str(tmp_path / "ws"),
                "--mock",
            ]
        )
        assert exit_code == 1

    def test_halted_run_exits_1(self, tmp_path, demo_dataset):
        config = tmp_path / "c.json"
        config.write_text(
            json.dumps({"mock": True, "mock_overrides": {"gtmseg": {"omit_outputs": True}}})
        )
        exit_code = cli.main(
            [
                "run",
                "--prompt",
                "Classify AD using sMRI volumes",
                "--data-root",
                str(demo_dataset),
                "--workspace",
                str(tmp_path / "ws"),
                "--config",
                str(config),
            ]
        )
        assert exit_code == 1

    def test_status_unknown_workflow(self, tmp_path):
        assert cli.main(["status", "wf-ghost", "--workspace", str(tmp_path)]) == 1


class TestBenchCommand:
    def test_intent_suite_exit_zero(self, tmp_path, capsys):
        exit_code = cli.main(["bench", "intent", "--out", str(tmp_path / "r")])
        assert exit_code == 0
        out = capsys.readouterr().out
        assert "JointEM=100.0%" in out
        assert (tmp_path / "r" / "report.json").exists()
        assert (tmp_path / "r" / "summary.csv").exists()

    def test_preproc_suite_exit_zero(self, tmp_path):
        assert cli.main(["bench", "preproc", "--out", str(tmp_path / "r")]) == 0

    def test_integration_suite_exit_zero(self, tmp_path):
        assert cli.main(["bench", "integration", "--out", str(tmp_path / "r")]) == 0


class TestStatsCommand:
    def test_stats_outputs(self, tmp_path):
        labels_csv = tmp_path / "labels.csv"
        features_csv = tmp_path / "features.csv"
        rng = np.random.default_rng(1)
        with labels_csv.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["SubjectID", "RefDate", "Diagnosis", "Age", "Sex"])
            for i in range(40):
                dx = "AD" if i % 2 else "CN"
                writer.writerow([f"S{i:03d}", "2020-06-15", dx, 65 + i % 20, "F" if i % 3 else "M"])
        with features_csv.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["SubjectID", "Date", "thickness"])
            for i in range(40):
                writer.writerow([f"S{i:03d}", "2020-06-20", round(2.5 + rng.normal(0, 0.2), 4)])
        exit_code = cli.main(
            [
                "stats",
                "--labels",
                str(labels_csv),
                "--features",
                str(features_csv),
                "--formula",
                "y ~ age + sex + diagnosis",
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert exit_code == 0
        report = (tmp_path / "out" / "stats_report.csv").read_text()
        assert report.startswith("feature,term,beta,se,t,p,p_fdr")
        assert (tmp_path / "out" / "thickness.scatter_fit.json").exists()
        assert (tmp_path / "out" / "thickness.group_box.svg").exists()


class TestStackCommand:
    def test_stack_writes_metrics(self, tmp_path):
        table = synthetic_table(n=80, seed=2)
        logits_csv = tmp_path / "logits.csv"
        with logits_csv.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "label"] + table.columns)
            for i, subject in enumerate(table.subject_ids):
                cells = [
                    "" if np.isnan(v) else f"{v:.6f}" for v in table.matrix[i]
                ]
                writer.writerow([subject, int(table.labels[i])] + cells)
        exit_code = cli.main(
            [
                "stack",
                "--logits",
                str(logits_csv),
                "--config",
                "smri_pet",
                "--seed",
                "3",
                "--out",
                str(tmp_path / "metrics.csv"),
            ]
        )
        assert exit_code == 0
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header == "Model,Fold,Accuracy,Precision,Recall,F1-Score,AUC,MCC"

    def test_unknown_config_token_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["stack", "--logits", "x.csv", "--config", "bogus", "--out", "y.csv"])
        assert excinfo.value.code == 2


class TestDemoData:
    def test_demo_data_written(self, tmp_path):
        assert cli.main(["demo-data", "--out", str(tmp_path / "d"), "--subjects", "2"]) == 0
        assert len(list((tmp_path / "d").glob("sub-*"))) == 2

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["not-a-command"])
        assert excinfo.value.code == 2
