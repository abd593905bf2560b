from __future__ import annotations

import json
import time

import pytest
from fastapi.testclient import TestClient

from neuropipe.config import RunConfig
from neuropipe.gateway import create_app

SMRI_PROMPT = "Classify AD using sMRI volumes"


@pytest.fixture()
def client(tmp_path):
    app = create_app(tmp_path / "ws", RunConfig(mock=True))
    with TestClient(app) as test_client:
        test_client.workspace = tmp_path / "ws"
        yield test_client


def wait_for_phase(client, workflow_id: str, wanted: set[str], timeout: float = 60.0) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        record = client.get(f"/api/v1/workflows/{workflow_id}").json()
        if record.get("phase") in wanted:
            return record
        time.sleep(0.1)
    raise AssertionError(f"workflow {workflow_id} never reached {wanted}")


def wait_for_pending_approval(client, timeout: float = 60.0) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        approvals = client.get("/api/v1/approvals?status=pending").json()
        if approvals:
            return approvals[0]
        time.sleep(0.1)
    raise AssertionError("no pending approval appeared")


class TestWorkflowLifecycle:
    def test_submit_creates_registry_and_completes(self, client, demo_dataset):
        response = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        )
        assert response.status_code == 201
        workflow_id = response.json()["workflow_id"]
        assert (client.workspace / workflow_id / "registry.json").exists()
        record = wait_for_phase(client, workflow_id, {"DONE", "HALTED"})
        assert record["phase"] == "DONE"

    def test_bad_prompt_is_400(self, client, demo_dataset):
        response = client.post(
            "/api/v1/workflows", json={"prompt": "hello world", "data_root": str(demo_dataset)}
        )
        assert response.status_code == 400
        assert response.json()["code"] == "intent_invalid"

    def test_unknown_workflow_404(self, client):
        assert client.get("/api/v1/workflows/wf-none").status_code == 404

    def test_list_workflows_summaries(self, client, demo_dataset):
        response = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        )
        workflow_id = response.json()["workflow_id"]
        wait_for_phase(client, workflow_id, {"DONE"})
        listing = client.get("/api/v1/workflows").json()
        entry = next(e for e in listing if e["workflow_id"] == workflow_id)
        assert entry["steps_completed"] == entry["steps_total"]

    def test_get_matches_file_exactly(self, client, demo_dataset):
        response = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        )
        workflow_id = response.json()["workflow_id"]
        wait_for_phase(client, workflow_id, {"DONE"})
        api_view = client.get(f"/api/v1/workflows/{workflow_id}").json()
        file_view = json.loads(
            (client.workspace / workflow_id / "registry.json").read_text()
        )
        assert api_view == file_view

    def test_graph_endpoint(self, client, demo_dataset):
        workflow_id = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        ).json()["workflow_id"]
        wait_for_phase(client, workflow_id, {"DONE"})
        graph = client.get(f"/api/v1/workflows/{workflow_id}/graph").json()
        assert any(n["step_id"] == "integrate.manifest" for n in graph["nodes"])


class TestEvents:
    def test_long_poll_sees_every_event_exactly_once(self, client, demo_dataset):
        workflow_id = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        ).json()["workflow_id"]
        cursor = 0
        collected = []
        deadline = time.monotonic() + 60
        while time.monotonic() < deadline:
            body = client.get(
                f"/api/v1/workflows/{workflow_id}/events",
                params={"since": cursor, "timeout": 1.0},
            ).json()
            for event in body["events"]:
                collected.append(event)
                cursor = event["seq"]
            record = client.get(f"/api/v1/workflows/{workflow_id}").json()
            if record["phase"] in ("DONE", "HALTED") and not body["events"]:
                break
        seqs = [e["seq"] for e in collected]
        assert seqs == sorted(seqs)
        assert len(seqs) == len(set(seqs))
        file_events = [
            json.loads(line)
            for line in (client.workspace / workflow_id / "events.jsonl")
            .read_text()
            .splitlines()
            if line
        ]
        assert seqs == [e["seq"] for e in file_events]
        assert collected[-1]["kind"] == "PHASE_CHANGE"
        assert collected[-1]["payload"]["phase"] == "DONE"


class TestApprovals:
    def test_escalation_approve_reaches_done(self, client, demo_dataset):
        workflow_id = client.post(
            "/api/v1/workflows",
            json={
                "prompt": SMRI_PROMPT,
                "data_root": str(demo_dataset),
                "config": {"mock_overrides": {"gtmseg": {"omit_outputs": True}}},
            },
        ).json()["workflow_id"]
        approval = wait_for_pending_approval(client)
        assert approval["step_id"] == "smri.gtmseg"
        decision = client.post(
            f"/api/v1/approvals/{approval['approval_id']}",
            json={"decision": "approve", "note": "desk check ok"},
        )
        assert decision.status_code == 200
        record = wait_for_phase(client, workflow_id, {"DONE"})
        assert record["steps"]["smri.gtmseg"]["status"] == "COMPLETED"

    def test_double_decision_409(self, client, demo_dataset):
        client.post(
            "/api/v1/workflows",
            json={
                "prompt": SMRI_PROMPT,
                "data_root": str(demo_dataset),
                "config": {"mock_overrides": {"gtmseg": {"omit_outputs": True}}},
            },
        )
        approval = wait_for_pending_approval(client)
        first = client.post(
            f"/api/v1/approvals/{approval['approval_id']}", json={"decision": "approve"}
        )
        assert first.status_code == 200
        second = client.post(
            f"/api/v1/approvals/{approval['approval_id']}", json={"decision": "reject"}
        )
        assert second.status_code == 409

    def test_unknown_approval_404(self, client):
        response = client.post("/api/v1/approvals/ap-none", json={"decision": "approve"})
        assert response.status_code == 404

    def test_bad_decision_token_400(self, client):
        response = client.post("/api/v1/approvals/ap-x", json={"decision": "maybe"})
        assert response.status_code == 400


class TestArtifacts:
    def test_serves_workflow_file(self, client, demo_dataset):
        workflow_id = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        ).json()["workflow_id"]
        wait_for_phase(client, workflow_id, {"DONE"})
        response = client.get(
            f"/api/v1/workflows/{workflow_id}/artifacts/integrate.manifest/out/final_data_list.csv"
        )
        assert response.status_code == 200
        assert response.text.startswith("SubjectID,Date,")

    def test_traversal_rejected(self, client, demo_dataset):
        workflow_id = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        ).json()["workflow_id"]
        wait_for_phase(client, workflow_id, {"DONE"})
        for attack in ("../registry.json", "a/../../x", "..%2F..%2Fetc"):
            response = client.get(
                f"/api/v1/workflows/{workflow_id}/artifacts/{attack}"
            )
            assert response.status_code in (400, 404)
            if response.status_code == 400:
                assert response.json()["code"] == "bad_path"


class TestResumeEndpoint:
    def test_resume_completed_workflow(self, client, demo_dataset):
        workflow_id = client.post(
            "/api/v1/workflows", json={"prompt": SMRI_PROMPT, "data_root": str(demo_dataset)}
        ).json()["workflow_id"]
        wait_for_phase(client, workflow_id, {"DONE"})
        response = client.post(f"/api/v1/workflows/{workflow_id}/resume")
        assert response.status_code == 200
        body = response.json()
        assert body["resumed"] is True
        assert len(body["skipped"]) == 6  # all steps already complete

    def test_resume_unknown_404(self, client):
        assert client.post("/api/v1/workflows/wf-ghost/resume").status_code == 404
