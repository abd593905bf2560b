"""The persistent workflow registry: step status, timings, token cost, events,
and approvals. One JSON document per workflow plus an append-only JSON-lines
event log, both human-inspectable and atomically replaced on write.

All mutations funnel through one Registry instance per workflow (internal
lock); step workers share nothing but this channel.
"""
from __future__ import annotations

import datetime as _dt
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .planner import WorkflowIntent

SCHEMA_VERSION = 1

STEP_STATUSES = ("PENDING", "RUNNING", "COMPLETED", "FAILED", "AWAITING_APPROVAL", "SKIPPED")
PHASES = ("DISTRIBUTION", "PREPROCESSING", "INTEGRATION", "TASK", "DONE", "HALTED")
EVENT_KINDS = (
    "PHASE_CHANGE",
    "STEP_START",
    "STEP_RETRY",
    "STEP_DONE",
    "STEP_FAIL",
    "VALIDATION_FAIL",
    "APPROVAL_REQUESTED",
    "APPROVAL_DECIDED",
    "NOTE",
)


class RegistryError(Exception):
    pass


class ResumeMismatchError(RegistryError):
    """The persisted graph digest differs from the rebuilt graph: the plan
    changed since the original run, so resuming would execute a different DAG."""


class ApprovalConflictError(RegistryError):
    """An approval request was already decided."""


def utcnow() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass
class StepRecord:
    step_id: str
    status: str = "PENDING"
    attempts: int = 0
    started_at: str | None = None
    finished_at: str | None = None
    wall_seconds: float = 0.0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    workspace_path: str = ""
    last_error: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    note: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> StepRecord:
        return cls(**d)


@dataclass
class ApprovalRequest:
    approval_id: str
    workflow_id: str
    step_id: str
    reason: str
    requested_at: str
    decision: str = "PENDING"  # PENDING | APPROVED | REJECTED | RETRY
    decided_at: str | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> ApprovalRequest:
        return cls(**d)


@dataclass
class WorkflowRecord:
    workflow_id: str
    prompt: str
    intent: WorkflowIntent | None
    graph_digest: str
    phase: str = "DISTRIBUTION"
    steps: dict[str, StepRecord] = field(default_factory=dict)
    approvals: dict[str, ApprovalRequest] = field(default_factory=dict)
    data_root: str = ""
    created_at: str = field(default_factory=utcnow)
    updated_at: str = field(default_factory=utcnow)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "workflow_id": self.workflow_id,
            "prompt": self.prompt,
            "intent": self.intent.to_dict() if self.intent else None,
            "graph_digest": self.graph_digest,
            "phase": self.phase,
            "steps": {sid: s.to_dict() for sid, s in sorted(self.steps.items())},
            "approvals": {aid: a.to_dict() for aid, a in sorted(self.approvals.items())},
            "data_root": self.data_root,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorkflowRecord:
        return cls(
            workflow_id=d["workflow_id"],
            prompt=d["prompt"],
            intent=WorkflowIntent.from_dict(d["intent"]) if d.get("intent") else None,
            graph_digest=d["graph_digest"],
            phase=d["phase"],
            steps={sid: StepRecord.from_dict(s) for sid, s in d.get("steps", {}).items()},
            approvals={
                aid: ApprovalRequest.from_dict(a) for aid, a in d.get("approvals", {}).items()
            },
            data_root=d.get("data_root", ""),
            created_at=d["created_at"],
            updated_at=d["updated_at"],
        )


@dataclass
class Event:
    seq: int
    workflow_id: str
    kind: str
    payload: dict
    at: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def new_workflow_id() -> str:
    return "wf-" + uuid.uuid4().hex[:12]


class Registry:
    """File-backed registry for one workflow under <workspace>/<workflow_id>/."""

    def __init__(self, workflow_dir: Path, record: WorkflowRecord):
        self.workflow_dir = Path(workflow_dir)
        self.record = record
        self._lock = threading.RLock()
        self._seq = self._last_persisted_seq()

    # -- construction -----------------------------------------------------

    @classmethod
    def create(cls, workspace_root: Path, record: WorkflowRecord) -> "Registry":
        workflow_dir = Path(workspace_root) / record.workflow_id
        workflow_dir.mkdir(parents=True, exist_ok=True)
        registry = cls(workflow_dir, record)
        registry.persist()
        return registry

    @classmethod
    def open(cls, workflow_dir: Path) -> "Registry":
        workflow_dir = Path(workflow_dir)
        doc = json.loads((workflow_dir / "registry.json").read_text("utf-8"))
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise RegistryError(f"unsupported registry schema_version {doc.get('schema_version')}")
        return cls(workflow_dir, WorkflowRecord.from_dict(doc))

    @property
    def registry_path(self) -> Path:
        return self.workflow_dir / "registry.json"

    @property
    def events_path(self) -> Path:
        return self.workflow_dir / "events.jsonl"

    def _last_persisted_seq(self) -> int:
        if not self.events_path.exists():
            return 0
        last = 0
        with self.events_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    last = json.loads(line)["seq"]
        return last

    # -- persistence ------------------------------------------------------

    def persist(self) -> None:
        """Atomic write (temp file + rename): a crash between calls never
        leaves a half-written document."""
        with self._lock:
            self.record.updated_at = utcnow()
            payload = json.dumps(self.record.to_dict(), indent=2, sort_keys=True)
            tmp = self.registry_path.with_suffix(".json.tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            tmp.replace(self.registry_path)

    def append_event(self, kind: str, payload: dict) -> int:
        if kind not in EVENT_KINDS:
            raise RegistryError(f"unknown event kind {kind!r}")
        with self._lock:
            self._seq += 1
            event = Event(
                seq=self._seq,
                workflow_id=self.record.workflow_id,
                kind=kind,
                payload=payload,
                at=utcnow(),
            )
            with self.events_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            return event.seq

    def read_events(self, since: int = 0) -> list[dict]:
        if not self.events_path.exists():
            return []
        out = []
        with self.events_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    event = json.loads(line)
                    if event["seq"] > since:
                        out.append(event)
        return out

    # -- step state -------------------------------------------------------

    def step(self, step_id: str) -> StepRecord:
        return self.record.steps[step_id]

    def init_steps(self, step_ids: list[str], workspace_for) -> None:
        with self._lock:
            for step_id in step_ids:
                if step_id not in self.record.steps:
                    self.record.steps[step_id] = StepRecord(
                        step_id=step_id, workspace_path=workspace_for(step_id)
                    )
            self.persist()

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise RegistryError(f"unknown phase {phase!r}")
        with self._lock:
            if self.record.phase != phase:
                self.record.phase = phase
                self.persist()
                self.append_event("PHASE_CHANGE", {"phase": phase})

    def mark_running(self, step_id: str) -> None:
        with self._lock:
            record = self.step(step_id)
            record.status = "RUNNING"
            record.started_at = record.started_at or utcnow()
            record.attempts += 1
            self.persist()
            kind = "STEP_START" if record.attempts == 1 else "STEP_RETRY"
            self.append_event(kind, {"step_id": step_id, "attempt": record.attempts})

    def mark_completed(self, step_id: str, outputs: dict[str, str], note: str | None = None) -> None:
        with self._lock:
            record = self.step(step_id)
            record.status = "COMPLETED"
            record.finished_at = utcnow()
            record.outputs = dict(outputs)
            record.last_error = None
            if note:
                record.note = note
            self.persist()
            self.append_event("STEP_DONE", {"step_id": step_id, "attempts": record.attempts})

    def mark_failed_attempt(self, step_id: str, error: str, validation: bool = False) -> None:
        with self._lock:
            record = self.step(step_id)
            record.last_error = error
            self.persist()
            kind = "VALIDATION_FAIL" if validation else "STEP_FAIL"
            self.append_event(kind, {"step_id": step_id, "attempt": record.attempts, "error": error[-2000:]})

    def mark_awaiting_approval(self, step_id: str, error: str) -> None:
        with self._lock:
            record = self.step(step_id)
            record.status = "AWAITING_APPROVAL"
            record.last_error = error
            self.persist()

    def record_usage(self, step_id: str, prompt_tokens: int, completion_tokens: int, wall_seconds: float) -> None:
        """Counters accumulate monotonically across retries."""
        with self._lock:
            record = self.step(step_id)
            record.prompt_tokens += int(prompt_tokens)
            record.completion_tokens += int(completion_tokens)
            record.wall_seconds += float(wall_seconds)
            self.persist()

    def completed_steps(self) -> set[str]:
        with self._lock:
            return {s for s, r in self.record.steps.items() if r.status == "COMPLETED"}

    # -- resumability -----------------------------------------------------

    def resume(self, expected_digest: str) -> set[str]:
        """Return COMPLETED step ids and demote interrupted RUNNING steps to
        PENDING (attempts preserved: interruption is not evidence of fault)."""
        with self._lock:
            if self.record.graph_digest != expected_digest:
                raise ResumeMismatchError(
                    "registry graph digest does not match the rebuilt graph; "
                    "the plan changed since this workflow was recorded "
                    f"(recorded {self.record.graph_digest[:12]}…, rebuilt {expected_digest[:12]}…)"
                )
            demoted = []
            for record in self.record.steps.values():
                if record.status == "RUNNING":
                    record.status = "PENDING"
                    demoted.append(record.step_id)
            if self.record.phase == "HALTED":
                self.record.phase = "PREPROCESSING"
            if demoted:
                self.persist()
                self.append_event("NOTE", {"what": "resume_demoted_running", "steps": sorted(demoted)})
            return self.completed_steps()

    # -- approvals ---------------------------------------------------------

    def open_approval(self, step_id: str, reason: str) -> str:
        with self._lock:
            approval_id = f"ap-{len(self.record.approvals) + 1:04d}-{uuid.uuid4().hex[:6]}"
            self.record.approvals[approval_id] = ApprovalRequest(
                approval_id=approval_id,
                workflow_id=self.record.workflow_id,
                step_id=step_id,
                reason=reason,
                requested_at=utcnow(),
            )
            self.persist()
            self.append_event(
                "APPROVAL_REQUESTED",
                {"approval_id": approval_id, "step_id": step_id, "reason": reason[-2000:]},
            )
            return approval_id

    def decide_approval(self, approval_id: str, decision: str, note: str = "") -> ApprovalRequest:
        if decision not in ("APPROVED", "REJECTED", "RETRY"):
            raise RegistryError(f"invalid decision {decision!r}")
        with self._lock:
            if approval_id not in self.record.approvals:
                raise KeyError(approval_id)
            request = self.record.approvals[approval_id]
            if request.decision != "PENDING":
                raise ApprovalConflictError(
                    f"approval {approval_id} already decided: {request.decision}"
                )
            request.decision = decision
            request.decided_at = utcnow()
            request.note = note
            step = self.step(request.step_id)
            if decision == "APPROVED":
                step.status = "COMPLETED"
                step.finished_at = utcnow()
                step.note = f"human override: approved ({note})" if note else "human override: approved"
                if not step.outputs:
                    step.outputs = {"out_dir": f"{request.step_id}/out"}
            elif decision == "RETRY":
                step.status = "PENDING"
                step.attempts = 0
                step.last_error = None
            else:  # REJECTED
                self.record.phase = "HALTED"
            self.persist()
            self.append_event(
                "APPROVAL_DECIDED",
                {"approval_id": approval_id, "step_id": request.step_id, "decision": decision, "note": note},
            )
            return request

    def pending_approvals(self) -> list[ApprovalRequest]:
        with self._lock:
            return [a for a in self.record.approvals.values() if a.decision == "PENDING"]
