"""HTTP service binding the engine to the console: submit/resume/monitor
workflows, the HITL approval API, artifact serving, and event long-polling.

Every GET handler reads the persisted registry/event files directly, so any
state visible over the API is reconstructible from registry.json plus
events.jsonl alone. No authentication: the service binds loopback and is a
single-user research console.
"""
from __future__ import annotations

import json
import threading
import time
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse

from .config import RunConfig
from .engine import IntentParseError, WorkflowEngine
from .registry import ApprovalConflictError, Registry

LONG_POLL_SECONDS = 25.0
POLL_INTERVAL = 0.15


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


class WorkflowManager:
    """Owns background engine threads and the live registry per workflow; all
    mutations route through the live registry when one exists."""

    def __init__(self, workspace_root: Path, config: RunConfig):
        self.workspace_root = Path(workspace_root)
        self.workspace_root.mkdir(parents=True, exist_ok=True)
        self.config = config
        self._live: dict[str, Registry] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._lock = threading.Lock()

    def workflow_ids(self) -> list[str]:
        return sorted(
            p.parent.name for p in self.workspace_root.glob("*/registry.json")
        )

    def workflow_dir(self, workflow_id: str) -> Path | None:
        candidate = self.workspace_root / workflow_id
        return candidate if (candidate / "registry.json").exists() else None

    def read_record(self, workflow_id: str) -> dict | None:
        workflow_dir = self.workflow_dir(workflow_id)
        if workflow_dir is None:
            return None
        return json.loads((workflow_dir / "registry.json").read_text("utf-8"))

    def submit(self, prompt: str, data_root: str, config_patch: dict | None) -> str:
        config = self.config
        if config_patch:
            merged = {**_config_dict(self.config), **config_patch}
            config = RunConfig.from_dict(merged)
        engine = WorkflowEngine(self.workspace_root, config)
        handle = engine.submit(prompt, Path(data_root))
        workflow_id = handle.registry.record.workflow_id
        with self._lock:
            self._live[workflow_id] = handle.registry
        thread = threading.Thread(
            target=engine.run, args=(handle,), kwargs={"wait_for_approvals": True}, daemon=True
        )
        with self._lock:
            self._threads[workflow_id] = thread
        thread.start()
        return workflow_id

    def resume(self, workflow_id: str) -> list[str]:
        engine = WorkflowEngine(self.workspace_root, self.config)
        handle, completed = engine.resume(workflow_id)
        with self._lock:
            self._live[workflow_id] = handle.registry
        thread = threading.Thread(
            target=engine.run, args=(handle,), kwargs={"wait_for_approvals": True}, daemon=True
        )
        with self._lock:
            self._threads[workflow_id] = thread
        thread.start()
        return sorted(completed)

    def registry_for(self, workflow_id: str) -> Registry | None:
        with self._lock:
            live = self._live.get(workflow_id)
        if live is not None:
            return live
        workflow_dir = self.workflow_dir(workflow_id)
        if workflow_dir is None:
            return None
        return Registry.open(workflow_dir)

    def decide(self, approval_id: str, decision: str, note: str):
        for workflow_id in self.workflow_ids():
            record = self.read_record(workflow_id)
            if record and approval_id in record.get("approvals", {}):
                registry = self.registry_for(workflow_id)
                return registry.decide_approval(approval_id, decision, note)
        raise KeyError(approval_id)


def _config_dict(config: RunConfig) -> dict:
    out = dict(config.__dict__)
    out["backend"] = dict(config.backend.__dict__)
    return out


def create_app(
    workspace_root: Path,
    config: RunConfig | None = None,
    console_dir: Path | None = None,
) -> FastAPI:
    manager = WorkflowManager(Path(workspace_root), config or RunConfig())
    app = FastAPI(title="neuropipe gateway", version="1")
    app.state.manager = manager

    @app.exception_handler(Exception)
    async def unhandled(request: Request, exc: Exception):  # pragma: no cover
        return _error(500, "internal_error", str(exc))

    @app.post("/api/v1/workflows", status_code=201)
    def submit_workflow(body: dict):
        prompt = body.get("prompt", "")
        data_root = body.get("data_root", "")
        if not prompt or not data_root:
            return _error(400, "bad_request", "prompt and data_root are required")
        if not Path(data_root).is_dir():
            return _error(400, "bad_request", f"data_root is not a directory: {data_root}")
        try:
            workflow_id = manager.submit(prompt, data_root, body.get("config"))
        except IntentParseError as exc:
            return _error(400, "intent_invalid", str(exc))
        return {"workflow_id": workflow_id}

    @app.get("/api/v1/workflows")
    def list_workflows():
        out = []
        for workflow_id in manager.workflow_ids():
            record = manager.read_record(workflow_id)
            steps = record.get("steps", {})
            out.append(
                {
                    "workflow_id": workflow_id,
                    "prompt": record.get("prompt", ""),
                    "phase": record.get("phase"),
                    "steps_total": len(steps),
                    "steps_completed": sum(
                        1 for s in steps.values() if s["status"] == "COMPLETED"
                    ),
                    "updated_at": record.get("updated_at"),
                }
            )
        return out

    @app.get("/api/v1/workflows/{workflow_id}")
    def get_workflow(workflow_id: str):
        record = manager.read_record(workflow_id)
        if record is None:
            return _error(404, "not_found", f"unknown workflow {workflow_id}")
        return record

    @app.get("/api/v1/workflows/{workflow_id}/graph")
    def get_graph(workflow_id: str):
        workflow_dir = manager.workflow_dir(workflow_id)
        if workflow_dir is None or not (workflow_dir / "graph.json").exists():
            return _error(404, "not_found", f"no graph for workflow {workflow_id}")
        return json.loads((workflow_dir / "graph.json").read_text("utf-8"))

    @app.get("/api/v1/workflows/{workflow_id}/events")
    def get_events(workflow_id: str, since: int = 0, timeout: float = LONG_POLL_SECONDS):
        workflow_dir = manager.workflow_dir(workflow_id)
        if workflow_dir is None:
            return _error(404, "not_found", f"unknown workflow {workflow_id}")
        deadline = time.monotonic() + min(timeout, LONG_POLL_SECONDS)
        events_path = workflow_dir / "events.jsonl"
        while True:
            events = []
            if events_path.exists():
                with events_path.open("r", encoding="utf-8") as fh:
                    for line in fh:
                        line = line.strip()
                        if line:
                            event = json.loads(line)
                            if event["seq"] > since:
                                events.append(event)
            if events or time.monotonic() >= deadline:
                return {"events": events}
            time.sleep(POLL_INTERVAL)

    @app.get("/api/v1/workflows/{workflow_id}/artifacts/{relpath:path}")
    def get_artifact(workflow_id: str, relpath: str):
        workflow_dir = manager.workflow_dir(workflow_id)
        if workflow_dir is None:
            return _error(404, "not_found", f"unknown workflow {workflow_id}")
        if relpath.startswith(("/", "\\")) or ".." in relpath.split("/"):
            return _error(400, "bad_path", "path traversal rejected")
        base = workflow_dir.resolve()
        target = (workflow_dir / relpath).resolve()
        if not target.is_relative_to(base):
            return _error(400, "bad_path", "path traversal rejected")
        if not target.is_file():
            return _error(404, "not_found", f"no artifact at {relpath}")
        return FileResponse(target)

    @app.post("/api/v1/workflows/{workflow_id}/resume")
    def resume_workflow(workflow_id: str):
        if manager.workflow_dir(workflow_id) is None:
            return _error(404, "not_found", f"unknown workflow {workflow_id}")
        try:
            skipped = manager.resume(workflow_id)
        except Exception as exc:
            return _error(409, "resume_refused", str(exc))
        return {"resumed": True, "skipped": skipped}

    @app.get("/api/v1/approvals")
    def list_approvals(status: str = "pending"):
        wanted = status.upper()
        out = []
        for workflow_id in manager.workflow_ids():
            record = manager.read_record(workflow_id)
            for approval in record.get("approvals", {}).values():
                if wanted in ("ALL", approval["decision"]):
                    out.append(approval)
        out.sort(key=lambda a: a["requested_at"])
        return out

    @app.post("/api/v1/approvals/{approval_id}")
    def decide_approval(approval_id: str, body: dict):
        decision_token = str(body.get("decision", "")).lower()
        mapping = {"approve": "APPROVED", "reject": "REJECTED", "retry": "RETRY"}
        if decision_token not in mapping:
            return _error(400, "bad_request", f"decision must be one of {sorted(mapping)}")
        try:
            request = app.state.manager.decide(
                approval_id, mapping[decision_token], str(body.get("note", ""))
            )
        except KeyError:
            return _error(404, "not_found", f"unknown approval {approval_id}")
        except ApprovalConflictError as exc:
            return _error(409, "conflict", str(exc))
        return request.to_dict()

    if console_dir and Path(console_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(console_dir), html=True), name="console")

    return app


def serve(
    port: int,
    workspace_root: Path,
    config: RunConfig | None = None,
    console_dir: Path | None = None,
    host: str = "127.0.0.1",
) -> None:
    import uvicorn

    app = create_app(workspace_root, config, console_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
