"""The workflow engine: four adaptive phases (task distribution, parallel
preprocessing, data integration, task processing) over a bounded worker pool,
with resumable registry state and human escalation handling.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .executor import ExecutionRequest, TemplateGenerator, run_step
from .graph import Phase, StepGraph, StepNode, build_graph, topo_schedule
from .integrator import MODALITY_COLUMNS
from .planner import Modality, parse_intent
from .registry import Registry, WorkflowRecord, new_workflow_id
from .toolkit import TemplateCatalog, install_mock_suite, scan_subject_context
from .validator import validate_tree

log = logging.getLogger("neuropipe.engine")


class EngineError(Exception):
    pass


class IntentParseError(EngineError):
    """The prompt could not be parsed into a valid intent."""


class InterruptRun(Exception):
    """Raised by a step hook to simulate an interruption; test harness use."""


def _phase_of(node: StepNode) -> str:
    return {
        Phase.INGEST: "PREPROCESSING",
        Phase.PREPROCESS: "PREPROCESSING",
        Phase.INTEGRATE: "INTEGRATION",
        Phase.TASK: "TASK",
    }[node.phase]


@dataclass
class WorkflowHandle:
    registry: Registry
    graph: StepGraph
    workflow_dir: Path


class WorkflowEngine:
    def __init__(
        self,
        workspace_root: Path,
        config: RunConfig | None = None,
        catalog: TemplateCatalog | None = None,
        step_hook=None,
    ):
        # Step artifacts execute with CWD inside their own workspace, so every
        # path recorded for them must be absolute.
        self.workspace_root = Path(workspace_root).resolve()
        self.config = config or RunConfig()
        self.catalog = catalog or TemplateCatalog.load(
            Path(self.config.catalog_path) if self.config.catalog_path else None
        )
        self.step_hook = step_hook

    # -- submission ---------------------------------------------------------

    def submit(self, prompt: str, data_root: Path) -> WorkflowHandle:
        """Task distribution: parse the goal, build the dependency graph,
        create the persistent registry, and stage the tool suite."""
        data_root = Path(data_root).resolve()
        # Buffer parse-attempt events; the event log exists only once the
        # workflow record does, so they are flushed right after creation.
        parse_events: list[dict] = []
        outcome = parse_intent(
            prompt,
            self.config.backend,
            event_sink=lambda kind, payload: parse_events.append(payload),
        )
        if not outcome.valid:
            raise IntentParseError(outcome.failure_reason or "intent parse failed")
        intent = outcome.intent

        from .graph import DependencyTable

        subject_ctx = scan_subject_context(data_root)
        graph = build_graph(intent, DependencyTable.default(), self.catalog, subject_ctx)

        record = WorkflowRecord(
            workflow_id=new_workflow_id(),
            prompt=prompt,
            intent=intent,
            graph_digest=graph.digest(),
            data_root=str(data_root),
        )
        registry = Registry.create(self.workspace_root, record)
        workflow_dir = registry.workflow_dir
        registry.init_steps(graph.step_ids(), workspace_for=lambda s: s)
        (workflow_dir / "graph.json").write_text(
            json.dumps(graph.export(), indent=2, sort_keys=True), encoding="utf-8"
        )
        (workflow_dir / "run_config.json").write_text(
            json.dumps(
                {
                    "mock": self.config.mock,
                    "join_policy": self.config.join_policy,
                    "subject_pattern": self.config.subject_pattern
                    or self.catalog.subject_pattern,
                    "catalog_path": self.config.catalog_path,
                    "seed": self.config.seed,
                },
                indent=2,
            ),
            encoding="utf-8",
        )
        if self.config.mock:
            manifest = self.catalog.default_mock_manifest(seed=self.config.seed)
            if self.config.mock_overrides:
                manifest = manifest.override(self.config.mock_overrides)
            install_mock_suite(manifest, workflow_dir / "tools")
        registry.append_event("NOTE", {"what": "submitted", "prompt": prompt})
        for payload in parse_events:
            registry.append_event("NOTE", payload)
        registry.set_phase("DISTRIBUTION")
        return WorkflowHandle(registry=registry, graph=graph, workflow_dir=workflow_dir)

    # -- resumption -----------------------------------------------------------

    def open(self, workflow_id: str) -> WorkflowHandle:
        workflow_dir = self.workspace_root / workflow_id
        registry = Registry.open(workflow_dir)
        graph = self.rebuild_graph(registry)
        return WorkflowHandle(registry=registry, graph=graph, workflow_dir=workflow_dir)

    def rebuild_graph(self, registry: Registry) -> StepGraph:
        from .graph import DependencyTable

        record = registry.record
        subject_ctx = scan_subject_context(Path(record.data_root))
        return build_graph(record.intent, DependencyTable.default(), self.catalog, subject_ctx)

    def resume(self, workflow_id: str) -> tuple[WorkflowHandle, set[str]]:
        """Reopen a workflow, verify the plan digest, and return the COMPLETED
        step set the executor will skip."""
        handle = self.open(workflow_id)
        completed = handle.registry.resume(handle.graph.digest())
        return handle, completed

    # -- execution ------------------------------------------------------------

    def _resolver(self, handle: WorkflowHandle):
        workflow_dir = handle.workflow_dir

        def resolve(step: StepNode) -> dict[str, str]:
            record = handle.registry.record
            mapping = {
                "data_root": record.data_root,
                "out_dir": str(workflow_dir / step.step_id / "out"),
                "workflow_dir": str(workflow_dir),
            }
            prefix = step.step_id.split(".", 1)[0]
            for dep in step.depends_on:
                dep_out = workflow_dir / handle.registry.step(dep).outputs.get(
                    "out_dir", f"{dep}/out"
                )
                if dep.startswith(prefix + "."):
                    mapping["prev_dir"] = str(dep_out)
                else:
                    mapping["anat_dir"] = str(dep_out)
                if dep.startswith("integrate."):
                    mapping["manifest_csv"] = str(dep_out / "final_data_list.csv")
            if step.phase is Phase.TASK:
                mapping["task_kind"] = step.step_id.split(".", 1)[1]
            return mapping

        return resolve

    def _make_request(self, handle: WorkflowHandle, step: StepNode) -> ExecutionRequest:
        workflow_dir = handle.workflow_dir
        resolved = {"data_root": handle.registry.record.data_root}
        for dep in step.depends_on:
            rel = handle.registry.step(dep).outputs.get("out_dir", f"{dep}/out")
            resolved[f"dep:{dep}"] = str(workflow_dir / rel)
        tool = self.catalog.tools[step.tool_id]
        timeout = self.config.step_timeout or (
            tool.mock_timeout if self.config.mock else tool.default_timeout
        )
        return ExecutionRequest(
            step=step,
            resolved_inputs=resolved,
            workspace=workflow_dir / step.step_id,
            env_allowlist=list(self.config.env_allowlist),
            timeout=timeout,
        )

    def _make_generator(self, handle: WorkflowHandle):
        if self.config.generation_mode == "MODEL":
            from .executor import ModelGenerator

            data_root = Path(handle.registry.record.data_root)

            def listing(step: StepNode) -> list[str]:
                return sorted(
                    str(p.relative_to(data_root))
                    for p in data_root.rglob("*")
                    if p.is_file()
                )[:400]

            return ModelGenerator(
                backend=self.config.backend,
                resolver=self._resolver(handle),
                listing=listing,
                usage_sink=lambda step_id, usage: handle.registry.record_usage(
                    step_id, usage.prompt_tokens, usage.completion_tokens, 0.0
                ),
            )
        return TemplateGenerator(
            catalog=self.catalog,
            resolver=self._resolver(handle),
            mock=self.config.mock,
            tools_dir=handle.workflow_dir / "tools" if self.config.mock else None,
        )

    def _run_one(self, handle: WorkflowHandle, step: StepNode) -> str:
        generator = self._make_generator(handle)
        schema = self.catalog.schema_for_tool(step.tool_id)
        request = self._make_request(handle, step)
        outcome = run_step(
            request,
            generator,
            val=lambda out_dir: validate_tree(out_dir, schema),
            max_exec_retries=self.config.max_exec_retries,
            registry=handle.registry,
        )
        if outcome == "COMPLETED":
            # Builtin steps may leave structured notes for the event log.
            notes = request.workspace / "out" / "notes.jsonl"
            if notes.exists():
                for line in notes.read_text("utf-8").splitlines():
                    if line.strip():
                        handle.registry.append_event("NOTE", json.loads(line))
            # Store the workflow-relative output dir for blackboard lookups.
            record = handle.registry.step(step.step_id)
            record.outputs["out_dir"] = f"{step.step_id}/out"
            handle.registry.persist()
        return outcome

    def _update_phase(self, handle: WorkflowHandle, completed: set[str]) -> None:
        registry = handle.registry
        if registry.record.phase == "HALTED":
            return
        remaining = [handle.graph.node(s) for s in handle.graph.step_ids() if s not in completed]
        if not remaining:
            registry.set_phase("DONE")
            return
        order = ["PREPROCESSING", "INTEGRATION", "TASK"]
        phases = {_phase_of(n) for n in remaining}
        for phase in order:
            if phase in phases:
                registry.set_phase(phase)
                return

    def run(self, handle: WorkflowHandle, wait_for_approvals: bool = False) -> str:
        """Drive the workflow until DONE, HALTED, or blocked on a pending human
        decision (CLI mode returns; service mode waits)."""
        registry = handle.registry
        graph = handle.graph
        parallelism = self.config.parallelism or max(
            1, len({n.modality for n in graph.nodes if n.modality})
        )
        in_flight: dict[str, Future] = {}
        interrupted: InterruptRun | None = None

        pool = ThreadPoolExecutor(max_workers=parallelism)
        try:
            while True:
                if registry.record.phase == "HALTED":
                    break
                completed = registry.completed_steps()
                self._update_phase(handle, completed)
                if registry.record.phase in ("DONE", "HALTED"):
                    break

                if self.config.approve_all:
                    for approval in registry.pending_approvals():
                        registry.decide_approval(
                            approval.approval_id, "APPROVED", note="auto: --approve-all"
                        )
                    completed = registry.completed_steps()
                    self._update_phase(handle, completed)
                    if registry.record.phase in ("DONE", "HALTED"):
                        break

                ready = [
                    s
                    for s in topo_schedule(graph, completed)
                    if s not in in_flight and registry.step(s).status == "PENDING"
                ]
                # Never queue beyond the worker count: an interrupt must not
                # leave pre-started work racing the shutdown.
                capacity = max(parallelism - len(in_flight), 0)
                for step_id in ready[:capacity]:
                    node = graph.node(step_id)
                    in_flight[step_id] = pool.submit(self._run_one, handle, node)

                if in_flight:
                    done, _ = wait(list(in_flight.values()), return_when=FIRST_COMPLETED)
                    finished = [s for s, f in in_flight.items() if f in done]
                    for step_id in finished:
                        future = in_flight.pop(step_id)
                        future.result()  # surface ExecutorError
                        if self.step_hook and registry.step(step_id).status == "COMPLETED":
                            try:
                                self.step_hook(step_id)
                            except InterruptRun as exc:
                                interrupted = exc
                    if interrupted:
                        break
                    continue

                pending = registry.pending_approvals()
                if pending:
                    if wait_for_approvals:
                        time.sleep(0.2)
                        continue
                    log.info(
                        "workflow %s blocked on %d pending approval(s)",
                        registry.record.workflow_id,
                        len(pending),
                    )
                    break
                # No ready steps, nothing in flight, nothing pending: a
                # non-PENDING leftover (e.g. rejected path) means we stop.
                break
        except OSError as exc:
            log.critical("registry storage failure, halting: %s", exc)
            registry.record.phase = "HALTED"
            return "HALTED"
        finally:
            # An interruption must not let queued steps run during shutdown:
            # the on-disk registry reflects only work that actually finished.
            pool.shutdown(wait=True, cancel_futures=True)
        if interrupted:
            raise interrupted
        return registry.record.phase

    def run_prompt(self, prompt: str, data_root: Path) -> tuple[WorkflowHandle, str]:
        handle = self.submit(prompt, data_root)
        phase = self.run(handle, wait_for_approvals=False)
        return handle, phase


def modality_roots(handle: WorkflowHandle, catalog: TemplateCatalog) -> dict[Modality, Path]:
    """Map each modality with a COMPLETED terminal step to that step's out dir."""
    roots: dict[Modality, Path] = {}
    registry = handle.registry
    for modality, source in catalog.manifest_sources.items():
        step_id = f"{modality.value.lower()}.{source.step_name}"
        if step_id in registry.record.steps and registry.step(step_id).status == "COMPLETED":
            rel = registry.step(step_id).outputs.get("out_dir", f"{step_id}/out")
            roots[modality] = handle.workflow_dir / rel
    return roots


__all__ = [
    "EngineError",
    "IntentParseError",
    "InterruptRun",
    "WorkflowEngine",
    "WorkflowHandle",
    "modality_roots",
    "MODALITY_COLUMNS",
]
