"""The feedback-driven Generate-Execute-Validate loop.

A step's runnable artifact is generated (template-instantiated by default,
model-backed when configured), executed in a sandboxed subprocess with a
restricted environment and hard timeout, and its outputs are validated
structurally. Failures feed the captured stderr tail or validator feedback
back into the next generation attempt; an exhausted retry budget escalates to
a human approval request.
"""
from __future__ import annotations

import json
import os
import string
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from .graph import StepNode
from .planner import BackendConfig, UsageStats
from .registry import Registry
from .toolkit import GenerationError, TemplateCatalog, exe_argv, params_to_args, render_script
from .validator import ValidationReport

TAIL_BYTES = 64 * 1024


class ExecutorError(Exception):
    """Internal executor fault (unwritable workspace, spawn failure): halts the
    workflow rather than consuming the step's retry budget."""


@dataclass
class ExecutionRequest:
    step: StepNode
    resolved_inputs: dict[str, str]
    workspace: Path
    env_allowlist: list[str]
    timeout: float

    def __post_init__(self) -> None:
        self.workspace = Path(self.workspace)


@dataclass
class ExecutionResult:
    exit_code: int
    stdout_tail: str
    stderr_tail: str
    wall_seconds: float
    timed_out: bool


@dataclass
class AttemptContext:
    attempt_index: int = 1
    prior_error: str | None = None
    prior_validation_feedback: str | None = None

    def __post_init__(self) -> None:
        if self.attempt_index == 1 and (self.prior_error or self.prior_validation_feedback):
            raise ValueError("first attempt cannot carry prior failure context")


class ScriptGenerator(Protocol):
    def generate(self, step: StepNode, ctx: AttemptContext) -> str: ...


@dataclass
class TemplateGenerator:
    """Deterministic generation by template instantiation (the hermetic default).

    On retries the tool's declared fallback parameter ladder is walked one rung
    per attempt; without a ladder the artifact is re-emitted unchanged.
    """

    catalog: TemplateCatalog
    resolver: Callable[[StepNode], dict[str, str]]
    mock: bool
    tools_dir: Path | None = None

    def generate(self, step: StepNode, ctx: AttemptContext) -> str:
        tool = self.catalog.tools[step.tool_id]
        params = tool.params_for_attempt(ctx.attempt_index)
        mapping = dict(self.resolver(step))
        mapping.setdefault(
            "exe", json.dumps(exe_argv(self.catalog, step.tool_id, self.mock, self.tools_dir))
        )
        mapping.setdefault("extra_args", json.dumps(params_to_args(params)))
        for name, value_template in tool.engine_args.items():
            if isinstance(value_template, dict):
                # Mode-dependent argv (secondary commands of multi-tool steps).
                if self.mock and value_template.get("mock") == "stub":
                    argv = [sys.executable, str(Path(self.tools_dir) / f"{step.tool_id}.py")]
                else:
                    argv = list(value_template["real"])
                mapping.setdefault(name, json.dumps(argv))
            else:
                mapping.setdefault(name, string.Template(value_template).safe_substitute(mapping))
        return render_script(self.catalog, step.tool_id, mapping)


MODEL_GENERATION_INSTRUCTIONS = (
    "You write one self-contained Python script that performs a single "
    "neuroimaging pipeline step by invoking the named command-line tool. "
    "Ground every input path in the provided directory listing and write "
    "outputs only under the given output directory. Reply with the script "
    "only, no prose."
)


@dataclass
class ModelGenerator:
    """Model-backed generation: the step description, a directory listing, and
    any prior failure context are sent to the configured chat backend; the
    reply (minus code fences) is the runnable artifact."""

    backend: BackendConfig
    resolver: Callable[[StepNode], dict[str, str]]
    listing: Callable[[StepNode], list[str]]
    usage_sink: Callable[[str, UsageStats], None] | None = None

    def generate(self, step: StepNode, ctx: AttemptContext) -> str:
        from .planner import TransportError, http_chat_complete

        mapping = self.resolver(step)
        lines = [
            f"Step: {step.step_id} (tool {step.tool_id}, phase {step.phase.value})",
            f"Output directory: {mapping.get('out_dir', '')}",
            f"Data root: {mapping.get('data_root', '')}",
            "Directory listing:",
        ]
        lines.extend(f"  {entry}" for entry in self.listing(step))
        if ctx.prior_error:
            lines.append(f"Previous attempt failed with:\n{ctx.prior_error}")
        if ctx.prior_validation_feedback:
            lines.append(f"Previous output was rejected:\n{ctx.prior_validation_feedback}")
        messages = [
            {"role": "system", "content": MODEL_GENERATION_INSTRUCTIONS},
            {"role": "user", "content": "\n".join(lines)},
        ]
        try:
            raw, usage = http_chat_complete(messages, self.backend)
        except TransportError as exc:
            raise GenerationError(f"model backend failed for {step.step_id}: {exc}") from exc
        if self.usage_sink:
            self.usage_sink(step.step_id, usage)
        return strip_code_fences(raw)


def strip_code_fences(text: str) -> str:
    stripped = text.strip()
    if stripped.startswith("```"):
        first_newline = stripped.find("\n")
        stripped = stripped[first_newline + 1 :] if first_newline != -1 else ""
        if stripped.rstrip().endswith("```"):
            stripped = stripped.rstrip()[:-3]
    return stripped.strip() + "\n"


def _tail_of(path: Path) -> str:
    if not path.exists():
        return ""
    size = path.stat().st_size
    with path.open("rb") as fh:
        if size > TAIL_BYTES:
            fh.seek(size - TAIL_BYTES)
        return fh.read().decode("utf-8", errors="replace")


def sandbox_exec(req: ExecutionRequest, artifact: Path) -> ExecutionResult:
    """Run the artifact with CWD pinned to the step workspace, environment
    restricted to the allowlist (plus PATH), streams captured to workspace log
    files with bounded in-memory tails, and a kill-enforced timeout."""
    if not artifact.exists():
        raise ExecutorError(f"artifact missing: {artifact}")
    env = {name: os.environ[name] for name in req.env_allowlist if name in os.environ}
    env.setdefault("PATH", os.defpath)
    stdout_path = req.workspace / "stdout.log"
    stderr_path = req.workspace / "stderr.log"
    started = time.monotonic()
    timed_out = False
    try:
        with stdout_path.open("ab") as out, stderr_path.open("ab") as err:
            proc = subprocess.Popen(
                [sys.executable, str(artifact)],
                cwd=str(req.workspace),
                env=env,
                stdout=out,
                stderr=err,
            )
            try:
                proc.wait(timeout=req.timeout)
            except subprocess.TimeoutExpired:
                timed_out = True
                proc.kill()
                proc.wait()
    except OSError as exc:
        raise ExecutorError(f"failed to spawn step process: {exc}") from exc
    wall = time.monotonic() - started
    return ExecutionResult(
        exit_code=proc.returncode,
        stdout_tail=_tail_of(stdout_path),
        stderr_tail=_tail_of(stderr_path),
        wall_seconds=wall,
        timed_out=timed_out,
    )


def _retry_ctx(attempt_index: int, error: str | None = None, feedback: str | None = None) -> AttemptContext:
    """Context for attempt k+1, carrying attempt k's failure text verbatim."""
    return AttemptContext(
        attempt_index=attempt_index,
        prior_error=error,
        prior_validation_feedback=feedback,
    )


def run_step(
    req: ExecutionRequest,
    gen: ScriptGenerator,
    val: Callable[[Path], ValidationReport],
    max_exec_retries: int,
    registry: Registry,
) -> str:
    """Drive one step to COMPLETED or ESCALATED.

    Runtime failures and validation failures share one retry budget: attempts
    per step never exceed max_exec_retries + 1, counting attempts spent before
    any interruption (the registry preserves the counter across resume).
    """
    step_id = req.step.step_id
    for name, path in req.resolved_inputs.items():
        if not Path(path).exists():
            raise ExecutorError(f"{step_id}: resolved input {name!r} missing at dispatch: {path}")
    req.workspace.mkdir(parents=True, exist_ok=True)
    out_dir = req.workspace / "out"
    out_dir.mkdir(exist_ok=True)

    prior = registry.step(step_id)
    if prior.attempts > 0 and prior.last_error:
        ctx = _retry_ctx(prior.attempts + 1, error=prior.last_error)
    else:
        ctx = AttemptContext()
    last_failure = prior.last_error or ""

    while registry.step(step_id).attempts < max_exec_retries + 1:
        registry.mark_running(step_id)
        started = time.monotonic()
        try:
            script_text = gen.generate(req.step, ctx)
        except GenerationError as exc:
            last_failure = str(exc)
            registry.record_usage(step_id, 0, 0, time.monotonic() - started)
            registry.mark_failed_attempt(step_id, last_failure)
            ctx = _retry_ctx(ctx.attempt_index + 1, error=last_failure)
            continue

        artifact = req.workspace / "artifact.py"
        artifact.write_text(script_text, encoding="utf-8")
        result = sandbox_exec(req, artifact)
        registry.record_usage(step_id, 0, 0, result.wall_seconds)

        if result.timed_out or result.exit_code != 0:
            if result.timed_out:
                last_failure = f"timed out after {req.timeout}s (killed)"
            else:
                last_failure = result.stderr_tail or f"exit code {result.exit_code}"
            registry.mark_failed_attempt(step_id, last_failure)
            ctx = _retry_ctx(ctx.attempt_index + 1, error=last_failure)
            continue

        report = val(out_dir)
        (req.workspace / "validation.json").write_text(
            json.dumps(report.to_dict(), indent=2), encoding="utf-8"
        )
        if report.valid:
            outputs = {"out_dir": str(out_dir), "schema": report.schema_id}
            registry.mark_completed(step_id, outputs)
            return "COMPLETED"
        last_failure = report.feedback
        registry.mark_failed_attempt(step_id, last_failure, validation=True)
        ctx = _retry_ctx(ctx.attempt_index + 1, feedback=last_failure)

    approval_id = registry.open_approval(step_id, reason=last_failure or "retries exhausted")
    registry.mark_awaiting_approval(step_id, last_failure or "retries exhausted")
    registry.append_event(
        "NOTE", {"what": "escalated", "step_id": step_id, "approval_id": approval_id}
    )
    return "ESCALATED"
