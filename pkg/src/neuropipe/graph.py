"""Pipeline step DAG: construction with cross-modality prerequisite injection,
cycle detection with deterministic witnesses, and a lexicographic ready-set
scheduler. Graphs are immutable after build; scheduling is a pure function of
(graph, completed-set).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

from .planner import Modality, WorkflowIntent


class Phase(Enum):
    INGEST = "INGEST"
    PREPROCESS = "PREPROCESS"
    INTEGRATE = "INTEGRATE"
    TASK = "TASK"


class GraphError(Exception):
    pass


class CycleError(GraphError):
    def __init__(self, cycle: list[str]):
        super().__init__(f"dependency cycle: {' -> '.join(cycle + cycle[:1])}")
        self.cycle = cycle


@dataclass(frozen=True)
class StepNode:
    step_id: str
    modality: Modality | None
    tool_id: str
    depends_on: tuple[str, ...]
    output_schema_id: str
    phase: Phase

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "modality": self.modality.value if self.modality else None,
            "tool_id": self.tool_id,
            "depends_on": sorted(self.depends_on),
            "output_schema_id": self.output_schema_id,
            "phase": self.phase.value,
        }


@dataclass
class StepGraph:
    nodes: list[StepNode]
    _by_id: dict[str, StepNode] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {}
        for node in self.nodes:
            if node.step_id in self._by_id:
                raise GraphError(f"duplicate step_id {node.step_id!r}")
            self._by_id[node.step_id] = node
        for node in self.nodes:
            for dep in node.depends_on:
                if dep not in self._by_id:
                    raise GraphError(f"{node.step_id} depends on unknown step {dep!r}")

    def __contains__(self, step_id: str) -> bool:
        return step_id in self._by_id

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, step_id: str) -> StepNode:
        return self._by_id[step_id]

    def step_ids(self) -> list[str]:
        return sorted(self._by_id)

    def dependents(self, step_id: str) -> list[str]:
        return sorted(n.step_id for n in self.nodes if step_id in n.depends_on)

    def transitive_deps(self, step_id: str) -> set[str]:
        seen: set[str] = set()
        stack = list(self.node(step_id).depends_on)
        while stack:
            dep = stack.pop()
            if dep not in seen:
                seen.add(dep)
                stack.extend(self.node(dep).depends_on)
        return seen

    def export(self) -> dict:
        """Canonical JSON-ready form (nodes sorted by id), used by the console
        DAG view and as the digest input."""
        return {"nodes": [self._by_id[s].to_dict() for s in self.step_ids()]}

    def digest(self) -> str:
        canonical = json.dumps(self.export(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class DependencyTable:
    requires: dict[Modality, set[Modality]]

    def __post_init__(self) -> None:
        for modality, prereqs in self.requires.items():
            if modality in prereqs:
                raise GraphError(f"{modality.value} depends on itself")
        order: list[Modality] = []
        state: dict[Modality, int] = {}

        def visit(m: Modality, trail: list[Modality]) -> None:
            if state.get(m) == 1:
                cycle = [x.value for x in trail[trail.index(m):]]
                raise GraphError(f"cyclic dependency table: {' -> '.join(cycle)}")
            if state.get(m) == 2:
                return
            state[m] = 1
            for p in self.requires.get(m, set()):
                visit(p, trail + [p])
            state[m] = 2
            order.append(m)

        for m in self.requires:
            visit(m, [m])

    @classmethod
    def default(cls) -> DependencyTable:
        return cls(
            requires={
                Modality.SMRI: set(),
                Modality.FMRI: {Modality.SMRI},
                Modality.DMRI: {Modality.SMRI},
                Modality.PET: {Modality.SMRI},
                Modality.TABULAR: set(),
            }
        )

    def closure(self, modalities: set[Modality]) -> set[Modality]:
        out = set(modalities)
        frontier = list(modalities)
        while frontier:
            m = frontier.pop()
            for prereq in self.requires.get(m, set()):
                if prereq not in out:
                    out.add(prereq)
                    frontier.append(prereq)
        return out


def build_graph(intent: WorkflowIntent, deps: DependencyTable, catalog, subject_ctx=None) -> StepGraph:
    """Expand step templates for the dependency closure of the intent's
    modalities, add one INTEGRATE node over all terminal preprocessing nodes,
    and one TASK node per downstream task."""
    from .toolkit import expand_template  # local import to avoid a cycle

    modalities = deps.closure(intent.modalities)
    nodes: list[StepNode] = []
    terminals: list[str] = []
    for modality in sorted(modalities, key=lambda m: m.value):
        chain = expand_template(modality, subject_ctx, catalog)
        nodes.extend(chain)
        terminals.append(chain[-1].step_id)

    integrate = StepNode(
        step_id="integrate.manifest",
        modality=None,
        tool_id="integrate_manifest",
        depends_on=tuple(sorted(terminals)),
        output_schema_id="integrate.out",
        phase=Phase.INTEGRATE,
    )
    nodes.append(integrate)
    for task in sorted(intent.tasks, key=lambda t: t.value):
        nodes.append(
            StepNode(
                step_id=f"task.{task.value.lower()}",
                modality=None,
                tool_id="task_runner",
                depends_on=(integrate.step_id,),
                output_schema_id="task.out",
                phase=Phase.TASK,
            )
        )

    graph = StepGraph(nodes=nodes)
    witness = validate_acyclic(graph)
    if witness is not None:
        raise CycleError(witness)
    return graph


def validate_acyclic(graph: StepGraph) -> list[str] | None:
    """Return None for a DAG, else a witness cycle starting at the
    lexicographically smallest node that lies on one."""
    indegree = {s: len(graph.node(s).depends_on) for s in graph.step_ids()}
    dependents: dict[str, list[str]] = {s: [] for s in indegree}
    for node in graph.nodes:
        for dep in node.depends_on:
            dependents[dep].append(node.step_id)

    queue = sorted(s for s, d in indegree.items() if d == 0)
    remaining = dict(indegree)
    while queue:
        current = queue.pop(0)
        del remaining[current]
        for nxt in dependents[current]:
            if nxt in remaining:
                remaining[nxt] -= 1
                if remaining[nxt] == 0:
                    queue.append(nxt)
        queue.sort()
    if not remaining:
        return None

    cyclic = set(remaining)
    start = min(cyclic)
    path = [start]
    seen_at = {start: 0}
    current = start
    while True:
        current = min(d for d in graph.node(current).depends_on if d in cyclic)
        if current in seen_at:
            cycle = path[seen_at[current]:]
            pivot = cycle.index(min(cycle))
            return cycle[pivot:] + cycle[:pivot]
        seen_at[current] = len(path)
        path.append(current)


def topo_schedule(graph: StepGraph, completed: set[str]) -> list[str]:
    """All not-yet-completed steps whose dependencies are completed, in
    lexicographic step_id order (the deterministic tie-break)."""
    return [
        s
        for s in graph.step_ids()
        if s not in completed and all(d in completed for d in graph.node(s).depends_on)
    ]
