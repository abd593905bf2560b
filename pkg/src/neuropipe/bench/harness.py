"""Benchmark harness for the three pipeline ablation suites: intent parsing,
preprocessing script generation, and data integration.

Checks are computed per case; aggregates are simple means of the per-case
booleans. With the bundled cases and the deterministic generators the whole
harness is reproducible bit-for-bit.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import re
import shutil
import string
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

from ..executor import AttemptContext, TemplateGenerator
from ..graph import Phase, StepNode
from ..integrator import Manifest, build_manifest, emit_csv, parse_csv, scan_outputs
from ..planner import BackendConfig, DownstreamTask, Modality, parse_intent
from ..toolkit import TemplateCatalog
from ..validator import Constraint, check_step_constraints

TREE_MODALITY_DIRS = {
    "smri": Modality.SMRI,
    "pet": Modality.PET,
    "fmri": Modality.FMRI,
    "dti": Modality.DMRI,
    "tabular": Modality.TABULAR,
}


class BenchConfigError(Exception):
    """The benchmark cannot start (e.g. the syntax-check command is missing)."""


@dataclass
class IntentCase:
    case_id: str
    prompt: str
    gold_modalities: set[str]
    gold_tasks: set[str]

    def __post_init__(self) -> None:
        for token in self.gold_modalities:
            Modality(token)
        for token in self.gold_tasks:
            DownstreamTask(token)


@dataclass
class PreprocCase:
    case_id: str
    modality: str
    step: str
    tool_id: str
    directory_tree_listing: list[str]
    template_inputs: dict[str, str]
    expected_output_root: str
    expected_tool_tokens: list[str]  # [import token, call token]
    constraints: list[Constraint]
    syntax_check_cmd: list[str]

    def __post_init__(self) -> None:
        if not self.directory_tree_listing:
            raise ValueError(f"{self.case_id}: empty directory tree")
        if len(self.expected_tool_tokens) != 2:
            raise ValueError(f"{self.case_id}: expected [import token, call token]")


@dataclass
class IntegrationCase:
    case_id: str
    tree: list[str]
    gold_csv: str
    required_triples: list[tuple[str, str, str]]
    join_policy: str = "UNION"
    case_dir: Path | None = None


@dataclass
class BenchReport:
    benchmark: str
    backend_id: str
    cases: list[dict]
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())

    @property
    def check_names(self) -> list[str]:
        return [k for k in self.cases[0] if k != "case_id"] if self.cases else []

    def aggregates(self) -> dict[str, float]:
        names = self.check_names
        out = {}
        for name in names:
            values = [float(case[name]) for case in self.cases]
            out[name] = sum(values) / len(values) if values else 0.0
        return out

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "backend_id": self.backend_id,
            "timestamp": self.timestamp,
            "cases": self.cases,
            "aggregates": self.aggregates(),
        }

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
        with (out_dir / "report.csv").open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["case_id"] + self.check_names)
            for case in self.cases:
                writer.writerow([case["case_id"]] + [case[c] for c in self.check_names])


# -- case loading ----------------------------------------------------------------


def _bundled_dir(kind: str):
    return resources.files("neuropipe.bench").joinpath(f"cases/{kind}")


def load_cases(kind: str, directory: Path | None = None) -> list:
    """Load case JSON documents from a directory, else the bundled suites."""
    docs: list[tuple[str, dict, Path | None]] = []
    if directory is not None:
        directory = Path(directory)
        for path in sorted(directory.glob("*.json")):
            docs.append((path.stem, json.loads(path.read_text("utf-8")), directory))
    else:
        root = _bundled_dir(kind)
        for entry in sorted(root.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".json"):
                docs.append((entry.name[:-5], json.loads(entry.read_text()), None))
    cases = []
    for stem, doc, case_dir in docs:
        if kind == "intent":
            cases.append(
                IntentCase(
                    case_id=doc.get("case_id", stem),
                    prompt=doc["prompt"],
                    gold_modalities=set(doc["gold_modalities"]),
                    gold_tasks=set(doc["gold_tasks"]),
                )
            )
        elif kind == "preproc":
            cases.append(
                PreprocCase(
                    case_id=doc.get("case_id", stem),
                    modality=doc["modality"],
                    step=doc["step"],
                    tool_id=doc["tool_id"],
                    directory_tree_listing=list(doc["directory_tree_listing"]),
                    template_inputs=dict(doc["template_inputs"]),
                    expected_output_root=doc["expected_output_root"],
                    expected_tool_tokens=list(doc["expected_tool_tokens"]),
                    constraints=[Constraint.from_dict(c) for c in doc["constraints"]],
                    syntax_check_cmd=list(doc["syntax_check_cmd"]),
                )
            )
        elif kind == "integration":
            cases.append(
                IntegrationCase(
                    case_id=doc.get("case_id", stem),
                    tree=list(doc["tree"]),
                    gold_csv=doc["gold_csv"],
                    required_triples=[tuple(t) for t in doc["required_triples"]],
                    join_policy=doc.get("join_policy", "UNION"),
                    case_dir=case_dir,
                )
            )
        else:
            raise ValueError(f"unknown case kind {kind!r}")
    return cases


def read_gold_csv(case: IntegrationCase) -> str:
    if case.case_dir is not None:
        return (case.case_dir / case.gold_csv).read_text("utf-8")
    return _bundled_dir("integration").joinpath(case.gold_csv).read_text()


# -- intent benchmark -------------------------------------------------------------


def run_intent_bench(cases: list[IntentCase], backend: BackendConfig) -> BenchReport:
    """Modality/Task/Joint exact-match rates plus the invalid rate; an INVALID
    parse scores false on all three EM checks."""
    rows = []
    for case in cases:
        outcome = parse_intent(case.prompt, backend)
        if outcome.valid:
            predicted_modalities = {m.value for m in outcome.intent.modalities}
            predicted_tasks = {t.value for t in outcome.intent.tasks}
            modality_em = predicted_modalities == case.gold_modalities
            task_em = predicted_tasks == case.gold_tasks
            rows.append(
                {
                    "case_id": case.case_id,
                    "ModalityEM": modality_em,
                    "TaskEM": task_em,
                    "JointEM": modality_em and task_em,
                    "Invalid": False,
                }
            )
        else:
            rows.append(
                {
                    "case_id": case.case_id,
                    "ModalityEM": False,
                    "TaskEM": False,
                    "JointEM": False,
                    "Invalid": True,
                }
            )
    return BenchReport(benchmark="intent", backend_id=backend.backend_id, cases=rows)


# -- preprocessing benchmark -------------------------------------------------------


def template_preproc_generator(catalog: TemplateCatalog | None = None) -> Callable[[PreprocCase], str]:
    """The deterministic generator: instantiate the case's tool template with
    the case-declared grounded inputs (real-tool argv, no mocks)."""
    catalog = catalog or TemplateCatalog.load()

    def generate(case: PreprocCase) -> str:
        node = StepNode(
            step_id=f"{case.modality.lower()}.{case.step}",
            modality=Modality(case.modality),
            tool_id=case.tool_id,
            depends_on=(),
            output_schema_id=catalog.tools[case.tool_id].output_schema_id,
            phase=Phase.PREPROCESS,
        )
        generator = TemplateGenerator(
            catalog=catalog, resolver=lambda step: dict(case.template_inputs), mock=False
        )
        return generator.generate(node, AttemptContext())

    return generate


def model_preproc_generator(backend) -> Callable[[PreprocCase], str]:
    """Model-backed generation route: the case's tree listing, tool tokens, and
    output root form the prompt; the backend's reply is scored as-is."""
    from ..executor import MODEL_GENERATION_INSTRUCTIONS, strip_code_fences
    from ..planner import TransportError, http_chat_complete

    def generate(case: PreprocCase) -> str:
        lines = [
            f"Step: {case.modality.lower()}.{case.step} using the {case.expected_tool_tokens[1]} tool.",
            f"Write outputs under: {case.expected_output_root}",
            "Directory listing:",
        ]
        lines.extend(f"  {entry}" for entry in case.directory_tree_listing)
        messages = [
            {"role": "system", "content": MODEL_GENERATION_INSTRUCTIONS},
            {"role": "user", "content": "\n".join(lines)},
        ]
        try:
            raw, _usage = http_chat_complete(messages, backend)
        except TransportError as exc:
            return f"# backend unreachable: {exc}\n"
        return strip_code_fences(raw)

    return generate


_STRING_LITERAL = re.compile(r"\"([^\"\n]*)\"|'([^'\n]*)'")


def extract_path_literals(script_text: str) -> list[str]:
    """Quoted, whitespace-free string literals containing a path separator
    (the documented approximation of the grounding check; whitespace excludes
    prose that happens to contain a slash)."""
    literals = []
    for match in _STRING_LITERAL.finditer(script_text):
        value = match.group(1) if match.group(1) is not None else match.group(2)
        if "/" in value and not re.search(r"\s", value):
            literals.append(value)
    return literals


def _grounded(literal: str, listing: list[str]) -> bool:
    if literal in listing:
        return True
    prefix = literal.rstrip("/") + "/"
    return any(entry.startswith(prefix) for entry in listing)


def _syntax_ok(case: PreprocCase, script_text: str) -> bool:
    argv = []
    with tempfile.NamedTemporaryFile("w", suffix=".py", delete=False) as fh:
        fh.write(script_text)
        script_path = fh.name
    try:
        for token in case.syntax_check_cmd:
            token = string.Template(token).safe_substitute(
                python=sys.executable, script=script_path
            )
            argv.append(token)
        if shutil.which(argv[0]) is None:
            raise BenchConfigError(f"syntax check command unavailable: {argv[0]!r}")
        return subprocess.run(argv, capture_output=True).returncode == 0
    finally:
        Path(script_path).unlink(missing_ok=True)


def run_preproc_bench(
    cases: list[PreprocCase], generator: Callable[[PreprocCase], str]
) -> BenchReport:
    """Five checks per generated script.

    Path literals under the expected output root count as output references;
    the rest are input references and every one of them must be grounded in the
    provided directory tree (the stricter reading of the grounding check).
    """
    rows = []
    for case in cases:
        script_text = generator(case)
        syntax = _syntax_ok(case, script_text)
        tool = all(token in script_text for token in case.expected_tool_tokens)
        literals = extract_path_literals(script_text)
        input_literals = [l for l in literals if not l.startswith(case.expected_output_root)]
        output_literals = [l for l in literals if l.startswith(case.expected_output_root)]
        in_path = all(_grounded(l, case.directory_tree_listing) for l in input_literals)
        out_path = len(output_literals) >= 1
        step_const = all(check_step_constraints(script_text, case.constraints))
        rows.append(
            {
                "case_id": case.case_id,
                "Syntax": syntax,
                "Tool": tool,
                "InPath": in_path,
                "OutPath": out_path,
                "StepConst": step_const,
                "AllPass": syntax and tool and in_path and out_path and step_const,
            }
        )
    return BenchReport(benchmark="preproc", backend_id="template", cases=rows)


# -- integration benchmark ----------------------------------------------------------


def materialize_tree(case: IntegrationCase, root: Path) -> None:
    for rel in case.tree:
        path = Path(root) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"fixture {rel}\n", encoding="utf-8")


def default_integrate(tree_root: Path, out_csv: Path, policy: str) -> None:
    """Reference integration route: scan the simulated tree with the catalog's
    terminal-output patterns and emit the manifest."""
    catalog = TemplateCatalog.load()
    roots, patterns = {}, {}
    for dir_name, modality in TREE_MODALITY_DIRS.items():
        candidate = Path(tree_root) / dir_name
        if candidate.is_dir():
            roots[modality] = candidate
            patterns[modality] = catalog.manifest_sources[modality].pattern
    scans = scan_outputs(
        roots, patterns, catalog.subject_pattern, base_dir=Path(tree_root)
    )
    manifest = build_manifest(
        scans, policy=policy, columns=catalog.manifest_columns, base_dir=Path(tree_root)
    )
    emit_csv(manifest, out_csv)


def _row_tuples(manifest: Manifest, columns: list[str]) -> set[tuple]:
    """Unique canonical rows; duplicate full rows collapse here, which is what
    lets the Duplicate-Free check fail independently of Row EM."""
    out = set()
    for row in manifest.rows:
        out.add(
            (row.key.subject_id, row.key.date)
            + tuple(row.paths.get(c, "") for c in columns)
        )
    return out


def score_integration_case(
    case: IntegrationCase, produced: Manifest, gold: Manifest, tree_root: Path
) -> dict:
    columns = sorted(set(produced.columns) | set(gold.columns))
    row_em = _row_tuples(produced, columns) == _row_tuples(gold, columns)

    produced_pairs = {(r.key.subject_id, r.key.date) for r in produced.rows}
    gold_pairs = {(r.key.subject_id, r.key.date) for r in gold.rows}
    overlap = len(produced_pairs & gold_pairs)
    precision = overlap / len(produced_pairs) if produced_pairs else 0.0
    recall = overlap / len(gold_pairs) if gold_pairs else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0

    non_empty = [
        cell for row in produced.rows for cell in row.paths.values() if cell.strip()
    ]
    existing = sum(1 for cell in non_empty if (Path(tree_root) / cell).exists())
    path_validity = existing / len(non_empty) if non_empty else 1.0

    gold_cells = {
        (r.key.subject_id, r.key.date): r.paths for r in gold.rows
    }
    produced_cells = {
        (r.key.subject_id, r.key.date): r.paths for r in produced.rows
    }
    hits = 0
    for subject, date, column in case.required_triples:
        gold_value = gold_cells.get((subject, date), {}).get(column, "")
        produced_value = produced_cells.get((subject, date), {}).get(column, "")
        hits += int(gold_value == produced_value)
    col_completeness = hits / len(case.required_triples) if case.required_triples else 1.0

    keys = [(r.key.subject_id, r.key.date) for r in produced.rows]
    duplicate_free = len(keys) == len(set(keys))

    return {
        "case_id": case.case_id,
        "RowEM": row_em,
        "SubjectDateF1": f1,
        "PathValidity": path_validity,
        "ColCompleteness": col_completeness,
        "DuplicateFree": duplicate_free,
        "AllPass": row_em
        and f1 == 1.0
        and path_validity == 1.0
        and col_completeness == 1.0
        and duplicate_free,
    }


def run_integration_bench(
    cases: list[IntegrationCase],
    integrate_fn: Callable[[Path, Path, str], None] | None = None,
) -> BenchReport:
    integrate_fn = integrate_fn or default_integrate
    rows = []
    for case in cases:
        with tempfile.TemporaryDirectory(prefix="npbench-") as tmp:
            tree_root = Path(tmp) / "tree"
            tree_root.mkdir()
            materialize_tree(case, tree_root)
            out_csv = Path(tmp) / "final_data_list.csv"
            integrate_fn(tree_root, out_csv, case.join_policy)
            produced = parse_csv(out_csv)
            gold_path = Path(tmp) / "gold.csv"
            gold_path.write_text(read_gold_csv(case), encoding="utf-8")
            gold = parse_csv(gold_path)
            rows.append(score_integration_case(case, produced, gold, tree_root))
    return BenchReport(benchmark="integration", backend_id="template", cases=rows)


# -- aggregation ---------------------------------------------------------------------


def aggregate(reports: list[BenchReport]) -> tuple[str, list[dict]]:
    """Mean rates per check per backend, as CSV-ready rows plus pretty text."""
    rows = []
    for report in reports:
        entry = {"benchmark": report.benchmark, "backend": report.backend_id}
        entry.update({k: round(v, 4) for k, v in report.aggregates().items()})
        rows.append(entry)
    lines = []
    for entry in rows:
        checks = ", ".join(
            f"{k}={v:.1%}" if isinstance(v, float) else f"{k}={v}"
            for k, v in entry.items()
            if k not in ("benchmark", "backend")
        )
        lines.append(f"{entry['benchmark']:12s} {entry['backend']:16s} {checks}")
    return "\n".join(lines), rows


def write_aggregate(rows: list[dict], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names: list[str] = []
    for row in rows:
        for key in row:
            if key not in names:
                names.append(key)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
