"""Declarative step-template catalog over tool adapters, plus the deterministic
mock tool suite that stands in for the real neuroimaging binaries at desk scale.

Real-tool mode swaps the adapters' argv for actual binaries on PATH; the engine
is agnostic to which mode is active.
"""
from __future__ import annotations

import json
import string
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .graph import Phase, StepNode
from .planner import Modality
from .validator import OutputSchema


class CatalogError(Exception):
    pass


class GenerationError(Exception):
    """A script template could not be instantiated (unresolved placeholder)."""


@dataclass
class ToolAdapter:
    tool_id: str
    template_file: str
    exe_real: list[str]
    output_schema_id: str
    default_timeout: float
    mock_timeout: float
    params: dict[str, str] = field(default_factory=dict)
    fallback_ladders: list[dict[str, str]] = field(default_factory=list)
    engine_args: dict[str, str] = field(default_factory=dict)
    builtin: bool = False

    def params_for_attempt(self, attempt_index: int) -> dict[str, str]:
        """Walk the fallback ladder one rung per retry; rung 0 is the default set."""
        if attempt_index <= 1 or not self.fallback_ladders:
            return dict(self.params)
        rung = min(attempt_index - 2, len(self.fallback_ladders) - 1)
        return dict(self.fallback_ladders[rung])


@dataclass
class StepTemplate:
    step_name: str
    tool_id: str
    requires: list[str] = field(default_factory=list)
    cross_requires: list[Modality] = field(default_factory=list)
    phase: Phase = Phase.PREPROCESS
    condition: str | None = None


@dataclass
class ManifestSource:
    step_name: str
    column: str
    pattern: str


@dataclass
class MockBehavior:
    tool_id: str
    exit_codes: list[int] = field(default_factory=lambda: [0])
    sleep: float = 0.0
    outputs: list[dict] = field(default_factory=list)
    root_files: list[dict] = field(default_factory=list)
    special: str | None = None
    mirror_target: str | None = None
    omit_outputs: bool = False

    def to_spec(self) -> dict:
        return {
            "exit_codes": self.exit_codes,
            "sleep": self.sleep,
            "outputs": self.outputs,
            "root_files": self.root_files,
            "special": self.special,
            "mirror_target": self.mirror_target,
            "omit_outputs": self.omit_outputs,
        }


@dataclass
class MockManifest:
    behaviors: dict[str, MockBehavior]
    seed: int = 0

    def override(self, overrides: dict[str, dict]) -> "MockManifest":
        merged = {t: MockBehavior(**{**b.__dict__}) for t, b in self.behaviors.items()}
        for tool_id, patch in overrides.items():
            base = merged.get(tool_id) or MockBehavior(tool_id=tool_id)
            for key, value in patch.items():
                setattr(base, key, value)
            merged[tool_id] = base
        return MockManifest(behaviors=merged, seed=self.seed)


@dataclass
class SubjectContext:
    """Series-level facts the planner reads from BIDS sidecars before building
    the graph; only reverse phase-encoding presence is interpreted today."""

    has_reverse_pe_b0: bool = False


class TemplateCatalog:
    def __init__(self, raw: dict, base_dir: Path | None = None):
        self.raw = raw
        self._base_dir = base_dir
        self.manifest_columns: list[str] = list(raw["manifest_columns"])
        self.subject_pattern: str = raw["subject_pattern"]
        self.tools: dict[str, ToolAdapter] = {}
        for tool_id, spec in raw["tools"].items():
            self.tools[tool_id] = ToolAdapter(
                tool_id=tool_id,
                template_file=spec["template"],
                exe_real=list(spec.get("exe_real", [])),
                output_schema_id=spec["output_schema_id"],
                default_timeout=float(spec.get("default_timeout", 3600)),
                mock_timeout=float(spec.get("mock_timeout", 120)),
                params=dict(spec.get("params", {})),
                fallback_ladders=[dict(d) for d in spec.get("fallback_ladders", [])],
                engine_args=dict(spec.get("engine_args", {})),
                builtin=bool(spec.get("builtin", False)),
            )
        self.templates: dict[Modality, list[StepTemplate]] = {}
        for mod_name, steps in raw["templates"].items():
            modality = Modality(mod_name)
            chain = []
            seen: set[str] = set()
            for entry in steps:
                for req in entry.get("requires", []):
                    if req not in seen:
                        raise CatalogError(
                            f"{mod_name}.{entry['step']} requires {req!r} before it is defined"
                        )
                template = StepTemplate(
                    step_name=entry["step"],
                    tool_id=entry["tool"],
                    requires=list(entry.get("requires", [])),
                    cross_requires=[Modality(m) for m in entry.get("cross_requires", [])],
                    phase=Phase(entry.get("phase", "PREPROCESS")),
                    condition=entry.get("condition"),
                )
                if template.tool_id not in self.tools:
                    raise CatalogError(f"unknown tool {template.tool_id!r}")
                chain.append(template)
                seen.add(template.step_name)
            self.templates[modality] = chain
        self.schemas: dict[str, OutputSchema] = {
            sid: OutputSchema.from_dict(sid, body) for sid, body in raw["schemas"].items()
        }
        for tool in self.tools.values():
            if tool.output_schema_id not in self.schemas:
                raise CatalogError(f"tool {tool.tool_id} names unknown schema {tool.output_schema_id}")
        self.manifest_sources: dict[Modality, ManifestSource] = {
            Modality(m): ManifestSource(
                step_name=body["step"], column=body["column"], pattern=body["pattern"]
            )
            for m, body in raw["manifest_sources"].items()
        }
        self._template_cache: dict[str, str] = {}

    @classmethod
    def load(cls, path: Path | None = None) -> "TemplateCatalog":
        if path is None:
            raw = json.loads(
                resources.files("neuropipe.data").joinpath("catalog.json").read_text("utf-8")
            )
            return cls(raw)
        path = Path(path)
        return cls(json.loads(path.read_text("utf-8")), base_dir=path.parent)

    def template_text(self, tool: ToolAdapter) -> str:
        if tool.template_file not in self._template_cache:
            if self._base_dir is not None:
                candidate = self._base_dir / "templates" / tool.template_file
                if candidate.exists():
                    self._template_cache[tool.template_file] = candidate.read_text("utf-8")
                    return self._template_cache[tool.template_file]
            text = (
                resources.files("neuropipe.data")
                .joinpath(f"templates/{tool.template_file}")
                .read_text("utf-8")
            )
            self._template_cache[tool.template_file] = text
        return self._template_cache[tool.template_file]

    def terminal_step_id(self, modality: Modality) -> str:
        chain = self.templates[modality]
        return f"{modality.value.lower()}.{chain[-1].step_name}"

    def schema_for_tool(self, tool_id: str) -> OutputSchema:
        return self.schemas[self.tools[tool_id].output_schema_id]

    def default_mock_manifest(self, seed: int = 0) -> MockManifest:
        behaviors = {}
        for tool_id, body in self.raw.get("mock_manifest", {}).items():
            behaviors[tool_id] = MockBehavior(
                tool_id=tool_id,
                outputs=[dict(o) for o in body.get("outputs", [])],
                root_files=[dict(o) for o in body.get("root_files", [])],
                special=body.get("special"),
                mirror_target=body.get("mirror_target"),
            )
        return MockManifest(behaviors=behaviors, seed=seed)


def expand_template(
    modality: Modality, subject_ctx: SubjectContext | None, catalog: TemplateCatalog
) -> list[StepNode]:
    """Instantiate one modality's step chain as graph nodes.

    Conditional steps whose condition does not hold are dropped and any
    dependency on them is spliced through to their own prerequisites.
    Cross-modality requirements attach to the prerequisite modality's terminal
    node, so everything downstream inherits the dependency transitively.
    """
    if modality not in catalog.templates:
        raise CatalogError(f"no step template for modality {modality.value}")
    ctx = subject_ctx or SubjectContext()
    nodes: list[StepNode] = []
    remapped: dict[str, list[str]] = {}
    prefix = modality.value.lower()
    for template in catalog.templates[modality]:
        if template.condition == "reverse_pe_b0" and not ctx.has_reverse_pe_b0:
            remapped[template.step_name] = list(template.requires)
            continue
        deps: list[str] = []
        for req in template.requires:
            spliced = _resolve_through(req, remapped)
            deps.extend(f"{prefix}.{name}" for name in spliced)
        for cross in template.cross_requires:
            deps.append(catalog.terminal_step_id(cross))
        nodes.append(
            StepNode(
                step_id=f"{prefix}.{template.step_name}",
                modality=modality,
                tool_id=template.tool_id,
                depends_on=tuple(sorted(set(deps))),
                output_schema_id=catalog.tools[template.tool_id].output_schema_id,
                phase=template.phase,
            )
        )
    return nodes


def _resolve_through(name: str, remapped: dict[str, list[str]]) -> list[str]:
    if name not in remapped:
        return [name]
    out: list[str] = []
    for upstream in remapped[name]:
        out.extend(_resolve_through(upstream, remapped))
    return out


def scan_subject_context(data_root: Path) -> SubjectContext:
    """Read dwi sidecars under the dataset and report whether any session has a
    reverse phase-encoded b=0 series (both 'x' and 'x-' style directions)."""
    directions: set[str] = set()
    for sidecar in Path(data_root).glob("sub-*/ses-*/dwi/*.json"):
        try:
            meta = json.loads(sidecar.read_text("utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        direction = meta.get("PhaseEncodingDirection")
        if isinstance(direction, str):
            directions.add(direction)
    reverse = any(d.rstrip("-") == other and d != other for d in directions for other in directions)
    return SubjectContext(has_reverse_pe_b0=reverse)


def render_script(catalog: TemplateCatalog, tool_id: str, mapping: dict[str, str]) -> str:
    """Substitute placeholders into a tool's script template.

    Unresolved placeholders raise GenerationError, which the executor counts as
    a failed attempt.
    """
    tool = catalog.tools[tool_id]
    template = string.Template(catalog.template_text(tool))
    try:
        return template.substitute(mapping)
    except (KeyError, ValueError) as exc:
        raise GenerationError(f"unresolved placeholder for tool {tool_id}: {exc}") from exc


def params_to_args(params: dict[str, str]) -> list[str]:
    args: list[str] = []
    for key in sorted(params):
        args.extend([f"--{key}", params[key]])
    return args


_STUB_TEMPLATE = '''#!/usr/bin/env python3
# Mock stand-in for tool {tool_id!r}: scripted, deterministic, desk-scale.
import glob
import gzip
import hashlib
import json
import os
import sys
import time
import struct

TOOL_ID = {tool_id!r}
SEED = {seed!r}
SPEC = json.loads({spec_json!r})


def parse_args(argv):
    args = {{}}
    key = None
    for token in argv:
        if token.startswith("--"):
            key = token[2:]
            args.setdefault(key, "")
        elif key is not None:
            args[key] = token
            key = None
    return args


def attempt_index():
    path = ".mock_attempt_" + TOOL_ID
    count = 0
    if os.path.exists(path):
        with open(path) as fh:
            count = int(fh.read().strip() or 0)
    count += 1
    with open(path, "w") as fh:
        fh.write(str(count))
    return count


def stamp(rel):
    return hashlib.sha256(("%s:%s:%s" % (SEED, TOOL_ID, rel)).encode()).hexdigest()


def nifti_bytes(ndim, rel):
    dim = [1] * 8
    dim[0] = ndim
    for i, size in enumerate((4, 4, 4, 6)[:ndim], start=1):
        dim[i] = size
    buf = bytearray(348)
    struct.pack_into("<i", buf, 0, 348)
    struct.pack_into("<8h", buf, 40, *dim)
    struct.pack_into("<h", buf, 70, 16)
    struct.pack_into("<h", buf, 72, 32)
    struct.pack_into("<8f", buf, 76, *([1.0] * 8))
    struct.pack_into("<f", buf, 108, 352.0)
    buf[344:348] = b"n+1\\x00"
    return bytes(buf) + bytes.fromhex(stamp(rel))[:16]


def write_file(path, kind, rel, size):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if kind in ("nifti3d", "nifti4d"):
        raw = nifti_bytes(3 if kind == "nifti3d" else 4, rel)
        if path.endswith(".gz"):
            raw = gzip.compress(raw, mtime=0)
        with open(path, "wb") as fh:
            fh.write(raw)
    elif kind == "bytes":
        blob = (stamp(rel).encode() * (size // 64 + 1))[:size]
        with open(path, "wb") as fh:
            fh.write(blob)
    else:
        with open(path, "w") as fh:
            fh.write("%s %s %s\\n" % (TOOL_ID, rel, stamp(rel)))


def main():
    args = parse_args(sys.argv[1:])
    if args.get("stage") == "sift":
        # Second half of a two-command step: outputs already written by the
        # first command of this attempt, so do not consume another attempt.
        sys.stdout.write("%s: sift stage ok\\n" % TOOL_ID)
        sys.exit(0)
    data_root = args.get("data-root", "")
    out_dir = args.get("out", "out")
    attempt = attempt_index()
    codes = SPEC.get("exit_codes") or [0]
    code = codes[min(attempt - 1, len(codes) - 1)]
    if SPEC.get("sleep"):
        time.sleep(SPEC["sleep"])
    if code != 0:
        sys.stderr.write("%s: simulated failure (attempt %d)\\n" % (TOOL_ID, attempt))
        sys.exit(code)
    sessions = sorted(
        os.path.relpath(p, data_root)
        for p in glob.glob(os.path.join(data_root, "sub-*", "ses-*"))
    )
    if not SPEC.get("omit_outputs"):
        for spec in SPEC.get("root_files") or []:
            rel = spec["path"]
            write_file(os.path.join(out_dir, rel), spec.get("kind", "text"), rel, spec.get("size", 64))
        for session in sessions:
            sub = os.path.normpath(session).split(os.sep)[0].split("-", 1)[1]
            if SPEC.get("special") == "mirror_pet_frames":
                frames = sorted(glob.glob(os.path.join(data_root, session, "pet", "frame-*.nii*")))
                for index in range(1, len(frames) + 1):
                    rel = os.path.join(session, SPEC["mirror_target"].replace("{{index}}", str(index)))
                    write_file(os.path.join(out_dir, rel), "nifti3d", rel, 0)
            else:
                for spec in SPEC.get("outputs") or []:
                    rel = os.path.join(session, spec["path"].replace("{{sub}}", sub))
                    write_file(os.path.join(out_dir, rel), spec.get("kind", "text"), rel, spec.get("size", 64))
    sys.stdout.write("%s: ok (attempt %d, %d sessions)\\n" % (TOOL_ID, attempt, len(sessions)))
    sys.exit(0)


main()
'''


def install_mock_suite(manifest: MockManifest, directory: Path) -> dict[str, Path]:
    """Write one self-contained executable stub per tool into ``directory``.

    Stubs read their attempt index from a counter file in the invoking step's
    workspace (their CWD), then perform the scripted behavior.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    installed: dict[str, Path] = {}
    for tool_id, behavior in sorted(manifest.behaviors.items()):
        stub_path = directory / f"{tool_id}.py"
        stub_path.write_text(
            _STUB_TEMPLATE.format(
                tool_id=tool_id,
                seed=manifest.seed,
                spec_json=json.dumps(behavior.to_spec(), sort_keys=True),
            ),
            encoding="utf-8",
        )
        stub_path.chmod(0o755)
        installed[tool_id] = stub_path
    return installed


def exe_argv(catalog: TemplateCatalog, tool_id: str, mock: bool, tools_dir: Path | None) -> list[str]:
    """The argv prefix a template's EXE placeholder resolves to."""
    tool = catalog.tools[tool_id]
    if tool.builtin:
        kind = "integrate" if tool_id == "integrate_manifest" else "task"
        return [sys.executable, "-m", "neuropipe.steps", kind]
    if mock:
        if tools_dir is None:
            raise CatalogError("mock mode requires an installed tool suite directory")
        return [sys.executable, str(Path(tools_dir) / f"{tool_id}.py")]
    return list(tool.exe_real)
