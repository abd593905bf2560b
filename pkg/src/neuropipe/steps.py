"""Subprocess entry points for the builtin INTEGRATE and TASK steps.

These run inside the same sandbox as every other step. The integrate step
resolves upstream outputs purely through the workflow registry (the blackboard
contract): it never walks another step's workspace directly.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .integrator import build_manifest, emit_csv, scan_outputs
from .planner import Modality
from .toolkit import TemplateCatalog


def _load_run_config(workflow_dir: Path) -> dict:
    path = workflow_dir / "run_config.json"
    if path.exists():
        return json.loads(path.read_text("utf-8"))
    return {}


def integrate_main(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="neuropipe-steps integrate")
    parser.add_argument("--workflow-dir", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--policy", default=None)
    args = parser.parse_args(argv)

    workflow_dir = Path(args.workflow_dir)
    run_config = _load_run_config(workflow_dir)
    catalog = TemplateCatalog.load(
        Path(run_config["catalog_path"]) if run_config.get("catalog_path") else None
    )
    policy = args.policy or run_config.get("join_policy", "UNION")
    subject_pattern = run_config.get("subject_pattern") or catalog.subject_pattern

    registry_doc = json.loads((workflow_dir / "registry.json").read_text("utf-8"))
    steps = registry_doc["steps"]

    roots: dict[Modality, Path] = {}
    patterns: dict[Modality, str] = {}
    for modality, source in catalog.manifest_sources.items():
        step_id = f"{modality.value.lower()}.{source.step_name}"
        record = steps.get(step_id)
        if record and record["status"] == "COMPLETED":
            rel = record["outputs"].get("out_dir", f"{step_id}/out")
            roots[modality] = workflow_dir / rel
            patterns[modality] = source.pattern

    notes: list[dict] = []
    scans = scan_outputs(
        roots,
        patterns,
        subject_pattern,
        base_dir=workflow_dir,
        skip_sink=lambda msg: notes.append({"what": "scan_skip", "detail": msg}),
    )
    manifest = build_manifest(
        scans,
        policy=policy,
        columns=catalog.manifest_columns,
        note_sink=lambda msg: notes.append({"what": "duplicate_resolved", "detail": msg}),
        base_dir=workflow_dir,
    )
    out_path = Path(args.out)
    emit_csv(manifest, out_path)
    if notes:
        notes_path = out_path.parent / "notes.jsonl"
        with notes_path.open("w", encoding="utf-8") as fh:
            for note in notes:
                fh.write(json.dumps(note, sort_keys=True) + "\n")
    print(f"manifest: {len(manifest.rows)} rows x {2 + len(manifest.columns)} columns")
    return 0


def task_main(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="neuropipe-steps task")
    parser.add_argument("--kind", required=True)
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        print(f"manifest not found: {manifest_path}", file=sys.stderr)
        return 1
    header, n_rows = "", 0
    with manifest_path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        n_rows = sum(1 for line in fh if line.strip())

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "task": args.kind,
        "manifest": manifest_path.name,
        "rows": n_rows,
        "columns": header.split(",") if header else [],
        "status": "configured",
    }
    (out_dir / "task_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"task {args.kind}: configured over {n_rows} subjects")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("integrate", "task"):
        print("usage: python -m neuropipe.steps {integrate|task} ...", file=sys.stderr)
        return 2
    if argv[0] == "integrate":
        return integrate_main(argv[1:])
    return task_main(argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
