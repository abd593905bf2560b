"""Command-line interface: workflow runs, resumption, the HTTP service, the
benchmark suites, group statistics, and the fusion stacker.

Exit codes: 0 success, 1 workflow halted/incomplete, 2 usage error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "mock", None) is not None:
        config.mock = args.mock
    if getattr(args, "approve_all", False):
        config.approve_all = True
    if getattr(args, "parallelism", None):
        config.parallelism = args.parallelism
    return config


def _print_status(record: dict) -> None:
    print(f"workflow {record['workflow_id']}  phase={record['phase']}")
    print(f"  prompt: {record['prompt']}")
    for step_id, step in sorted(record["steps"].items()):
        line = f"  {step_id:32s} {step['status']:18s} attempts={step['attempts']}"
        if step.get("last_error"):
            line += f"  error={step['last_error'].splitlines()[0][:60]}"
        print(line)
    pending = [a for a in record.get("approvals", {}).values() if a["decision"] == "PENDING"]
    for approval in pending:
        print(f"  pending approval {approval['approval_id']} on {approval['step_id']}")


def cmd_run(args) -> int:
    from .engine import IntentParseError, WorkflowEngine

    config = _load_config(args)
    engine = WorkflowEngine(Path(args.workspace), config)
    try:
        handle, phase = engine.run_prompt(args.prompt, Path(args.data_root))
    except IntentParseError as exc:
        print(f"could not parse intent: {exc}", file=sys.stderr)
        return 1
    _print_status(handle.registry.record.to_dict())
    return 0 if phase == "DONE" else 1


def cmd_resume(args) -> int:
    from .engine import WorkflowEngine
    from .registry import ResumeMismatchError

    config = _load_config(args)
    engine = WorkflowEngine(Path(args.workspace), config)
    try:
        handle, completed = engine.resume(args.workflow_id)
    except ResumeMismatchError as exc:
        print(f"refusing to resume: {exc}", file=sys.stderr)
        return 1
    print(f"resuming {args.workflow_id}, skipping {len(completed)} completed step(s)")
    phase = engine.run(handle, wait_for_approvals=False)
    _print_status(handle.registry.record.to_dict())
    return 0 if phase == "DONE" else 1


def cmd_status(args) -> int:
    registry_path = Path(args.workspace) / args.workflow_id / "registry.json"
    if not registry_path.exists():
        print(f"unknown workflow {args.workflow_id}", file=sys.stderr)
        return 1
    _print_status(json.loads(registry_path.read_text("utf-8")))
    return 0


def cmd_serve(args) -> int:
    from .gateway import serve

    console_dir = Path(args.console) if args.console else None
    serve(args.port, Path(args.workspace), _load_config(args), console_dir, host=args.host)
    return 0


def cmd_bench(args) -> int:
    from .bench import (
        aggregate,
        load_cases,
        run_integration_bench,
        run_intent_bench,
        run_preproc_bench,
        template_preproc_generator,
        write_aggregate,
    )
    from .planner import BackendConfig

    backend = None
    if args.backend:
        backend = BackendConfig(**json.loads(Path(args.backend).read_text("utf-8")))

    cases_dir = Path(args.cases) if args.cases else None
    if args.suite == "intent":
        report = run_intent_bench(load_cases("intent", cases_dir), backend or BackendConfig())
    elif args.suite == "preproc":
        if backend is not None and backend.kind == "HTTP_CHAT":
            from .bench.harness import model_preproc_generator

            generator = model_preproc_generator(backend)
        else:
            generator = template_preproc_generator()
        report = run_preproc_bench(load_cases("preproc", cases_dir), generator)
    else:
        report = run_integration_bench(load_cases("integration", cases_dir))

    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    out_dir = Path(args.out) if args.out else Path("bench/reports") / stamp
    report.write(out_dir)
    text, rows = aggregate([report])
    write_aggregate(rows, out_dir / "summary.csv")
    print(text)
    print(f"reports written to {out_dir}")
    failures = [c["case_id"] for c in report.cases if not c.get("AllPass", c.get("JointEM", True))]
    return 0 if not failures else 1


def cmd_stats(args) -> int:
    from .analysis import (
        emit_figure_data,
        load_features,
        load_labels,
        stats_report,
        write_stats_csv,
    )

    labels = load_labels(Path(args.labels))
    features = load_features(Path(args.features))
    rows, matched = stats_report(labels, features, args.formula, window_days=args.window)
    out_dir = Path(args.out)
    write_stats_csv(rows, out_dir / "stats_report.csv")
    figure_features = [args.figure] if args.figure else features.columns[:1]
    for feature in figure_features:
        emit_figure_data(matched, features, feature, "SCATTER_FIT", out_dir)
        emit_figure_data(matched, features, feature, "GROUP_BOX", out_dir)
    print(f"{len(rows)} term rows over {len(matched)} matched subjects -> {out_dir}")
    return 0


def cmd_stack(args) -> int:
    from .ensemble import LogitTable, run_configuration, write_metrics_csv

    table = LogitTable.from_csv(Path(args.logits))
    reports = run_configuration(
        table, args.config, seed=args.seed, cohort=args.cohort.upper()
    )
    out_path = Path(args.out)
    write_metrics_csv(reports, out_path)
    for name in sorted(reports):
        averaged = reports[name].averaged
        cells = "  ".join(f"{k}={v:.4f}" for k, v in averaged.items())
        print(f"{name:16s} {cells}")
    print(f"metrics written to {out_path}")
    return 0


def cmd_demo_data(args) -> int:
    from .mockdata import create_dataset

    create_dataset(Path(args.out), subjects=args.subjects, seed=args.seed)
    print(f"synthetic dataset with {args.subjects} subject(s) at {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuropipe")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="submit and execute a workflow")
    run.add_argument("--prompt", required=True)
    run.add_argument("--data-root", required=True)
    run.add_argument("--workspace", default="workspace")
    run.add_argument("--mock", action="store_true", default=None)
    run.add_argument("--approve-all", action="store_true")
    run.add_argument("--parallelism", type=int)
    run.add_argument("--config")
    run.set_defaults(func=cmd_run)

    resume = sub.add_parser("resume", help="resume an interrupted workflow")
    resume.add_argument("workflow_id")
    resume.add_argument("--workspace", default="workspace")
    resume.add_argument("--approve-all", action="store_true")
    resume.add_argument("--config")
    resume.set_defaults(func=cmd_resume)

    status = sub.add_parser("status", help="print a workflow's registry state")
    status.add_argument("workflow_id")
    status.add_argument("--workspace", default="workspace")
    status.set_defaults(func=cmd_status)

    serve = sub.add_parser("serve", help="start the HTTP gateway")
    serve.add_argument("--port", type=int, default=8421)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--workspace", default="workspace")
    serve.add_argument("--console", help="directory of built console assets")
    serve.add_argument("--config")
    serve.add_argument("--mock", action="store_true", default=None)
    serve.set_defaults(func=cmd_serve)

    bench = sub.add_parser("bench", help="run a benchmark suite")
    bench.add_argument("suite", choices=["intent", "preproc", "integration"])
    bench.add_argument("--cases", help="case directory (default: bundled)")
    bench.add_argument("--backend", help="backend config JSON (intent suite)")
    bench.add_argument("--out")
    bench.set_defaults(func=cmd_bench)

    stats = sub.add_parser("stats", help="covariate-adjusted group statistics")
    stats.add_argument("--labels", required=True)
    stats.add_argument("--features", required=True)
    stats.add_argument("--formula", default="y ~ age + sex + diagnosis")
    stats.add_argument("--window", type=int, default=30)
    stats.add_argument("--figure")
    stats.add_argument("--out", required=True)
    stats.set_defaults(func=cmd_stats)

    stack = sub.add_parser("stack", help="late-fusion stacking over logit tables")
    stack.add_argument("--logits", required=True)
    stack.add_argument("--config", required=True, choices=["smri", "pet", "smri_pet", "four"])
    stack.add_argument("--seed", type=int, default=0)
    stack.add_argument("--cohort", default="union", choices=["union", "intersection"])
    stack.add_argument("--out", required=True)
    stack.set_defaults(func=cmd_stack)

    demo = sub.add_parser("demo-data", help="write a synthetic demo dataset")
    demo.add_argument("--out", required=True)
    demo.add_argument("--subjects", type=int, default=3)
    demo.add_argument("--seed", type=int, default=0)
    demo.set_defaults(func=cmd_demo_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
