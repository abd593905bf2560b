"""Data integration: align subjects across modality outputs and emit the
consolidated manifest (final_data_list.csv) consumed by downstream tasks.

Manifest cells hold paths relative to a declared base directory so the CSV is
byte-deterministic and portable across workspaces.
"""
from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

from .planner import Modality

KEY_COLUMNS = ["SubjectID", "Date"]

MODALITY_COLUMNS = {
    Modality.SMRI: "sMRI_path",
    Modality.PET: "PET_path",
    Modality.FMRI: "fMRI_path",
    Modality.DMRI: "DTI_path",
    Modality.TABULAR: "Tabular_path",
}


class IntegrationError(Exception):
    pass


_ALIASES: dict[str, str] | None = None


def column_aliases() -> dict[str, str]:
    """Case-insensitive synonym table mapping foreign column spellings onto the
    canonical manifest columns."""
    global _ALIASES
    if _ALIASES is None:
        raw = json.loads(
            resources.files("neuropipe.data").joinpath("column_aliases.json").read_text("utf-8")
        )
        _ALIASES = {k.lower(): v for k, v in raw.items()}
    return _ALIASES


def canonical_column(name: str) -> str:
    return column_aliases().get(name.strip().lower(), name.strip())


def normalize_date(token: str) -> str:
    """Accept YYYYMMDD or YYYY-MM-DD; always emit YYYY-MM-DD."""
    token = token.strip()
    for fmt in ("%Y-%m-%d", "%Y%m%d"):
        try:
            return _dt.datetime.strptime(token, fmt).strftime("%Y-%m-%d")
        except ValueError:
            continue
    raise IntegrationError(f"unparseable date {token!r}")


@dataclass(frozen=True, order=True)
class SubjectKey:
    subject_id: str
    date: str  # ISO-8601

    def __post_init__(self) -> None:
        if not self.subject_id:
            raise IntegrationError("empty subject_id")
        _dt.date.fromisoformat(self.date)


@dataclass
class ManifestRow:
    key: SubjectKey
    paths: dict[str, str] = field(default_factory=dict)  # canonical column -> path or ""


@dataclass
class Manifest:
    rows: list[ManifestRow]
    columns: list[str]
    base_dir: Path | None = None

    def cells(self) -> list[list[str]]:
        table = []
        for row in self.rows:
            table.append(
                [row.key.subject_id, row.key.date]
                + [row.paths.get(col, "") for col in self.columns]
            )
        return table

    def keys(self) -> set[SubjectKey]:
        return {row.key for row in self.rows}


def scan_outputs(
    roots: dict[Modality, Path],
    patterns: dict[Modality, str],
    subject_pattern: str,
    base_dir: Path,
    skip_sink: Callable[[str], None] | None = None,
) -> dict[Modality, list[tuple[SubjectKey, str]]]:
    """Discover per-subject terminal artifacts under each modality root.

    subject_id and date come from path components via the configured
    named-capture pattern; unparseable paths are reported to ``skip_sink`` and
    skipped, never fatal. Returned paths are relative to ``base_dir``.
    """
    matcher = re.compile(subject_pattern)
    base_dir = Path(base_dir)
    found: dict[Modality, list[tuple[SubjectKey, str]]] = {}
    for modality, root in roots.items():
        root = Path(root)
        entries: list[tuple[SubjectKey, str]] = []
        if root.is_dir():
            for path in sorted(root.glob(patterns[modality])):
                rel_for_match = str(path.relative_to(root)).replace("\\", "/")
                match = matcher.search(rel_for_match)
                if not match:
                    if skip_sink:
                        skip_sink(f"{modality.value}: no subject/date in {rel_for_match!r}")
                    continue
                try:
                    key = SubjectKey(
                        subject_id=match.group("subject"),
                        date=normalize_date(match.group("date")),
                    )
                except (IndexError, IntegrationError) as exc:
                    if skip_sink:
                        skip_sink(f"{modality.value}: {exc}")
                    continue
                try:
                    rel = str(path.relative_to(base_dir))
                except ValueError:
                    rel = str(path)
                entries.append((key, rel.replace("\\", "/")))
        found[modality] = entries
    return found


def build_manifest(
    scans: dict[Modality, list[tuple[SubjectKey, str]]],
    policy: str = "UNION",
    columns: list[str] | None = None,
    note_sink: Callable[[str], None] | None = None,
    base_dir: Path | None = None,
) -> Manifest:
    """Join per-modality scans into one row per SubjectKey.

    UNION keeps every key seen anywhere (absent cells empty); INTERSECTION
    keeps keys present in every scanned modality. Duplicates within a modality
    resolve to the lexicographically smallest path, with a note. The result is
    independent of input list ordering.
    """
    if policy not in ("UNION", "INTERSECTION"):
        raise IntegrationError(f"unknown join policy {policy!r}")
    columns = columns or [MODALITY_COLUMNS[m] for m in scans]

    per_modality: dict[Modality, dict[SubjectKey, str]] = {}
    for modality, entries in scans.items():
        chosen: dict[SubjectKey, str] = {}
        for key, path in sorted(entries):
            if key in chosen:
                keep, drop = sorted([chosen[key], path])
                if note_sink and chosen[key] != path:
                    note_sink(
                        f"duplicate {modality.value} entry for ({key.subject_id}, {key.date}): "
                        f"kept {keep!r}, dropped {drop!r}"
                    )
                chosen[key] = keep
            else:
                chosen[key] = path
        per_modality[modality] = chosen

    if policy == "UNION":
        keys: set[SubjectKey] = set()
        for chosen in per_modality.values():
            keys.update(chosen)
    else:
        keys = None  # type: ignore[assignment]
        for chosen in per_modality.values():
            keys = set(chosen) if keys is None else keys & set(chosen)
        keys = keys or set()

    rows = []
    for key in sorted(keys):
        paths = {}
        for modality, chosen in per_modality.items():
            column = MODALITY_COLUMNS[modality]
            if column in columns:
                paths[column] = chosen.get(key, "")
        if any(paths.values()):
            rows.append(ManifestRow(key=key, paths=paths))
    return Manifest(rows=rows, columns=list(columns), base_dir=base_dir)


def emit_csv(manifest: Manifest, path: Path) -> None:
    """RFC-4180 CSV, UTF-8, LF line endings, sorted rows: byte-deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(KEY_COLUMNS + manifest.columns)
    for row in manifest.cells():
        writer.writerow(row)
    path.write_text(buffer.getvalue(), encoding="utf-8")


def parse_csv(path: Path, canonicalize: bool = True) -> Manifest:
    """Load a manifest CSV; foreign column spellings are canonicalized and rows
    sorted, matching how the integration benchmark compares tables."""
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if canonicalize:
            header = [canonical_column(h) for h in header]
        try:
            sub_i = header.index("SubjectID")
            date_i = header.index("Date")
        except ValueError as exc:
            raise IntegrationError(f"manifest lacks key columns: {header}") from exc
        columns = [h for i, h in enumerate(header) if i not in (sub_i, date_i)]
        rows = []
        for record in reader:
            if not record or all(not cell.strip() for cell in record):
                continue
            key = SubjectKey(
                subject_id=record[sub_i].strip(), date=normalize_date(record[date_i])
            )
            paths = {
                header[i]: record[i].strip()
                for i in range(len(header))
                if i not in (sub_i, date_i) and i < len(record)
            }
            rows.append(ManifestRow(key=key, paths=paths))
    rows.sort(key=lambda r: r.key)
    return Manifest(rows=rows, columns=columns)
