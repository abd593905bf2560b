"""Per-run engine configuration, loadable from a single JSON document."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .planner import BackendConfig


@dataclass
class RunConfig:
    mock: bool = True
    parallelism: int | None = None  # default: number of modalities in the graph
    max_exec_retries: int = 3
    step_timeout: float | None = None  # None: per-tool catalog default
    generation_mode: str = "TEMPLATE"  # TEMPLATE | MODEL
    approve_all: bool = False
    join_policy: str = "UNION"  # UNION | INTERSECTION
    seed: int = 0
    catalog_path: str | None = None
    subject_pattern: str | None = None  # None: catalog default
    backend: BackendConfig = field(default_factory=BackendConfig)
    mock_overrides: dict = field(default_factory=dict)
    env_allowlist: list[str] = field(default_factory=lambda: ["PATH", "HOME", "LANG", "LC_ALL"])

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        backend = d.pop("backend", None)
        config = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        if backend:
            config.backend = BackendConfig(**backend)
        return config

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))
