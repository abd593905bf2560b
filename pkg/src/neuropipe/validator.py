"""Structural integrity checks: directory schemas, NIfTI-1 headers, script constraints.

Validation is header/structure-only by design: voxel payloads are never read
beyond existence and size checks, so validating a tree stays O(files).
"""
from __future__ import annotations

import fnmatch
import gzip
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

NIFTI1_HEADER_SIZE = 348
NIFTI2_SIZEOF_HDR = 540
GZIP_MAGIC = b"\x1f\x8b"
VALID_MAGICS = (b"n+1\x00", b"ni1\x00")

# datatype code -> required bitpix, per the public NIfTI-1 table
DATATYPE_BITPIX = {
    1: 1,      # binary
    2: 8,      # uint8
    4: 16,     # int16
    8: 32,     # int32
    16: 32,    # float32
    32: 64,    # complex64
    64: 64,    # float64
    128: 24,   # rgb24
    256: 8,    # int8
    512: 16,   # uint16
    768: 32,   # uint32
    1024: 64,  # int64
    1280: 64,  # uint64
    1536: 128, # float128
    1792: 128, # complex128
}


class NiftiError(Exception):
    """Base class for header parse failures."""


class ShortHeaderError(NiftiError):
    """Fewer than 348 bytes available."""


class NotNiftiError(NiftiError):
    """sizeof_hdr is not 348 under either byte order."""


class Nifti2UnsupportedError(NiftiError):
    """sizeof_hdr decodes to 540: a NIfTI-2 file, which this parser rejects."""


class HeaderInvariantError(NiftiError):
    """Header parsed but violates a NIfTI-1 invariant (dim range, magic, bitpix)."""


class SchemaError(Exception):
    """Raised when an output schema is malformed (e.g. escaping patterns)."""


class Endianness(Enum):
    LITTLE = "<"
    BIG = ">"


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: list[int]
    datatype: int
    bitpix: int
    pixdim: list[float]
    vox_offset: float
    magic: bytes
    endianness: Endianness

    @property
    def ndim(self) -> int:
        return self.dim[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.dim[1 : self.dim[0] + 1])


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == GZIP_MAGIC:
        return gzip.decompress(data)
    return data


def parse_nifti_header(data: bytes, *, strict: bool = True) -> NiftiHeader:
    """Decode the fixed 348-byte NIfTI-1 header from ``data``.

    Endianness is auto-detected by decoding sizeof_hdr both ways and keeping
    whichever reads 348. Gzip-compressed input is transparently decompressed.
    With ``strict`` the dim/magic/bitpix invariants are enforced.
    """
    data = _maybe_gunzip(bytes(data))
    if len(data) < NIFTI1_HEADER_SIZE:
        raise ShortHeaderError(f"short header ({len(data)} bytes, need {NIFTI1_HEADER_SIZE})")

    endianness = None
    for order in (Endianness.LITTLE, Endianness.BIG):
        (sizeof_hdr,) = struct.unpack_from(order.value + "i", data, 0)
        if sizeof_hdr == NIFTI1_HEADER_SIZE:
            endianness = order
            break
        if sizeof_hdr == NIFTI2_SIZEOF_HDR:
            raise Nifti2UnsupportedError("NIfTI-2 unsupported (sizeof_hdr=540)")
    if endianness is None:
        raise NotNiftiError("not a NIfTI-1 header (sizeof_hdr != 348 under either byte order)")

    e = endianness.value
    dim = list(struct.unpack_from(e + "8h", data, 40))
    (datatype,) = struct.unpack_from(e + "h", data, 70)
    (bitpix,) = struct.unpack_from(e + "h", data, 72)
    pixdim = list(struct.unpack_from(e + "8f", data, 76))
    (vox_offset,) = struct.unpack_from(e + "f", data, 108)
    magic = data[344:348]

    header = NiftiHeader(
        sizeof_hdr=NIFTI1_HEADER_SIZE,
        dim=dim,
        datatype=datatype,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        magic=magic,
        endianness=endianness,
    )
    if strict:
        _check_invariants(header)
    return header


def _check_invariants(h: NiftiHeader) -> None:
    if not 1 <= h.dim[0] <= 7:
        raise HeaderInvariantError(f"dim[0]={h.dim[0]} outside 1..7")
    for i in range(1, h.dim[0] + 1):
        if h.dim[i] < 1:
            raise HeaderInvariantError(f"dim[{i}]={h.dim[i]} < 1")
    if h.magic not in VALID_MAGICS:
        raise HeaderInvariantError(f"bad magic {h.magic!r}")
    expected = DATATYPE_BITPIX.get(h.datatype)
    if expected is not None and h.bitpix != expected:
        raise HeaderInvariantError(
            f"bitpix {h.bitpix} inconsistent with datatype {h.datatype} (expected {expected})"
        )


def serialize_header(h: NiftiHeader) -> bytes:
    """Pack a header back to 348 bytes; fields this parser does not model are zero."""
    e = h.endianness.value
    buf = bytearray(NIFTI1_HEADER_SIZE)
    struct.pack_into(e + "i", buf, 0, NIFTI1_HEADER_SIZE)
    struct.pack_into(e + "8h", buf, 40, *h.dim)
    struct.pack_into(e + "h", buf, 70, h.datatype)
    struct.pack_into(e + "h", buf, 72, h.bitpix)
    struct.pack_into(e + "8f", buf, 76, *h.pixdim)
    struct.pack_into(e + "f", buf, 108, h.vox_offset)
    buf[344:348] = h.magic
    return bytes(buf)


def write_nifti(path: Path, header: NiftiHeader, payload: bytes = b"") -> None:
    """Write header+payload, gzip-compressed (deterministically) for .gz names."""
    raw = serialize_header(header) + payload
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)


@dataclass
class NiftiConstraint:
    """Header-level bounds applied to files matching a schema pattern."""

    min_ndim: int | None = None
    max_ndim: int | None = None
    datatypes: list[int] | None = None

    def check(self, h: NiftiHeader) -> str | None:
        if self.min_ndim is not None and h.ndim < self.min_ndim:
            return f"ndim {h.ndim} < {self.min_ndim}"
        if self.max_ndim is not None and h.ndim > self.max_ndim:
            return f"ndim {h.ndim} > {self.max_ndim}"
        if self.datatypes is not None and h.datatype not in self.datatypes:
            return f"datatype {h.datatype} not in {self.datatypes}"
        return None


def _check_pattern(pattern: str) -> str:
    p = pattern.replace("\\", "/")
    if p.startswith("/") or any(part == ".." for part in p.split("/")):
        raise SchemaError(f"pattern escapes the checked root: {pattern!r}")
    return p


@dataclass
class OutputSchema:
    schema_id: str
    required_paths: list[str] = field(default_factory=list)
    forbidden_paths: list[str] = field(default_factory=list)
    nifti_checks: list[tuple[str, NiftiConstraint]] = field(default_factory=list)
    min_file_bytes: dict[str, int] = field(default_factory=dict)
    closed_world: bool = False

    def __post_init__(self) -> None:
        self.required_paths = [_check_pattern(p) for p in self.required_paths]
        self.forbidden_paths = [_check_pattern(p) for p in self.forbidden_paths]
        self.nifti_checks = [(_check_pattern(p), c) for p, c in self.nifti_checks]
        self.min_file_bytes = {_check_pattern(p): n for p, n in self.min_file_bytes.items()}

    @classmethod
    def from_dict(cls, schema_id: str, d: dict) -> OutputSchema:
        return cls(
            schema_id=schema_id,
            required_paths=list(d.get("required", [])),
            forbidden_paths=list(d.get("forbidden", [])),
            nifti_checks=[
                (pat, NiftiConstraint(**cons)) for pat, cons in d.get("nifti_checks", [])
            ],
            min_file_bytes=dict(d.get("min_file_bytes", {})),
            closed_world=bool(d.get("closed_world", False)),
        )


@dataclass
class ValidationReport:
    schema_id: str
    status: str  # VALID | INVALID
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)
    header_failures: list[tuple[str, str]] = field(default_factory=list)
    feedback: str = ""

    @property
    def valid(self) -> bool:
        return self.status == "VALID"

    def to_dict(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "status": self.status,
            "missing": self.missing,
            "unexpected": self.unexpected,
            "header_failures": [list(t) for t in self.header_failures],
            "feedback": self.feedback,
        }


def _relative_files(root: Path) -> list[str]:
    return sorted(
        str(p.relative_to(root)).replace("\\", "/") for p in root.rglob("*") if p.is_file()
    )


def validate_tree(root: Path, schema: OutputSchema) -> ValidationReport:
    """Check a directory tree against ``schema``; read-only and deterministic."""
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"validation root is not a readable directory: {root}")
    files = _relative_files(root)

    missing = sorted(
        pat for pat in schema.required_paths if not any(fnmatch.fnmatch(f, pat) for f in files)
    )

    unexpected: list[str] = []
    if schema.closed_world:
        allowed = schema.required_paths + [p for p, _ in schema.nifti_checks]
        unexpected = sorted(
            f for f in files if not any(fnmatch.fnmatch(f, pat) for pat in allowed)
        )
    for pat in schema.forbidden_paths:
        unexpected.extend(sorted(f for f in files if fnmatch.fnmatch(f, pat)))

    header_failures: list[tuple[str, str]] = []
    for pat, constraint in schema.nifti_checks:
        for f in (f for f in files if fnmatch.fnmatch(f, pat)):
            try:
                header = parse_nifti_header((root / f).read_bytes())
            except NiftiError as exc:
                header_failures.append((f, str(exc)))
                continue
            reason = constraint.check(header)
            if reason is not None:
                header_failures.append((f, reason))
    for pat, min_bytes in schema.min_file_bytes.items():
        for f in (f for f in files if fnmatch.fnmatch(f, pat)):
            size = (root / f).stat().st_size
            if size < min_bytes:
                header_failures.append((f, f"file is {size} bytes, minimum {min_bytes}"))
    header_failures.sort()

    invalid = bool(missing or unexpected or header_failures)
    report = ValidationReport(
        schema_id=schema.schema_id,
        status="INVALID" if invalid else "VALID",
        missing=missing,
        unexpected=sorted(set(unexpected)),
        header_failures=header_failures,
    )
    if invalid:
        lines = [f"output validation failed for schema '{schema.schema_id}':"]
        lines.extend(f"  missing required pattern '{m}'" for m in report.missing)
        lines.extend(f"  unexpected path '{u}'" for u in report.unexpected)
        lines.extend(f"  header check failed for '{p}': {r}" for p, r in report.header_failures)
        report.feedback = "\n".join(lines)
    return report


class ConstraintKind(Enum):
    REQUIRED_SUBSTRING = "REQUIRED_SUBSTRING"
    REQUIRED_FILENAME_PATTERN = "REQUIRED_FILENAME_PATTERN"
    REQUIRED_PAIR = "REQUIRED_PAIR"
    FORBIDDEN_SUBSTRING = "FORBIDDEN_SUBSTRING"


@dataclass
class Constraint:
    kind: ConstraintKind
    args: list[str]

    @classmethod
    def from_dict(cls, d: dict) -> Constraint:
        return cls(kind=ConstraintKind(d["kind"]), args=list(d["args"]))


def check_step_constraints(script_text: str, constraints: list[Constraint]) -> list[bool]:
    """Evaluate each declarative predicate against a generated script's text."""
    import re

    results = []
    for c in constraints:
        if c.kind is ConstraintKind.REQUIRED_SUBSTRING:
            results.append(c.args[0] in script_text)
        elif c.kind is ConstraintKind.REQUIRED_FILENAME_PATTERN:
            results.append(re.search(c.args[0], script_text) is not None)
        elif c.kind is ConstraintKind.REQUIRED_PAIR:
            results.append(c.args[0] in script_text and c.args[1] in script_text)
        elif c.kind is ConstraintKind.FORBIDDEN_SUBSTRING:
            results.append(c.args[0] not in script_text)
        else:  # pragma: no cover - closed enum
            raise ValueError(f"unknown constraint kind {c.kind}")
    return results
