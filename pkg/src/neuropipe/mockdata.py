"""Synthetic desk-scale dataset generator: a few subjects with raw-side files
and BIDS-style sidecars for all four imaging modalities plus tabular
covariates. Deterministic for a fixed seed."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
from pathlib import Path

from .validator import Endianness, NiftiHeader, write_nifti


def _header(ndim: int) -> NiftiHeader:
    dim = [1] * 8
    dim[0] = ndim
    for i, size in enumerate((8, 8, 8, 10)[:ndim], start=1):
        dim[i] = size
    return NiftiHeader(
        sizeof_hdr=348,
        dim=dim,
        datatype=16,
        bitpix=32,
        pixdim=[1.0] * 8,
        vox_offset=352.0,
        magic=b"n+1\x00",
        endianness=Endianness.LITTLE,
    )


def _payload(seed: int, rel: str) -> bytes:
    return hashlib.sha256(f"{seed}:{rel}".encode()).digest()


def create_dataset(
    root: Path,
    subjects: int = 3,
    seed: int = 0,
    reverse_pe: bool = True,
    pet_frames: int = 4,
    start_date: str = "2020-01-15",
) -> Path:
    root = Path(root)
    first = _dt.date.fromisoformat(start_date)
    for index in range(1, subjects + 1):
        sub = f"{index:03d}"
        date = (first + _dt.timedelta(days=index - 1)).strftime("%Y%m%d")
        session = root / f"sub-{sub}" / f"ses-{date}"

        anat = session / "anat"
        t1 = anat / f"sub-{sub}_T1w.nii.gz"
        write_nifti(t1, _header(3), _payload(seed, str(t1)))
        (anat / f"sub-{sub}_T1w.json").write_text(
            json.dumps({"Modality": "MR", "SeriesDescription": "MPRAGE"}, indent=2), "utf-8"
        )

        func = session / "func"
        bold = func / f"sub-{sub}_task-rest_bold.nii.gz"
        write_nifti(bold, _header(4), _payload(seed, str(bold)))
        (func / f"sub-{sub}_task-rest_bold.json").write_text(
            json.dumps({"RepetitionTime": 3.0, "TaskName": "rest"}, indent=2), "utf-8"
        )

        dwi = session / "dwi"
        ap = dwi / f"sub-{sub}_dir-AP_dwi.nii.gz"
        write_nifti(ap, _header(4), _payload(seed, str(ap)))
        (dwi / f"sub-{sub}_dir-AP_dwi.json").write_text(
            json.dumps(
                {"PhaseEncodingDirection": "j-", "TotalReadoutTime": 0.05}, indent=2
            ),
            "utf-8",
        )
        (dwi / f"sub-{sub}_dwi.bval").write_text("0 1000 1000 1000\n", "utf-8")
        (dwi / f"sub-{sub}_dwi.bvec").write_text(
            "0 1 0 0\n0 0 1 0\n0 0 0 1\n", "utf-8"
        )
        if reverse_pe:
            pa = dwi / f"sub-{sub}_dir-PA_epi.nii.gz"
            write_nifti(pa, _header(3), _payload(seed, str(pa)))
            (dwi / f"sub-{sub}_dir-PA_epi.json").write_text(
                json.dumps(
                    {"PhaseEncodingDirection": "j", "TotalReadoutTime": 0.05}, indent=2
                ),
                "utf-8",
            )

        pet = session / "pet"
        for frame in range(1, pet_frames + 1):
            frame_path = pet / f"frame-{frame}.nii.gz"
            write_nifti(frame_path, _header(3), _payload(seed, str(frame_path)))
        (pet / f"sub-{sub}_pet.json").write_text(
            json.dumps({"Radiotracer": "tau", "FrameDuration": 300}, indent=2), "utf-8"
        )

        tabular = session / "tabular"
        tabular.mkdir(parents=True, exist_ok=True)
        (tabular / "covariates.csv").write_text(
            f"SubjectID,Age,Sex\n{sub},{70 + index},{'F' if index % 2 else 'M'}\n", "utf-8"
        )
    return root
