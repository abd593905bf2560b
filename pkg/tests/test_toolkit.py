from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from neuropipe.mockdata import create_dataset
from neuropipe.planner import Modality
from neuropipe.toolkit import (
    GenerationError,
    SubjectContext,
    TemplateCatalog,
    expand_template,
    install_mock_suite,
    render_script,
    scan_subject_context,
)
from neuropipe.validator import validate_tree


@pytest.fixture(scope="module")
def catalog() -> TemplateCatalog:
    return TemplateCatalog.load()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory) -> Path:
    return create_dataset(tmp_path_factory.mktemp("data"), subjects=2, seed=3)


def run_stub(stub: Path, workspace: Path, data_root: Path, out_dir: Path) -> subprocess.CompletedProcess:
    workspace.mkdir(parents=True, exist_ok=True)
    return subprocess.run(
        [sys.executable, str(stub), "--data-root", str(data_root), "--out", str(out_dir)],
        cwd=workspace,
        capture_output=True,
        text=True,
    )


class TestExpandTemplate:
    def test_smri_step_order(self, catalog):
        nodes = expand_template(Modality.SMRI, None, catalog)
        assert [n.step_id for n in nodes] == [
            "smri.convert",
            "smri.recon_all",
            "smri.gtmseg",
            "smri.segment_bs",
        ]

    def test_dmri_without_reverse_pe_has_no_topup(self, catalog):
        nodes = expand_template(Modality.DMRI, SubjectContext(has_reverse_pe_b0=False), catalog)
        ids = [n.step_id for n in nodes]
        assert "dmri.topup" not in ids
        assert "dmri.eddy" in ids

    def test_dmri_with_reverse_pe_order(self, catalog):
        nodes = expand_template(Modality.DMRI, SubjectContext(has_reverse_pe_b0=True), catalog)
        ids = [n.step_id for n in nodes]
        assert ids == [
            "dmri.convert",
            "dmri.meta_extract",
            "dmri.topup",
            "dmri.eddy",
            "dmri.bet_mask",
            "dmri.bvec_rotate",
            "dmri.dti_fit",
            "dmri.csd_fod",
            "dmri.bbr_register",
            "dmri.tractography_sift2",
            "dmri.tck2connectome",
        ]

    def test_pet_suvr_cross_depends_on_smri_terminal(self, catalog):
        nodes = expand_template(Modality.PET, None, catalog)
        suvr = next(n for n in nodes if n.step_id == "pet.suvr")
        assert "smri.segment_bs" in suvr.depends_on

    def test_fmri_sequence(self, catalog):
        nodes = expand_template(Modality.FMRI, None, catalog)
        assert [n.step_id for n in nodes] == [
            "fmri.convert",
            "fmri.preproc_sess",
            "fmri.fast_segment",
            "fmri.nuisance_regress",
            "fmri.connectivity_matrix",
        ]


class TestSubjectContext:
    def test_reverse_pe_detected(self, dataset):
        assert scan_subject_context(dataset).has_reverse_pe_b0

    def test_no_reverse_pe(self, tmp_path):
        create_dataset(tmp_path, subjects=1, reverse_pe=False)
        assert not scan_subject_context(tmp_path).has_reverse_pe_b0


class TestRenderScript:
    def test_unresolved_placeholder_raises(self, catalog):
        with pytest.raises(GenerationError):
            render_script(catalog, "recon_all", {"exe": "[]"})

    def test_render_substitutes(self, catalog):
        text = render_script(
            catalog,
            "recon_all",
            {
                "exe": json.dumps(["recon-all"]),
                "data_root": "/d",
                "prev_dir": "/p",
                "out_dir": "/o",
                "extra_args": "[]",
            },
        )
        assert '"/p"' in text and "recon-all" in text


class TestMockSuite:
    def test_install_writes_executable_stubs(self, catalog, tmp_path):
        manifest = catalog.default_mock_manifest()
        installed = install_mock_suite(manifest, tmp_path / "tools")
        assert set(installed) == set(manifest.behaviors)
        for stub in installed.values():
            assert stub.exists()

    def test_every_success_tree_passes_its_schema(self, catalog, dataset, tmp_path):
        # Meta-test over the whole manifest: each mock tool's output tree
        # satisfies the tool's declared schema.
        manifest = catalog.default_mock_manifest()
        installed = install_mock_suite(manifest, tmp_path / "tools")
        for tool_id, stub in installed.items():
            workspace = tmp_path / "runs" / tool_id
            out_dir = workspace / "out"
            result = run_stub(stub, workspace, dataset, out_dir)
            assert result.returncode == 0, (tool_id, result.stderr)
            report = validate_tree(out_dir, catalog.schema_for_tool(tool_id))
            assert report.valid, (tool_id, report.feedback)

    def test_deterministic_output_trees(self, catalog, dataset, tmp_path):
        manifest = catalog.default_mock_manifest(seed=5)
        installed = install_mock_suite(manifest, tmp_path / "tools")
        stub = installed["suvr"]
        trees = []
        for run in ("one", "two"):
            workspace = tmp_path / run
            out_dir = workspace / "out"
            assert run_stub(stub, workspace, dataset, out_dir).returncode == 0
            trees.append(
                {
                    str(p.relative_to(out_dir)): p.read_bytes()
                    for p in sorted(out_dir.rglob("*"))
                    if p.is_file()
                }
            )
        assert trees[0] == trees[1]

    def test_scripted_exit_codes_by_attempt(self, catalog, dataset, tmp_path):
        manifest = catalog.default_mock_manifest().override(
            {"eddy": {"exit_codes": [1, 1, 0]}}
        )
        stub = install_mock_suite(manifest, tmp_path / "tools")["eddy"]
        workspace = tmp_path / "ws"
        out_dir = workspace / "out"
        codes = [run_stub(stub, workspace, dataset, out_dir).returncode for _ in range(3)]
        assert codes == [1, 1, 0]

    def test_frame_realign_mirrors_input_frame_count(self, catalog, tmp_path):
        data = create_dataset(tmp_path / "data", subjects=1, pet_frames=6)
        manifest = catalog.default_mock_manifest()
        stub = install_mock_suite(manifest, tmp_path / "tools")["frame_realign"]
        workspace = tmp_path / "ws"
        out_dir = workspace / "out"
        assert run_stub(stub, workspace, data, out_dir).returncode == 0
        frames = list(out_dir.rglob("frame-*_aligned.nii.gz"))
        assert len(frames) == 6

    def test_omit_outputs_behavior(self, catalog, dataset, tmp_path):
        manifest = catalog.default_mock_manifest().override(
            {"suvr": {"omit_outputs": True}}
        )
        stub = install_mock_suite(manifest, tmp_path / "tools")["suvr"]
        workspace = tmp_path / "ws"
        out_dir = workspace / "out"
        assert run_stub(stub, workspace, dataset, out_dir).returncode == 0
        assert not list(out_dir.rglob("suvr.nii.gz"))


class TestCatalogInvariants:
    def test_every_tool_resolves_schema(self, catalog):
        for tool in catalog.tools.values():
            assert tool.output_schema_id in catalog.schemas

    def test_fallback_ladder_walk(self, catalog):
        bet = catalog.tools["bet_mask"]
        assert bet.params_for_attempt(1) == {"f": "0.3"}
        assert bet.params_for_attempt(2) == {"f": "0.2"}
        assert bet.params_for_attempt(3) == {"f": "0.1"}
        assert bet.params_for_attempt(9) == {"f": "0.1"}  # ladder end repeats

    def test_no_ladder_reemits_identical(self, catalog):
        tool = catalog.tools["gtmseg"]
        assert tool.params_for_attempt(1) == tool.params_for_attempt(5)
