from __future__ import annotations

import pytest

from neuropipe.bench.harness import load_cases, model_preproc_generator, run_preproc_bench
from neuropipe.config import RunConfig
from neuropipe.engine import WorkflowEngine
from neuropipe.executor import AttemptContext, ModelGenerator, strip_code_fences
from neuropipe.graph import Phase, StepNode
from neuropipe.planner import Modality
from test_planner import ScriptedChatServer, http_backend

STEP = StepNode(
    step_id="smri.recon_all",
    modality=Modality.SMRI,
    tool_id="recon_all",
    depends_on=("smri.convert",),
    output_schema_id="recon_all.out",
    phase=Phase.PREPROCESS,
)


@pytest.fixture()
def chat_server():
    servers = []

    def start(responses):
        server = ScriptedChatServer(responses)
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.close()


class TestStripCodeFences:
    def test_plain_text_untouched(self):
        assert strip_code_fences("print('x')") == "print('x')\n"

    def test_fenced_block_unwrapped(self):
        raw = "```python\nprint('x')\n```"
        assert strip_code_fences(raw) == "print('x')\n"

    def test_fence_without_language(self):
        assert strip_code_fences("```\na = 1\n```\n") == "a = 1\n"


class TestModelGenerator:
    def test_prompt_carries_listing_and_context(self, chat_server):
        server = chat_server(["```python\nprint('generated')\n```"])
        usage_calls = []
        generator = ModelGenerator(
            backend=http_backend(server),
            resolver=lambda step: {"out_dir": "/ws/out", "data_root": "/data"},
            listing=lambda step: ["sub-001/ses-20200101/anat/sub-001_T1w.nii.gz"],
            usage_sink=lambda step_id, usage: usage_calls.append((step_id, usage.prompt_tokens)),
        )
        ctx = AttemptContext(attempt_index=2, prior_error="Traceback: boom")
        script = generator.generate(STEP, ctx)
        assert script == "print('generated')\n"
        sent = server.requests[0]["messages"][1]["content"]
        assert "smri.recon_all" in sent
        assert "sub-001_T1w.nii.gz" in sent
        assert "Traceback: boom" in sent
        assert usage_calls == [("smri.recon_all", 11)]

    def test_engine_model_mode_runs_generated_scripts(self, tmp_path, demo_dataset, chat_server):
        # a backend that answers every step with a trivially valid script would
        # still fail validation; intent parsing, though, must hit the backend
        server = chat_server(
            ['{"modalities": ["SMRI"], "tasks": ["CLASSIFICATION"]}', "```python\nprint('hi')\n```"]
        )
        config = RunConfig(
            mock=True,
            generation_mode="MODEL",
            max_exec_retries=0,
            backend=http_backend(server),
        )
        engine = WorkflowEngine(tmp_path / "ws", config)
        handle, phase = engine.run_prompt("classify sMRI", demo_dataset)
        # generated no-op scripts produce no outputs: every step escalates,
        # which is exactly the HITL contract for a weak backend
        assert phase != "DONE"
        assert handle.registry.pending_approvals()
        artifact = (handle.workflow_dir / "smri.convert" / "artifact.py").read_text()
        assert artifact == "print('hi')\n"


class TestModelPreprocBench:
    def test_scripted_backend_scores_like_any_generator(self, chat_server):
        case = next(c for c in load_cases("preproc") if c.case_id == "preproc_smri_convert_1")
        template_like = (
            '"""generated"""\n'
            "import subprocess\n"
            f'cmd = ["dcm2niix", "--data-root", "{case.template_inputs["data_root"]}",'
            f' "--out", "{case.template_inputs["out_dir"]}", "--bookkeeping", "dicom_dirs.txt",'
            ' "--compress", "y"]\n'
            "subprocess.run(cmd)\n"
        )
        server = chat_server([f"```python\n{template_like}```"])
        generator = model_preproc_generator(http_backend(server))
        report = run_preproc_bench([case], generator)
        assert report.cases[0]["AllPass"] is True

    def test_unreachable_backend_fails_cases_not_harness(self):
        from neuropipe.planner import BackendConfig

        backend = BackendConfig(
            kind="HTTP_CHAT",
            endpoint_url="http://127.0.0.1:1/dead",
            model_name="dead",
            timeout=0.2,
            max_parse_retries=1,
        )
        case = load_cases("preproc")[0]
        report = run_preproc_bench([case], model_preproc_generator(backend))
        assert report.cases[0]["AllPass"] is False
