"""Cross-boundary behavior against the real engine, driven purely through its
command line and report files: full verification passes under both precision
profiles, deliberate divergence is caught, and error text crosses the process
boundary verbatim all the way into failure classification.
"""
import io
import json
import subprocess
import sys
import textwrap

from difftrain_adapter import build_callbacks, encode_frame, iter_frames, serve

EXAMPLE_CMD = [sys.executable, "-m", "difftrain_adapter.example_runtime"]


def run_cli(*args, timeout=120):
    return subprocess.run(
        ["difftrain", *args], capture_output=True, text=True, timeout=timeout
    )


def run_verify(tmp_path, candidate_cmd, profile="bf16_compare", name="report"):
    config = tmp_path / f"{name}-config.json"
    config.write_text(
        json.dumps({"method": "sft", "precision_profile": profile})
    )
    out = tmp_path / f"{name}.json"
    proc = run_cli(
        "verify",
        "--config", str(config),
        "--reference", '{"toy": "sft"}',
        "--candidate", json.dumps({"cmd": candidate_cmd}),
        "--out", str(out),
    )
    report = json.loads(out.read_text()) if out.exists() else None
    return proc, report


def record(report, stage, name):
    matches = [r for r in report["stages"][stage]["records"] if r["name"] == name]
    assert matches, f"no {name} record in {stage} stage"
    return matches[0]


class TestCrossBoundaryVerification:
    def test_full_pass_under_bf16_with_console_script(self, tmp_path):
        proc, report = run_verify(
            tmp_path, ["difftrain-example-runtime"], "bf16_compare", "bf16"
        )
        assert proc.returncode == 0, proc.stderr
        assert report["overall"] == "pass"
        assert all(
            report["stages"][stage]["status"] == "pass"
            for stage in ("preflight", "spec", "numeric", "behavioral")
        )

    def test_full_pass_under_fp16(self, tmp_path):
        proc, report = run_verify(tmp_path, EXAMPLE_CMD, "fp16_compare", "fp16")
        assert proc.returncode == 0, proc.stderr
        assert report["overall"] == "pass"

    def test_seed_divergence_is_a_signal(self, tmp_path):
        proc, report = run_verify(
            tmp_path, EXAMPLE_CMD + ["--seed", "7"], name="diverged"
        )
        assert proc.returncode == 1
        assert report["overall"] == "fail"
        weights = record(report, "spec", "weight_loading")
        assert weights["status"] in ("fail", "hard_fail")

    def test_method_mismatch_message_crosses_verbatim(self, tmp_path):
        config = tmp_path / "dpo-config.json"
        config.write_text(json.dumps({"method": "dpo"}))
        out = tmp_path / "dpo.json"
        proc = run_cli(
            "verify",
            "--config", str(config),
            "--reference", '{"toy": "dpo"}',
            "--candidate", json.dumps({"cmd": EXAMPLE_CMD}),
            "--out", str(out),
        )
        assert proc.returncode == 1
        report = json.loads(out.read_text())
        init = record(report, "spec", "candidate_init")
        assert init["status"] in ("fail", "hard_fail")
        assert "runtime implements sft, config asked for dpo" in init["error"]


class TestErrorStringFidelity:
    MESSAGE = "'FakeTensor' object has no attribute 'backward'"

    def write_broken_runtime(self, tmp_path):
        script = tmp_path / "broken_runtime.py"
        script.write_text(textwrap.dedent(f"""
            import sys

            from difftrain_adapter import build_callbacks, serve

            callbacks = build_callbacks()

            def broken_forward(flags):
                raise RuntimeError({self.MESSAGE!r})

            callbacks.forward = broken_forward
            sys.exit(serve(callbacks))
        """))
        return script

    def test_exception_text_reaches_the_report_and_classifier(self, tmp_path):
        script = self.write_broken_runtime(tmp_path)
        reports_dir = tmp_path / "reports"
        reports_dir.mkdir()
        out = reports_dir / "broken.json"
        proc = run_cli(
            "verify",
            "--method", "sft",
            "--reference", '{"toy": "sft"}',
            "--candidate", json.dumps({"cmd": [sys.executable, str(script)]}),
            "--out", str(out),
        )
        assert proc.returncode == 1
        report = json.loads(out.read_text())
        assert report["overall"] == "fail"
        probe_fault = record(report, "numeric", "numeric_runtime")
        assert probe_fault["status"] == "hard_fail"
        assert probe_fault["failure_kind"] == "runtime_error"
        assert self.MESSAGE in probe_fault["error"]

        labels = run_cli("classify", "--reports-dir", str(reports_dir))
        assert labels.returncode == 0
        categories = [
            entry["category"]
            for entry in json.loads(labels.stdout)["labels"]["broken.json"]
        ]
        assert "boundary_seam" in categories


class TestProcessLifecycle:
    def test_handshake_then_shutdown_exits_zero(self):
        proc = subprocess.run(
            EXAMPLE_CMD,
            input=encode_frame({"op": "shutdown"}),
            capture_output=True,
            timeout=60,
        )
        assert proc.returncode == 0
        frames = list(iter_frames(proc.stdout))
        assert len(frames) == 2
        assert frames[0]["protocol"] == 1
        assert frames[1] == {"ok": True, "artifacts": {}}

    def test_eof_without_requests_exits_zero(self):
        proc = subprocess.run(
            EXAMPLE_CMD, input=b"", capture_output=True, timeout=60
        )
        assert proc.returncode == 0
        assert len(list(iter_frames(proc.stdout))) == 1

    def test_garbage_stdin_exits_nonzero(self):
        proc = subprocess.run(
            EXAMPLE_CMD,
            input=b"\x00\x00\x00\x04both",
            capture_output=True,
            timeout=60,
        )
        assert proc.returncode == 1

    def test_in_process_loop_matches_subprocess_behavior(self):
        script = encode_frame({"op": "shutdown"})
        out = io.BytesIO()
        code = serve(build_callbacks(), stdin=io.BytesIO(script), stdout=out)
        proc = subprocess.run(
            EXAMPLE_CMD, input=script, capture_output=True, timeout=60
        )
        assert code == proc.returncode == 0
        assert out.getvalue() == proc.stdout
