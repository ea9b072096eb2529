"""End-to-end pipeline behavior: the healthy matrix, stage gating, check
inventories, capability asymmetries, and value-interface resolution."""
import json

import numpy as np
import pytest

import difftrain
from difftrain.codec import DtypeTag, FailureReason, TensorArtifact, ArtifactSet
from difftrain.contract import BoundedConfig, Method, PpoValueMode, build_contract
from difftrain.pipeline import (
    BEHAVIORAL_CHECKS,
    CHECK_REGISTRY,
    NUMERIC_CHECKS,
    PREFLIGHT_CHECKS,
    SPEC_CHECKS,
    CheckStatus,
    StageStatus,
    applicable_artifact_checks,
    detect_ppo_value_mode,
    run_spec,
    run_preflight,
    verify,
)
from difftrain.report import without_timings
from difftrain.runner import RuntimeHandle

from conftest import STAGE_ORDER, config_for, first_failing, rec_of, run_pair, statuses, toy


class TestHealthyMatrix:
    @pytest.mark.parametrize("method", ["sft", "dpo", "ppo"])
    def test_overall_pass(self, healthy_reports, method):
        report = healthy_reports[method]
        assert report.overall == "pass"
        assert report.passed
        assert not report.candidate_missing
        for stage in STAGE_ORDER:
            assert report.stages[stage].status is StageStatus.PASS, stage

    @pytest.mark.parametrize("method", ["sft", "dpo", "ppo"])
    def test_no_gate_records_on_healthy_runs(self, healthy_reports, method):
        for stage in STAGE_ORDER:
            names = [r.name for r in healthy_reports[method].stages[stage].records]
            assert "stage_gate" not in names

    @pytest.mark.parametrize("method", ["sft", "dpo", "ppo"])
    def test_catch_all_checks_pass(self, healthy_reports, method):
        report = healthy_reports[method]
        assert rec_of(report, "spec", "spec_runtime").status is CheckStatus.PASS
        assert rec_of(report, "numeric", "numeric_runtime").status is CheckStatus.PASS
        assert rec_of(report, "behavioral", "behavior_runtime").status is CheckStatus.PASS

    @pytest.mark.parametrize("method", ["sft", "dpo", "ppo"])
    def test_emitted_names_follow_inventory_order(self, healthy_reports, method):
        report = healthy_reports[method]
        for stage, inventory in CHECK_REGISTRY.items():
            names = [r.name for r in report.stages[stage].records]
            assert set(names) <= set(inventory), stage
            positions = [inventory.index(n) for n in names]
            assert positions == sorted(positions), stage

    def test_preflight_statuses_per_method(self, healthy_reports):
        sft = statuses(healthy_reports["sft"], "preflight")
        assert sft["generation_supported"] is CheckStatus.PASS
        assert sft["ref_model_available"] is CheckStatus.NOT_SUPPORTED
        dpo = statuses(healthy_reports["dpo"], "preflight")
        assert dpo["generation_supported"] is CheckStatus.NOT_SUPPORTED
        assert dpo["ref_model_available"] is CheckStatus.PASS
        ppo = statuses(healthy_reports["ppo"], "preflight")
        assert ppo["generation_supported"] is CheckStatus.NOT_SUPPORTED
        assert ppo["ref_model_available"] is CheckStatus.NOT_SUPPORTED
        for report in healthy_reports.values():
            pre = statuses(report, "preflight")
            assert set(pre) == set(PREFLIGHT_CHECKS)
            for name in ("params_nonempty", "batch_nonempty", "forward_finite",
                         "contract_derivable", "grads_finite", "lr_finite",
                         "method_loss_finite"):
                assert pre[name] is CheckStatus.PASS, name

    def test_numeric_records_per_method(self, healthy_reports):
        sft = statuses(healthy_reports["sft"], "numeric")
        assert sft["forward_logits"] is CheckStatus.PASS
        assert sft["forward_loss"] is CheckStatus.PASS
        assert sft["method_loss"] is CheckStatus.PASS
        assert sft["gradient_loss"] is CheckStatus.PASS
        assert sft["gradient_norm"] is CheckStatus.PASS
        assert sft["lr_schedule"] is CheckStatus.PASS
        assert sft["gradient_accumulation"] is CheckStatus.NOT_SUPPORTED
        for absent in ("log_probs", "ref_log_probs", "token_logprobs", "advantages",
                       "returns", "forward_hidden_states"):
            assert absent not in sft

        dpo = statuses(healthy_reports["dpo"], "numeric")
        assert dpo["log_probs"] is CheckStatus.PASS
        assert dpo["ref_log_probs"] is CheckStatus.PASS
        assert "token_logprobs" not in dpo

        ppo = statuses(healthy_reports["ppo"], "numeric")
        for name in ("token_logprobs", "advantages", "returns", "method_loss"):
            assert ppo[name] is CheckStatus.PASS, name
        forward_loss = rec_of(healthy_reports["ppo"], "numeric", "forward_loss")
        assert forward_loss.status is CheckStatus.NOT_SUPPORTED
        assert "neither runtime reports a forward loss" in forward_loss.error

    def test_logits_check_carries_kl_metric(self, healthy_reports):
        rec = rec_of(healthy_reports["sft"], "numeric", "forward_logits")
        assert rec.metrics["max_token_kl"] == pytest.approx(0.0, abs=1e-12)
        assert rec.metrics["shape_match"] is True

    def test_lr_schedule_detail_shows_both_sides(self, healthy_reports):
        rec = rec_of(healthy_reports["sft"], "numeric", "lr_schedule")
        assert len(rec.detail["reference"]) == 8
        assert rec.detail["reference"] == rec.detail["candidate"]
        assert rec.detail["reference"][0] == pytest.approx(2.0)  # 4.0 base, 2 warmup

    def test_loss_curve_detail(self, healthy_reports):
        rec = rec_of(healthy_reports["sft"], "behavioral", "loss_curve")
        assert rec.status is CheckStatus.PASS
        assert rec.detail["step0_matches_gradient_loss"] == {
            "reference": True,
            "candidate": True,
        }
        ref_steps = rec.detail["reference"]
        assert len(ref_steps) == 2
        assert set(ref_steps[0]) == {"step", "lr", "loss", "grad_norm"}

    def test_report_metadata(self, healthy_reports):
        report = healthy_reports["sft"]
        assert report.schema_version == "1.0"
        assert report.engine_version == difftrain.__version__
        assert set(report.timings) == {"preflight", "spec", "numeric", "behavioral", "total"}
        assert all(t >= 0 for t in report.timings.values())

    def test_report_serializes_cleanly(self, healthy_reports):
        payload = healthy_reports["dpo"].to_json_dict()
        round_tripped = json.loads(json.dumps(payload, allow_nan=False))
        assert round_tripped["overall"] == "pass"
        assert round_tripped["contract"]["config"]["method"] == "dpo"

    @pytest.mark.parametrize("seed", [0, 7])
    def test_other_seeds_also_pass(self, seed):
        report = run_pair("sft", ref=toy("sft", seed=seed), cand=toy("sft", seed=seed), seed=seed)
        assert report.passed


class TestConfigurationVariants:
    def test_grad_accum_with_enough_rows(self):
        report = run_pair("sft", batch_size=4)
        rec = rec_of(report, "numeric", "gradient_accumulation")
        assert rec.status is CheckStatus.PASS
        assert rec.detail["micro_batch_invariant"] == "pass"
        assert report.passed

    def test_dpo_grad_accum_needs_four_pairs(self):
        report = run_pair("dpo", batch_size=2)
        rec = rec_of(report, "numeric", "gradient_accumulation")
        assert rec.status is CheckStatus.NOT_SUPPORTED
        assert "preference pairs" in rec.error
        passing = run_pair("dpo", batch_size=4)
        assert rec_of(passing, "numeric", "gradient_accumulation").status is CheckStatus.PASS

    def test_hidden_state_comparison_opt_in(self):
        report = run_pair("sft", compare_hidden_states=True)
        rec = rec_of(report, "numeric", "forward_hidden_states")
        assert rec.status is CheckStatus.PASS
        assert rec.detail["layer"].startswith("hidden_states/")
        assert report.passed

    def test_generation_disabled_by_zero_budget(self):
        report = run_pair("sft", max_new_tokens=0)
        assert rec_of(report, "preflight", "generation_supported").status is (
            CheckStatus.NOT_SUPPORTED
        )
        assert rec_of(report, "behavioral", "generation") is None
        assert report.passed

    def test_fp16_profile_also_passes_identical_toys(self):
        report = run_pair("sft", precision_profile="fp16_compare")
        assert report.passed


class TestValueInterfaceResolution:
    def test_hidden_mode_detected_from_reference(self):
        report = run_pair("ppo", ref=toy("ppo_hidden"), cand=toy("ppo_hidden"))
        assert report.contract.ppo_value_mode is PpoValueMode.HIDDEN_STATES_VALUE_HEAD
        assert report.passed

    def test_output_mode_reference_with_hidden_candidate_fails(self):
        # The contract resolves to the reference's interface; a candidate that
        # never materializes a values tensor cannot satisfy it.
        report = run_pair("ppo", ref=toy("ppo"), cand=toy("ppo_hidden"))
        assert not report.passed
        assert first_failing(report) == (
            "numeric",
            "method_loss",
            CheckStatus.HARD_FAIL,
            FailureReason.MISSING_ARTIFACT,
        )

    def test_hidden_mode_reference_with_output_candidate_passes(self):
        # The value head is exported either way, so the derivation can follow
        # the hidden-states interface on both sides.
        report = run_pair("ppo", ref=toy("ppo_hidden"), cand=toy("ppo"))
        assert report.contract.ppo_value_mode is PpoValueMode.HIDDEN_STATES_VALUE_HEAD
        assert report.passed

    def test_detection_rules(self):
        def tensor(name, shape):
            return TensorArtifact(name, shape, DtypeTag.F32, np.zeros(int(np.prod(shape))))

        forward = ArtifactSet("forward", {"values": tensor("values", (1, 6))})
        params = ArtifactSet("export_params", {})
        assert detect_ppo_value_mode(forward, params) is PpoValueMode.OUTPUT_FIELD

        forward = ArtifactSet("forward", {"hidden_states/0": tensor("hidden_states/0", (1, 6, 4))})
        params = ArtifactSet("export_params", {"params/v_head": tensor("params/v_head", (4,))})
        assert detect_ppo_value_mode(forward, params) is (
            PpoValueMode.HIDDEN_STATES_VALUE_HEAD
        )

        assert detect_ppo_value_mode(
            ArtifactSet("forward", {}), ArtifactSet("export_params", {})
        ) is PpoValueMode.MISSING


class TestGating:
    def test_spec_failure_blocks_numeric_and_behavioral(self):
        report = run_pair("sft", cand=toy("sft", fault="INIT_MODULE_MISSING"))
        assert report.stages["spec"].status is StageStatus.FAIL
        for stage, predecessor in (("numeric", "spec"), ("behavioral", "numeric")):
            summary = report.stages[stage]
            assert summary.status is StageStatus.BLOCKED
            assert len(summary.records) == 1
            gate = summary.records[0]
            assert gate.name == "stage_gate"
            assert gate.status is CheckStatus.BLOCKED
            assert gate.error == f"blocked: {predecessor} stage did not pass"
        assert not report.passed

    def test_unresolvable_reference_fails_preflight_completely(self):
        report = run_pair("sft", ref=toy("definitely-not-registered"))
        pre = report.stages["preflight"]
        assert pre.status is StageStatus.FAIL
        assert [r.name for r in pre.records] == list(PREFLIGHT_CHECKS)
        for rec in pre.records:
            assert rec.status is CheckStatus.FAIL
            assert rec.failure_kind is FailureReason.INIT_ERROR
            assert "reference runtime unresolvable" in rec.error
        assert report.stages["spec"].status is StageStatus.BLOCKED
        assert not report.candidate_missing

    def test_reference_fault_is_preflight_not_spec(self):
        report = run_pair("sft", ref=toy("sft", fault="NONFINITE_LOSS"))
        pre = statuses(report, "preflight")
        assert pre["forward_finite"] is CheckStatus.FAIL
        assert report.stages["preflight"].status is StageStatus.FAIL
        assert report.stages["spec"].status is StageStatus.BLOCKED

    def test_candidate_missing_short_circuits_spec(self):
        report = run_pair("sft", cand=toy("no-such-runtime"))
        assert report.candidate_missing
        spec = report.stages["spec"]
        assert [r.name for r in spec.records] == ["reference_reinit", "candidate_init"]
        init = spec.record("candidate_init")
        assert init.status is CheckStatus.FAIL
        assert init.failure_kind is FailureReason.INIT_ERROR

    def test_method_declaration_mismatch(self):
        config = config_for("sft")
        contract = build_contract(config)
        ref = RuntimeHandle(toy("sft"), "reference", config.probe_timeout)
        cand = RuntimeHandle(toy("sft"), "candidate", config.probe_timeout)
        real_spawn = cand.spawn

        def spawn_with_wrong_declaration():
            fault = real_spawn()
            cand.handshake["method"] = "dpo"
            return fault

        cand.spawn = spawn_with_wrong_declaration
        try:
            pre_summary, pre_data = run_preflight(ref, contract)
            assert pre_summary.passed
            summary, _, _ = run_spec(ref, cand, contract, pre_data)
        finally:
            ref.close()
            cand.close()
        rec = summary.record("runtime_contract")
        assert rec.status is CheckStatus.FAIL
        assert rec.failure_kind is FailureReason.SCHEMA_MISMATCH
        assert "dpo" in rec.error and "sft" in rec.error


class TestCapabilityAsymmetry:
    def test_reference_without_generation_passes_with_note(self):
        report = run_pair("sft", ref=toy("sft_nogen"))
        pre = rec_of(report, "preflight", "generation_supported")
        assert pre.status is CheckStatus.NOT_SUPPORTED
        gen = rec_of(report, "behavioral", "generation")
        assert gen.status is CheckStatus.PASS
        assert "nothing to hold the candidate to" in gen.detail["reason"]
        assert report.passed

    def test_candidate_without_generation_fails(self):
        report = run_pair("sft", cand=toy("sft_nogen"))
        gen = rec_of(report, "behavioral", "generation")
        assert gen.status is CheckStatus.FAIL
        assert gen.failure_kind is None
        assert "candidate runtime does not expose generation" in gen.error
        assert not report.passed


class TestDivergentRuntimes:
    def test_different_seeds_diverge_at_weight_loading(self):
        report = run_pair("sft", ref=toy("sft", seed=1), cand=toy("sft", seed=2))
        assert first_failing(report)[:2] == ("spec", "weight_loading")
        rec = rec_of(report, "spec", "weight_loading")
        assert rec.status is CheckStatus.FAIL
        assert "parameter" in rec.detail

    def test_overall_fail_requires_no_exception(self):
        # Totality smoke: a runtime that dies at its first real probe still
        # yields a structured report.
        report = run_pair("sft", cand=toy("sft", fault="CRASH_ON_GRADIENT"))
        assert report.overall == "fail"
        assert report.stages["numeric"].status is StageStatus.FAIL


class TestInventoryConsistency:
    @pytest.mark.parametrize("method", ["sft", "dpo", "ppo"])
    @pytest.mark.parametrize("hidden", [False, True])
    @pytest.mark.parametrize("max_new", [0, 8])
    @pytest.mark.parametrize("batch_size", [1, 4])
    def test_applicable_checks_mirror_contract(self, method, hidden, max_new, batch_size):
        config = BoundedConfig(
            method=Method(method),
            compare_hidden_states=hidden,
            max_new_tokens=max_new,
            batch_size=batch_size,
        )
        contract = build_contract(config)
        assert applicable_artifact_checks(contract) == contract.expected_artifact_names()

    def test_applicable_checks_are_known_names(self):
        known = set(NUMERIC_CHECKS) | set(SPEC_CHECKS) | set(BEHAVIORAL_CHECKS)
        for method in ("sft", "dpo", "ppo"):
            contract = build_contract(BoundedConfig(method=Method(method)))
            assert applicable_artifact_checks(contract) <= known


class TestDeterminism:
    def test_reports_identical_modulo_timings(self):
        a = run_pair("dpo")
        b = run_pair("dpo")
        assert without_timings(a.to_json_dict()) == without_timings(b.to_json_dict())

    def test_failure_reports_identical_modulo_timings(self):
        a = run_pair("sft", cand=toy("sft", fault="LOGITS_NOISE"))
        b = run_pair("sft", cand=toy("sft", fault="LOGITS_NOISE"))
        assert without_timings(a.to_json_dict()) == without_timings(b.to_json_dict())
