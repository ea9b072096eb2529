"""Every injectable fault, on every method it applies to, must surface at the
expected first-failing check and classify to the expected root cause."""
import time

import pytest

from difftrain.report import classify
from difftrain.toys import FAULT_METHODS, FaultId

from conftest import first_failing, run_pair, toy
from fault_matrix import CASES, EXPECTATIONS, FAULT_SEED, HANG_TIMEOUT_S


def case_id(case):
    exp, method = case
    return f"{exp.fault}-{method}"


class TestTableIntegrity:
    def test_table_covers_every_injectable_fault(self):
        tabled = {exp.fault for exp in EXPECTATIONS}
        injectable = {f.value for f in FaultId} - {"ARTIFACT_NEVER_PRODUCED"}
        assert tabled == injectable

    def test_method_applicability_matches_runtime_declarations(self):
        for exp in EXPECTATIONS:
            declared = tuple(m.value for m in FAULT_METHODS[FaultId(exp.fault)])
            assert exp.methods == declared, exp.fault


@pytest.mark.parametrize("case", CASES, ids=case_id)
def test_fault_surfaces_where_expected(case):
    exp, method = case
    started = time.monotonic()
    report = run_pair(
        method,
        ref=toy(method, seed=FAULT_SEED),
        cand=toy(method, seed=FAULT_SEED, fault=exp.fault),
        seed=FAULT_SEED,
        **exp.overrides,
    )
    elapsed = time.monotonic() - started

    assert report.overall == "fail"
    assert not report.candidate_missing
    assert first_failing(report) == (exp.stage, exp.check, exp.status, exp.kind)

    categories = {label.category for label in classify(report.to_json_dict())}
    assert exp.category in categories, (exp.fault, method, categories)

    if exp.fault == "HANG_ON_FORWARD":
        assert elapsed < HANG_TIMEOUT_S + 5.0


def test_unresolvable_candidate_is_its_own_category():
    report = run_pair("sft", cand=toy("nonexistent-runtime"))
    assert report.candidate_missing
    assert report.overall == "fail"
    labels = classify(report.to_json_dict())
    assert [label.category for label in labels] == ["artifact_never_produced"]
    assert labels[0].name == "candidate_init"


def test_inject_refuses_artifact_never_produced():
    from difftrain.contract import ConfigError, Method
    from difftrain.toys import FaultInjector, make_toy

    with pytest.raises(ConfigError, match="launch-descriptor fault"):
        FaultInjector(make_toy(Method.SFT, seed=FAULT_SEED), FaultId.ARTIFACT_NEVER_PRODUCED)
