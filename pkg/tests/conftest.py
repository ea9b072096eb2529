"""Shared fixtures and report-inspection helpers."""
import pytest

from difftrain.contract import BoundedConfig, Method
from difftrain.pipeline import CheckStatus, VerificationReport, verify

STAGE_ORDER = ("preflight", "spec", "numeric", "behavioral")


def config_for(method, **overrides) -> BoundedConfig:
    return BoundedConfig(method=Method(method), **overrides)


def toy(name, seed=None, fault=None) -> dict:
    desc = {"toy": name}
    if seed is not None:
        desc["seed"] = seed
    if fault is not None:
        desc["fault"] = fault
    return desc


def run_pair(method, ref=None, cand=None, **overrides) -> VerificationReport:
    """Verify two toys of the same method; descriptors default to clean toys."""
    config = config_for(method, **overrides)
    return verify(config, ref or toy(method), cand or toy(method))


def rec_of(report: VerificationReport, stage: str, name: str):
    return report.stages[stage].record(name)


def first_failing(report: VerificationReport):
    """(stage, name, status, failure_kind) of the first failing check in
    pipeline order, skipping gate records; None when everything passed."""
    for stage in STAGE_ORDER:
        summary = report.stages.get(stage)
        if summary is None:
            continue
        for rec in summary.records:
            if rec.name == "stage_gate":
                continue
            if rec.status in (CheckStatus.FAIL, CheckStatus.HARD_FAIL):
                return (stage, rec.name, rec.status, rec.failure_kind)
    return None


def statuses(report: VerificationReport, stage: str) -> dict:
    return {rec.name: rec.status for rec in report.stages[stage].records}


@pytest.fixture(scope="session")
def healthy_reports() -> dict:
    """One default-config verification per method, shared across tests. These
    runs are deterministic, so caching them is safe."""
    return {method: run_pair(method) for method in ("sft", "dpo", "ppo")}
