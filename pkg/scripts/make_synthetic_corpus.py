#!/usr/bin/env python3
"""Fabricate a corpus of verification reports with known statistics.

The reports are synthetic but gating-consistent: a stage only runs when its
predecessor passed, failed stages carry one failing record, and downstream
stages carry a blocked gate record. That makes the corpus a fixture for the
aggregation identity (the product of the conditional stage rates equals the
first-attempt pass rate) and for exercising classification at volume without
spinning up runtimes.
"""
import argparse
import json
import random
import sys
from pathlib import Path

SCHEMA_VERSION = "1.0"
METHODS = ("sft", "dpo", "ppo")
STAGES = ("preflight", "spec", "numeric", "behavioral")

# (stage, check name, failure kind, error text) pools per failing stage.
FAILURE_POOL = {
    "spec": (
        ("candidate_init", "init_error", "ModuleNotFoundError: No module named 'flash_attn'"),
        ("weight_loading", "schema_mismatch", "candidate is missing params/out"),
        ("data_pipeline", "schema_mismatch", "batch/attention_mask dtype drifted to f32"),
    ),
    "numeric": (
        ("forward_logits", None, "max_abs_err 0.31 > 0.04"),
        ("method_loss", None, "max_abs_err 0.09 > 0.04"),
        ("gradient_loss", None, "cosine_sim 0.42 < 0.99"),
        ("lr_schedule", None, "max_abs_err 0.125 > 0.04"),
        ("numeric_runtime", "runtime_error",
         "RuntimeError: unsupported ScalarType BFloat16"),
    ),
    "behavioral": (
        ("loss_curve", None, "max_abs_err 1.7 > 0.04"),
        ("generation", None, "generated ids diverge at position 3"),
    ),
}

# Per-system profile: P(stage passes | predecessor passed), plus how often the
# system claims success regardless of the measured verdict.
SYSTEM_PROFILES = {
    "twin-frontier": {"spec": 0.95, "numeric": 0.85, "behavioral": 0.9, "overclaim": 0.05},
    "twin-midtier": {"spec": 0.8, "numeric": 0.6, "behavioral": 0.75, "overclaim": 0.2},
    "twin-budget": {"spec": 0.55, "numeric": 0.4, "behavioral": 0.6, "overclaim": 0.4},
}

CANDIDATE_MISSING_RATE = 0.04
SELF_REPORT_RATE = 0.85


def _record(name, status="pass", kind=None, error=None):
    return {
        "stage": None,
        "name": name,
        "status": status,
        "failure_kind": kind,
        "metrics": None,
        "error": error,
        "detail": None,
    }


def _stage(status, records):
    return {"status": status, "records": records}


def _fabricate_report(rng: random.Random, profile, method: str) -> dict:
    stages = {"preflight": _stage("pass", [_record("params_nonempty")])}
    candidate_missing = False

    if rng.random() < CANDIDATE_MISSING_RATE:
        candidate_missing = True
        failed_at = "spec"
        stages["spec"] = _stage("fail", [
            _record("reference_reinit"),
            _record("candidate_init", "fail", "init_error",
                    "runtime executable './candidate' not found"),
        ])
    else:
        failed_at = None
        for stage_name in ("spec", "numeric", "behavioral"):
            if rng.random() < profile[stage_name]:
                stages[stage_name] = _stage("pass", [_record(f"{stage_name}_ok")])
            else:
                name, kind, error = rng.choice(FAILURE_POOL[stage_name])
                status = "hard_fail" if kind else "fail"
                stages[stage_name] = _stage("fail", [_record(name, status, kind, error)])
                failed_at = stage_name
                break

    if failed_at:
        for later in STAGES[STAGES.index(failed_at) + 1:]:
            stages[later] = _stage("blocked", [
                _record("stage_gate", "blocked", None,
                        f"blocked: {failed_at} stage did not pass"),
            ])

    overall = "pass" if failed_at is None else "fail"
    return {
        "overall": overall,
        "candidate_missing": candidate_missing,
        "contract": {"config": {"method": method, "seed": rng.randrange(10_000)}},
        "stages": stages,
        "timings": {"total": round(rng.uniform(0.5, 30.0), 3)},
        "schema_version": SCHEMA_VERSION,
        "engine_version": "0.1.0",
    }


def build_corpus(rng: random.Random, tasks_per_system: int):
    """Returns (meta rows, reports by attempt id) for every profiled system."""
    rows = []
    reports = {}
    for system_id, profile in SYSTEM_PROFILES.items():
        for t in range(tasks_per_system):
            task_id = f"task-{t:04d}"
            method = METHODS[t % len(METHODS)]
            for attempt in range(rng.randint(1, 3)):
                attempt_id = f"{system_id}-{task_id}-a{attempt}"
                report = _fabricate_report(rng, profile, method)
                row = {
                    "attempt_id": attempt_id,
                    "system_id": system_id,
                    "task_id": task_id,
                    "report": f"{attempt_id}.json",
                }
                if rng.random() < SELF_REPORT_RATE:
                    claimed = report["overall"] == "pass"
                    if not claimed and rng.random() < profile["overclaim"]:
                        claimed = True
                    row["self_reported_pass"] = claimed
                rows.append(row)
                reports[attempt_id] = report
    return rows, reports


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--tasks-per-system", type=int, default=60)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rows, reports = build_corpus(random.Random(args.seed), args.tasks_per_system)

    out_dir = Path(args.out_dir)
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    for attempt_id, report in reports.items():
        text = json.dumps(report, sort_keys=True, indent=2) + "\n"
        (reports_dir / f"{attempt_id}.json").write_text(text, encoding="utf-8")
    meta_path = out_dir / "meta.jsonl"
    meta_path.write_text(
        "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows), encoding="utf-8"
    )
    print(f"{len(reports)} report(s) under {reports_dir}, metadata in {meta_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
