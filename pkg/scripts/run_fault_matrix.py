#!/usr/bin/env python3
"""Sweep every injectable fault across the methods it applies to and print
where the engine first notices each one.

This is the observational side of the fault matrix: it reports what the
engine actually does, with no expectations baked in. The frozen expectations
live in the test suite; run this after changing check logic to see the new
routing at a glance.
"""
import argparse
import sys
import time

from difftrain.contract import config_from_dict
from difftrain.pipeline import verify
from difftrain.report import classify
from difftrain.toys import FAULT_METHODS, FaultId

HANG_TIMEOUT_S = 2.0


def first_failing(report):
    for stage_name in ("preflight", "spec", "numeric", "behavioral"):
        for rec in report.stages[stage_name].records:
            if rec.name == "stage_gate":
                continue
            if rec.status.value in ("fail", "hard_fail"):
                return stage_name, rec
    return None, None


def sweep(seed: int):
    rows = []
    for fault in FaultId:
        if fault is FaultId.ARTIFACT_NEVER_PRODUCED:
            continue
        for method in FAULT_METHODS[fault]:
            config = config_from_dict({"method": method.value, "seed": seed})
            if fault is FaultId.HANG_ON_FORWARD:
                config = config_from_dict(
                    {"method": method.value, "seed": seed, "probe_timeout": HANG_TIMEOUT_S}
                )
            reference = {"toy": method.value, "seed": seed}
            candidate = {"toy": method.value, "seed": seed, "fault": fault.value}
            started = time.monotonic()
            report = verify(config, reference, candidate)
            elapsed = time.monotonic() - started
            stage, rec = first_failing(report)
            categories = ",".join(
                label.category for label in classify(report.to_json_dict())
            )
            rows.append((
                fault.value,
                method.value,
                report.overall,
                f"{stage}/{rec.name}" if rec else "-",
                rec.status.value if rec else "-",
                rec.failure_kind.value if rec and rec.failure_kind else "-",
                categories or "-",
                f"{elapsed:.2f}s",
            ))
    return rows


def render(rows):
    header = ("fault", "method", "overall", "first_failing", "status", "kind",
              "categories", "wall")
    table = [header] + rows
    widths = [max(len(str(row[i])) for row in table) for i in range(len(header))]
    lines = []
    for n, row in enumerate(table):
        lines.append("  ".join(str(cell).ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args(argv)
    rows = sweep(args.seed)
    print(render(rows))
    unnoticed = [row for row in rows if row[2] != "fail"]
    if unnoticed:
        print(f"\n{len(unnoticed)} fault(s) went unnoticed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
