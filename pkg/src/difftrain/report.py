"""Report persistence, root-cause classification, and corpus aggregation.

Everything here operates on the JSON form of a report: files on disk are the
interchange format, and classification must behave identically whether the
report was produced in this process or read back later.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .contract import ConfigError

EVIDENCE_EXCERPT_CHARS = 160

TAXONOMY_CATEGORIES = (
    "init_failure",
    "param_tree_mismatch",
    "batch_schema_mismatch",
    "boundary_seam",
    "device_mismatch",
    "dtype_unsupported",
    "artifact_contract_drift",
    "missing_artifact",
    "shape_mismatch",
    "forward_mismatch",
    "method_mismatch",
    "gradient_mismatch",
    "behavior_generation",
    "artifact_never_produced",
    "other",
)

_FORWARD_FAMILY = frozenset({"forward_logits", "forward_hidden_states", "forward_loss"})
_METHOD_FAMILY = frozenset(
    {
        "method_loss",
        "log_probs",
        "ref_log_probs",
        "token_logprobs",
        "advantages",
        "returns",
        "lr_schedule",
        "gradient_accumulation",
    }
)
_GRADIENT_FAMILY = frozenset({"gradient_loss", "gradient_norm"})
_BEHAVIOR_FAMILY = frozenset({"loss_curve", "generation"})


class ReportSchemaError(ConfigError):
    """Raised when report files cannot be aggregated together."""


@dataclass(frozen=True)
class TaxonomyLabel:
    category: str
    stage: str
    name: str
    failure_kind: Optional[str]
    error: str

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "category": self.category,
            "stage": self.stage,
            "name": self.name,
            "failure_kind": self.failure_kind,
            "error": self.error,
        }


def _pattern_table() -> list[tuple[str, str]]:
    raw = json.loads(
        resources.files("difftrain").joinpath("data/taxonomy_patterns.json").read_text()
    )
    table = []
    for entry in raw["patterns"]:
        category = entry["category"]
        if category not in TAXONOMY_CATEGORIES:
            raise ConfigError(f"pattern table routes to unknown category {category!r}")
        table.append((entry["contains"], category))
    return table


_PATTERNS: Optional[list[tuple[str, str]]] = None


def _patterns() -> list[tuple[str, str]]:
    global _PATTERNS
    if _PATTERNS is None:
        _PATTERNS = _pattern_table()
    return _PATTERNS


def _categorize(stage: str, name: str, kind: Optional[str], error: str) -> str:
    for needle, category in _patterns():
        if needle in error:
            return category
    if kind == "missing_artifact":
        return "missing_artifact"
    if kind == "schema_mismatch":
        if name == "weight_loading":
            return "param_tree_mismatch"
        if name == "data_pipeline":
            return "batch_schema_mismatch"
        if stage in ("numeric", "behavioral"):
            return "shape_mismatch"
    if name == "candidate_init":
        return "init_failure"
    if name in _FORWARD_FAMILY:
        return "forward_mismatch"
    if name in _METHOD_FAMILY:
        return "method_mismatch"
    if name in _GRADIENT_FAMILY:
        return "gradient_mismatch"
    if name in _BEHAVIOR_FAMILY:
        return "behavior_generation"
    return "other"


def classify(report: Mapping[str, Any]) -> list[TaxonomyLabel]:
    """Root-cause labels for one report, at most one per category.

    The candidate-never-materialized outcome is exclusive: nothing was run, so
    no other category can have evidence. Blocked records never contribute.
    """
    first_failing: dict[str, TaxonomyLabel] = {}

    def failing_records() -> Iterable[tuple[str, Mapping[str, Any]]]:
        for stage_name, stage in report.get("stages", {}).items():
            for rec in stage.get("records", []):
                if rec.get("status") in ("fail", "hard_fail"):
                    yield stage_name, rec

    if report.get("candidate_missing"):
        evidence = None
        for stage_name, rec in failing_records():
            if rec.get("name") == "candidate_init":
                evidence = (stage_name, rec)
                break
        stage_name, rec = evidence if evidence else ("spec", {})
        return [
            TaxonomyLabel(
                category="artifact_never_produced",
                stage=stage_name,
                name=str(rec.get("name", "candidate_init")),
                failure_kind=rec.get("failure_kind"),
                error=str(rec.get("error") or "")[:EVIDENCE_EXCERPT_CHARS],
            )
        ]

    for stage_name, rec in failing_records():
        error = str(rec.get("error") or "")
        category = _categorize(
            stage_name, str(rec.get("name", "")), rec.get("failure_kind"), error
        )
        if category not in first_failing:
            first_failing[category] = TaxonomyLabel(
                category=category,
                stage=stage_name,
                name=str(rec.get("name", "")),
                failure_kind=rec.get("failure_kind"),
                error=error[:EVIDENCE_EXCERPT_CHARS],
            )
    return [first_failing[c] for c in sorted(first_failing)]


# -- persistence --------------------------------------------------------------


def sanitize_floats(obj: Any) -> Any:
    """Make an arbitrary payload JSON-strict: non-finite floats become the
    strings "NaN"/"Infinity"/"-Infinity"."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return "NaN"
        if math.isinf(obj):
            return "Infinity" if obj > 0 else "-Infinity"
        return obj
    if isinstance(obj, dict):
        return {k: sanitize_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize_floats(v) for v in obj]
    return obj


def canonical_json(payload: Mapping[str, Any]) -> str:
    return json.dumps(sanitize_floats(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(
    report: Union[Mapping[str, Any], Any], path: Union[str, Path], force: bool = False
) -> Path:
    """Write a report as canonical JSON. Existing files are protected: pass
    force to overwrite."""
    payload = report.to_json_dict() if hasattr(report, "to_json_dict") else report
    out = Path(path)
    if out.exists() and not force:
        raise FileExistsError(f"refusing to overwrite existing report {out} (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(canonical_json(payload), encoding="utf-8")
    return out


def load_report(path: Union[str, Path]) -> dict[str, Any]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ReportSchemaError(f"report {path} is not a JSON object")
    return payload


def without_timings(report: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(report)
    out.pop("timings", None)
    return out


def _major_version(version: str) -> str:
    return str(version).split(".", 1)[0]


def check_schema_versions(reports: Iterable[Mapping[str, Any]]) -> None:
    majors = {_major_version(r.get("schema_version", "?")) for r in reports}
    if len(majors) > 1:
        raise ReportSchemaError(
            f"cannot aggregate mixed report schema major versions: {sorted(majors)}"
        )


# -- corpus metadata -----------------------------------------------------------


@dataclass(frozen=True)
class AttemptMeta:
    """One attempt row from the corpus metadata file (JSON lines).

    Attempt order within a (system, task) group is the order of lines in the
    file; pass@k reads the first k in that order.
    """

    attempt_id: str
    system_id: str
    task_id: str
    report: str
    self_reported_pass: Optional[bool] = None
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_json_dict(cls, raw: Mapping[str, Any]) -> "AttemptMeta":
        known = {"attempt_id", "system_id", "task_id", "report", "self_reported_pass"}
        for key in ("attempt_id", "system_id", "task_id", "report"):
            value = raw.get(key)
            if not isinstance(value, str) or not value:
                raise ConfigError(f"attempt metadata requires a non-empty string {key!r}")
        self_reported = raw.get("self_reported_pass")
        if self_reported is not None and not isinstance(self_reported, bool):
            raise ConfigError("self_reported_pass must be a boolean when present")
        return cls(
            attempt_id=raw["attempt_id"],
            system_id=raw["system_id"],
            task_id=raw["task_id"],
            report=raw["report"],
            self_reported_pass=self_reported,
            extra={k: v for k, v in raw.items() if k not in known},
        )

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "attempt_id": self.attempt_id,
            "system_id": self.system_id,
            "task_id": self.task_id,
            "report": self.report,
        }
        if self.self_reported_pass is not None:
            out["self_reported_pass"] = self.self_reported_pass
        out.update(self.extra)
        return out


def load_attempts(meta_path: Union[str, Path]) -> list[AttemptMeta]:
    attempts = []
    for lineno, line in enumerate(Path(meta_path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{meta_path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{meta_path}:{lineno}: attempt row must be an object")
        attempts.append(AttemptMeta.from_json_dict(raw))
    return attempts


def load_corpus(
    reports_dir: Union[str, Path], meta_path: Union[str, Path]
) -> tuple[list[AttemptMeta], dict[str, dict[str, Any]]]:
    reports_dir = Path(reports_dir)
    attempts = load_attempts(meta_path)
    reports: dict[str, dict[str, Any]] = {}
    for attempt in attempts:
        if attempt.attempt_id in reports:
            raise ConfigError(f"duplicate attempt_id {attempt.attempt_id!r} in metadata")
        report_path = reports_dir / attempt.report
        if not report_path.exists():
            raise ConfigError(f"attempt {attempt.attempt_id!r}: missing report {report_path}")
        reports[attempt.attempt_id] = load_report(report_path)
    check_schema_versions(reports.values())
    return attempts, reports


# -- aggregation ---------------------------------------------------------------


def format_percent(fraction: float) -> str:
    """One-decimal percentage: 13/45 renders as '28.9'."""
    return f"{fraction * 100.0:.1f}"


def _report_passed(report: Mapping[str, Any]) -> bool:
    return report.get("overall") == "pass"


def _stage_passed(report: Mapping[str, Any], stage: str) -> bool:
    return report.get("stages", {}).get(stage, {}).get("status") == "pass"


def _report_method(report: Mapping[str, Any]) -> str:
    return str(
        report.get("contract", {}).get("config", {}).get("method", "unknown")
    )


def _rate(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def _group_tasks(
    attempts: Sequence[AttemptMeta],
) -> dict[str, dict[str, list[AttemptMeta]]]:
    by_system: dict[str, dict[str, list[AttemptMeta]]] = {}
    for attempt in attempts:
        by_system.setdefault(attempt.system_id, {}).setdefault(attempt.task_id, []).append(
            attempt
        )
    return by_system


def _pass_at(
    tasks: Mapping[str, list[AttemptMeta]],
    reports: Mapping[str, Mapping[str, Any]],
    k: int,
) -> float:
    hits = sum(
        1
        for rows in tasks.values()
        if any(_report_passed(reports[a.attempt_id]) for a in rows[:k])
    )
    return _rate(hits, len(tasks))


def aggregate(
    attempts: Sequence[AttemptMeta],
    reports: Mapping[str, Mapping[str, Any]],
    k: int = 3,
) -> dict[str, Any]:
    """Corpus summary: pass@1/pass@k overall and per method, stage rates with
    the gating conditioning, taxonomy counts over all attempts, and the
    self-report gap.

    Stage rates are first-attempt: spec over all tasks, numeric conditional on
    spec passing, behavioral conditional on numeric passing, so the product of
    the three equals overall pass@1 exactly.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    check_schema_versions([reports[a.attempt_id] for a in attempts])
    summary: dict[str, Any] = {"k": k, "systems": {}}
    for system_id, tasks in sorted(_group_tasks(attempts).items()):
        first = [rows[0] for rows in tasks.values()]
        first_reports = [reports[a.attempt_id] for a in first]

        spec_pass = [r for r in first_reports if _stage_passed(r, "spec")]
        numeric_pass = [r for r in spec_pass if _stage_passed(r, "numeric")]
        behavioral_pass = [r for r in numeric_pass if _stage_passed(r, "behavioral")]

        methods: dict[str, dict[str, list[AttemptMeta]]] = {}
        for task_id, rows in tasks.items():
            method = _report_method(reports[rows[0].attempt_id])
            methods.setdefault(method, {})[task_id] = rows

        taxonomy_counts = {category: 0 for category in TAXONOMY_CATEGORIES}
        system_attempts = [a for rows in tasks.values() for a in rows]
        for attempt in system_attempts:
            for label in classify(reports[attempt.attempt_id]):
                taxonomy_counts[label.category] += 1

        short_of_k = sum(1 for rows in tasks.values() if len(rows) < k)
        summary["systems"][system_id] = {
            "tasks": len(tasks),
            "attempts": len(system_attempts),
            "tasks_with_fewer_than_k_attempts": short_of_k,
            "overall": {
                "pass_at_1": _pass_at(tasks, reports, 1),
                f"pass_at_{k}": _pass_at(tasks, reports, k),
            },
            "per_method": {
                method: {
                    "tasks": len(mtasks),
                    "pass_at_1": _pass_at(mtasks, reports, 1),
                    f"pass_at_{k}": _pass_at(mtasks, reports, k),
                }
                for method, mtasks in sorted(methods.items())
            },
            "stages_at_1": {
                "spec": _rate(len(spec_pass), len(first_reports)),
                "numeric_given_spec": _rate(len(numeric_pass), len(spec_pass)),
                "behavioral_given_numeric": _rate(len(behavioral_pass), len(numeric_pass)),
            },
            "taxonomy": {c: n for c, n in taxonomy_counts.items() if n},
            "self_report": _self_report_entry(system_attempts, reports),
        }
    return summary


def _self_report_entry(
    attempts: Sequence[AttemptMeta], reports: Mapping[str, Mapping[str, Any]]
) -> dict[str, Any]:
    included = [a for a in attempts if a.self_reported_pass is not None]
    excluded = len(attempts) - len(included)
    if not included:
        return {"included": 0, "excluded": excluded}
    self_hits = sum(1 for a in included if a.self_reported_pass)
    measured_hits = sum(1 for a in included if _report_passed(reports[a.attempt_id]))
    self_rate = _rate(self_hits, len(included))
    measured_rate = _rate(measured_hits, len(included))
    return {
        "included": len(included),
        "excluded": excluded,
        "self_rate": self_rate,
        "measured_rate": measured_rate,
        "gap_percentage_points": (self_rate - measured_rate) * 100.0,
    }


def self_report_gap(
    attempts: Sequence[AttemptMeta], reports: Mapping[str, Mapping[str, Any]]
) -> dict[str, dict[str, Any]]:
    """Per-system self-judged vs measured pass rate over attempts."""
    out = {}
    for system_id, tasks in sorted(_group_tasks(attempts).items()):
        system_attempts = [a for rows in tasks.values() for a in rows]
        out[system_id] = _self_report_entry(system_attempts, reports)
    return out


def render_table(summary: Mapping[str, Any]) -> str:
    """Aligned-column text rendering of an aggregate summary."""
    k = summary.get("k", 3)
    methods = sorted(
        {
            m
            for system in summary.get("systems", {}).values()
            for m in system.get("per_method", {})
        }
    )
    header = ["System"]
    for method in methods:
        header += [f"{method}@1", f"{method}@{k}"]
    header += ["Spec", "Num|Spec", "Behav|Num", "Overall@1", f"Overall@{k}"]

    rows = [header]
    for system_id, system in sorted(summary.get("systems", {}).items()):
        row = [system_id]
        for method in methods:
            entry = system["per_method"].get(method)
            row += (
                [format_percent(entry["pass_at_1"]), format_percent(entry[f"pass_at_{k}"])]
                if entry
                else ["-", "-"]
            )
        stages = system["stages_at_1"]
        row += [
            format_percent(stages["spec"]),
            format_percent(stages["numeric_given_spec"]),
            format_percent(stages["behavioral_given_numeric"]),
            format_percent(system["overall"]["pass_at_1"]),
            format_percent(system["overall"][f"pass_at_{k}"]),
        ]
        rows.append(row)

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


__all__ = [
    "AttemptMeta",
    "EVIDENCE_EXCERPT_CHARS",
    "ReportSchemaError",
    "TAXONOMY_CATEGORIES",
    "TaxonomyLabel",
    "aggregate",
    "canonical_json",
    "check_schema_versions",
    "classify",
    "format_percent",
    "load_attempts",
    "load_corpus",
    "load_report",
    "render_table",
    "sanitize_floats",
    "self_report_gap",
    "write_report",
    "without_timings",
]
