"""Command-line entry points.

Exit codes separate the verdict from the machinery: 0 means the requested
check passed, 1 means it ran and failed, 2 means the tool itself could not do
what was asked (bad flags, malformed config, unwritable output).
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

from .codec import DEFAULT_FRAME_CAP
from .contract import BoundedConfig, ConfigError, build_contract, config_from_dict
from .pipeline import run_preflight, verify
from .report import (
    AttemptMeta,
    ReportSchemaError,
    aggregate,
    canonical_json,
    classify,
    load_corpus,
    load_report,
    render_table,
    write_report,
)
from .runner import RuntimeHandle
from .serve import serve
from .toys import FAULT_METHODS, FaultId, build_from_descriptor

log = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2

ENV_PROBE_TIMEOUT = "DIFFTRAIN_PROBE_TIMEOUT"
ENV_FRAME_CAP = "DIFFTRAIN_FRAME_CAP"


class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True)


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def _env_float(name: str) -> Optional[float]:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be a number, got {raw!r}") from exc


def _frame_cap() -> int:
    raw = os.environ.get(ENV_FRAME_CAP)
    if raw is None or raw == "":
        return DEFAULT_FRAME_CAP
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_FRAME_CAP} must be an integer byte count, got {raw!r}") from exc
    if cap <= 0:
        raise ConfigError(f"{ENV_FRAME_CAP} must be positive, got {cap}")
    return cap


def _load_config(args: argparse.Namespace) -> BoundedConfig:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        config = config_from_dict(raw)
    elif args.method:
        config = config_from_dict({"method": args.method})
    else:
        raise ConfigError("provide --config FILE or --method {sft,dpo,ppo}")
    timeout = _env_float(ENV_PROBE_TIMEOUT)
    if timeout is not None:
        config = dataclasses.replace(config, probe_timeout=timeout)
    return config


def _descriptor(value: str) -> dict[str, Any]:
    text = value.strip()
    if not text.startswith("{"):
        try:
            text = Path(value).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read descriptor file {value!r}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"descriptor is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("descriptor must be a JSON object")
    return raw


def _emit(payload: dict[str, Any], out: Optional[str]) -> None:
    text = canonical_json(payload)
    if out and out != "-":
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with the run configuration")
    parser.add_argument(
        "--method", choices=["sft", "dpo", "ppo"], help="shortcut for a default config"
    )


def cmd_verify(args: argparse.Namespace) -> int:
    config = _load_config(args)
    reference = _descriptor(args.reference)
    candidate = _descriptor(args.candidate)
    report = verify(config, reference, candidate, frame_cap=_frame_cap())
    if args.out == "-":
        sys.stdout.write(canonical_json(report.to_json_dict()))
    else:
        write_report(report, args.out, force=args.force)
        print(f"{report.overall}: {args.out}")
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_preflight(args: argparse.Namespace) -> int:
    config = _load_config(args)
    contract = build_contract(config)
    handle = RuntimeHandle(
        _descriptor(args.reference), "reference", config.probe_timeout, _frame_cap()
    )
    try:
        summary, _ = run_preflight(handle, contract)
        handle.run_probe({"op": "shutdown"})
    finally:
        handle.close()
    _emit({"preflight": summary.to_json_dict()}, args.out)
    return EXIT_PASS if summary.passed else EXIT_FAIL


def _build_served_toy(
    name: str, seed: Optional[int], fault: Optional[str]
) -> Any:
    descriptor: dict[str, Any] = {"toy": name}
    if seed is not None:
        descriptor["seed"] = seed
    if fault is not None:
        descriptor["fault"] = fault
    try:
        return build_from_descriptor(descriptor)
    except KeyError as exc:
        raise ConfigError(f"unknown toy runtime {name!r}") from exc


def cmd_serve_toy(args: argparse.Namespace) -> int:
    toy = _build_served_toy(args.toy, args.seed, args.fault)
    return serve(toy, frame_cap=_frame_cap(), crash_at_probe=args.crash_at_probe)


def cmd_inject(args: argparse.Namespace) -> int:
    try:
        fault = FaultId(args.fault)
    except ValueError:
        valid = ", ".join(f.value for f in FaultId)
        raise ConfigError(f"unknown fault {args.fault!r}; valid ids: {valid}") from None
    methods = sorted(m.value for m in FAULT_METHODS[fault])
    if args.method not in methods:
        raise ConfigError(
            f"fault {fault.value} does not apply to method {args.method!r}; "
            f"applicable: {', '.join(methods)}"
        )
    descriptor: dict[str, Any] = {"toy": args.method, "fault": fault.value}
    if args.seed is not None:
        descriptor["seed"] = args.seed
    if not args.serve:
        sys.stdout.write(canonical_json(descriptor))
        return EXIT_PASS
    toy = build_from_descriptor(descriptor)
    return serve(toy, frame_cap=_frame_cap())


def cmd_classify(args: argparse.Namespace) -> int:
    reports_dir = Path(args.reports_dir)
    if not reports_dir.is_dir():
        raise ConfigError(f"reports directory not found: {reports_dir}")
    labels: dict[str, Any] = {}
    if args.meta:
        attempts, reports = load_corpus(reports_dir, args.meta)
        for attempt in attempts:
            labels[attempt.attempt_id] = [
                label.to_json_dict() for label in classify(reports[attempt.attempt_id])
            ]
    else:
        for path in sorted(reports_dir.glob("*.json")):
            labels[path.name] = [label.to_json_dict() for label in classify(load_report(path))]
    _emit({"labels": labels}, args.out)
    return EXIT_PASS


def cmd_aggregate(args: argparse.Namespace) -> int:
    reports_dir = Path(args.reports_dir)
    if not reports_dir.is_dir():
        raise ConfigError(f"reports directory not found: {reports_dir}")
    attempts, reports = load_corpus(reports_dir, args.meta)
    summary = aggregate(attempts, reports, k=args.k)
    if args.out and args.out != "-":
        _emit(summary, args.out)
        sys.stdout.write(render_table(summary))
    elif args.table:
        sys.stdout.write(render_table(summary))
    else:
        sys.stdout.write(canonical_json(summary))
    return EXIT_PASS


def cmd_batch(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    frame_cap = _frame_cap()

    tasks = []
    for lineno, line in enumerate(Path(args.tasks).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.tasks}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(row, dict) or "task_id" not in row:
            raise ConfigError(f"{args.tasks}:{lineno}: task rows need at least task_id")
        tasks.append((lineno, row))

    def run_one(item: tuple[int, dict[str, Any]]) -> tuple[dict[str, Any], Optional[str]]:
        lineno, row = item
        attempt_id = str(row.get("attempt_id") or f"attempt-{lineno:04d}")
        meta = {
            "attempt_id": attempt_id,
            "system_id": str(row.get("system_id") or "local"),
            "task_id": str(row["task_id"]),
            "report": f"{attempt_id}.json",
        }
        if isinstance(row.get("self_reported_pass"), bool):
            meta["self_reported_pass"] = row["self_reported_pass"]
        try:
            config_raw = row.get("config")
            if config_raw is None:
                config_raw = {"method": row.get("method")}
            config = config_from_dict(config_raw)
            timeout = _env_float(ENV_PROBE_TIMEOUT)
            if timeout is not None:
                config = dataclasses.replace(config, probe_timeout=timeout)
            report = verify(config, row["reference"], row["candidate"], frame_cap=frame_cap)
            write_report(report, reports_dir / meta["report"], force=args.force)
        except Exception as exc:  # noqa: BLE001 - one bad task must not sink the batch
            log.error("task %s (line %d) errored: %s", row.get("task_id"), lineno, exc)
            return meta, f"{type(exc).__name__}: {exc}"
        return meta, None

    errors = 0
    metas: list[dict[str, Any]] = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for meta, error in pool.map(run_one, tasks):
            if error is None:
                metas.append(meta)
            else:
                errors += 1

    meta_path = out_dir / "meta.jsonl"
    meta_lines = [json.dumps(m, sort_keys=True) for m in metas]
    meta_path.write_text("\n".join(meta_lines) + ("\n" if meta_lines else ""), encoding="utf-8")
    print(f"{len(metas)} report(s) under {reports_dir}, metadata in {meta_path}")
    return EXIT_CONFIG if errors else EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="difftrain",
        description="Differential verification of numerical-training runtimes.",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the full pipeline against two runtimes")
    _add_config_flags(p)
    p.add_argument("--reference", required=True, help="launch descriptor (JSON or file path)")
    p.add_argument("--candidate", required=True, help="launch descriptor (JSON or file path)")
    p.add_argument("--out", required=True, help="report path, or - for stdout")
    p.add_argument("--force", action="store_true", help="overwrite an existing report")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("preflight", help="probe the reference alone")
    _add_config_flags(p)
    p.add_argument("--reference", required=True, help="launch descriptor (JSON or file path)")
    p.add_argument("--out", help="summary path, or - for stdout (default)")
    p.set_defaults(func=cmd_preflight)

    p = sub.add_parser("serve-toy", help="serve a toy runtime over stdio")
    p.add_argument("--toy", required=True, help="registry name, e.g. sft, dpo, ppo")
    p.add_argument("--seed", type=int)
    p.add_argument("--fault", help="fault id to inject")
    p.add_argument(
        "--crash-at-probe",
        type=int,
        help="kill the process upon receiving this request index (0-based)",
    )
    p.set_defaults(func=cmd_serve_toy)

    p = sub.add_parser("inject", help="build or serve a fault-injected toy")
    p.add_argument("--fault", required=True)
    p.add_argument("--method", required=True, choices=["sft", "dpo", "ppo"])
    p.add_argument("--seed", type=int)
    p.add_argument("--serve", action="store_true", help="serve over stdio instead of printing")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("classify", help="taxonomy labels for stored reports")
    p.add_argument("--reports-dir", required=True)
    p.add_argument("--meta", help="attempt metadata JSONL (optional)")
    p.add_argument("--out", help="labels path, or - for stdout (default)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("aggregate", help="corpus summary with pass@k and stage rates")
    p.add_argument("--reports-dir", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", help="summary JSON path; table goes to stdout")
    p.add_argument("--table", action="store_true", help="print the text table only")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("batch", help="run many verifications from a task list")
    p.add_argument("--tasks", required=True, help="JSONL task rows")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=2)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_batch)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return int(args.func(args))
    except (ConfigError, ReportSchemaError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
