#!/usr/bin/env python3
"""
Acceptance gate for tagstrain desk-scale runs.

This script evaluates an evaluation report (report.json from `tagstrain eval`) and,
optionally, training metrics logs and an SSD baseline report against the rules in
criteria.toml and exits non-zero when any rule fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

# Try to import tomllib (Python 3.11+) or fall back to toml
try:
    import tomllib
except ImportError:
    try:
        import toml as tomllib  # type: ignore
    except ImportError:
        print("Error: Please install toml package: pip install toml", file=sys.stderr)
        raise


@dataclass
class GateOutcome:
    passed: bool
    failures: list[dict[str, Any]] = field(default_factory=list)


def lookup(doc: Any, dotted: str) -> Any:
    """Follow a dotted path through nested dicts; None when any step is missing."""
    current = doc
    for part in dotted.split("."):
        if not isinstance(current, dict) or part not in current:
            return None
        current = current[part]
    return current


def final_val_metrics(records: list[dict]) -> dict:
    rows = [r for r in records if r.get("split") == "val"]
    return rows[-1] if rows else {}


def evaluate_rules(sources: dict[str, Any], rules: list[dict]) -> GateOutcome:
    failures: list[dict[str, Any]] = []

    for rule in rules:
        metric = rule.get("metric")
        source = rule.get("source", "report")
        if not isinstance(metric, str) or not isinstance(source, str):
            failures.append({"rule": rule, "reason": "invalid_rule"})
            continue

        if source not in sources:
            failures.append({"metric": metric, "source": source, "reason": "unknown_source"})
            continue
        if sources[source] is None:
            continue

        value = lookup(sources[source], metric)
        if value is None or isinstance(value, bool) or not isinstance(value, (int, float)):
            failures.append({"metric": metric, "source": source, "reason": "missing_metric"})
            continue
        value_f = float(value)

        minimum = rule.get("min")
        if minimum is not None and value_f < float(minimum):
            failures.append(
                {"metric": metric, "source": source, "reason": "below_min", "value": value_f, "min": float(minimum)}
            )
            continue

        maximum = rule.get("max")
        if maximum is not None and value_f > float(maximum):
            failures.append(
                {"metric": metric, "source": source, "reason": "above_max", "value": value_f, "max": float(maximum)}
            )
            continue

        abs_max = rule.get("abs_max")
        if abs_max is not None and abs(value_f) > float(abs_max):
            failures.append(
                {
                    "metric": metric,
                    "source": source,
                    "reason": "abs_max_exceeded",
                    "value": value_f,
                    "abs_max": float(abs_max),
                }
            )
            continue

        reference = rule.get("max_from")
        if reference is not None:
            if reference not in sources:
                failures.append({"metric": metric, "source": reference, "reason": "unknown_source"})
                continue
            if sources[reference] is None:
                continue
            bound = lookup(sources[reference], metric)
            if bound is None or isinstance(bound, bool) or not isinstance(bound, (int, float)):
                failures.append({"metric": metric, "source": reference, "reason": "missing_metric"})
                continue
            if value_f > float(bound):
                failures.append(
                    {
                        "metric": metric,
                        "source": source,
                        "reason": "above_reference",
                        "value": value_f,
                        "reference": reference,
                        "bound": float(bound),
                    }
                )

    return GateOutcome(passed=(len(failures) == 0), failures=failures)


def _load_report(path: Path) -> dict:
    if path.is_dir():
        path = path / "report.json"
    with path.open() as f:
        return json.load(f)


def _load_metrics(path: Path) -> dict:
    with path.open() as f:
        records = [json.loads(line) for line in f if line.strip()]
    return final_val_metrics(records)


def _load_rules(path: Path) -> list[dict]:
    data = tomllib.loads(path.read_text(encoding="utf-8"))
    rules = data.get("rules", [])
    if not isinstance(rules, list):
        raise ValueError("acceptance criteria must define [[rules]] as a list")
    return rules


def main() -> int:
    parser = argparse.ArgumentParser(description="tagstrain acceptance gate")
    parser.add_argument("report", help="Path to report.json or the report directory")
    parser.add_argument("--localizer-metrics", default=None, help="Localizer *.metrics.jsonl")
    parser.add_argument("--tracker-metrics", default=None, help="Tracker *.metrics.jsonl")
    parser.add_argument("--baseline-report", default=None, help="SSD baseline report.json (or its directory) on the same split")
    parser.add_argument(
        "--criteria",
        default=str(Path(__file__).with_name("criteria.toml")),
        help="Path to acceptance criteria TOML (default: criteria.toml)",
    )
    parser.add_argument(
        "--format",
        choices=["text", "json"],
        default="text",
        help="Output format for gate result",
    )
    args = parser.parse_args()

    sources = {
        "report": _load_report(Path(args.report)),
        "localizer": _load_metrics(Path(args.localizer_metrics)) if args.localizer_metrics else None,
        "tracker": _load_metrics(Path(args.tracker_metrics)) if args.tracker_metrics else None,
        "baseline": _load_report(Path(args.baseline_report)) if args.baseline_report else None,
    }
    rules = _load_rules(Path(args.criteria))
    outcome = evaluate_rules(sources, rules)

    if args.format == "json":
        print(json.dumps({"passed": outcome.passed, "failures": outcome.failures}, indent=2))
    else:
        if outcome.passed:
            print("Acceptance gate: PASS")
        else:
            print(f"Acceptance gate: FAIL ({len(outcome.failures)} failure(s))")
            for failure in outcome.failures:
                metric = failure.get("metric", "?")
                source = failure.get("source", "?")
                reason = failure.get("reason", "?")
                print(f"- {metric} [{source}]: {reason}")

    return 0 if outcome.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
