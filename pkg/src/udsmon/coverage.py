"""Coverage matrix: simulated techniques vs the catalog's expected strategies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from udsmon.catalog import NA, VARIOUS, AttackTechnique, autosar_counts, catalog, detectable, technique
from udsmon.codec import CONTEXT_TABLE_SIDS
from udsmon.detection import PTI, AlertReport, RuleSet, run_pipeline
from udsmon.replay import collect_events
from udsmon.sensor import AUTOSAR_SUPPORTED_SIDS, LoggingPolicy
from udsmon.simulate import Scenario, benign_traffic, simulate


@dataclass(frozen=True)
class CoverageRow:
    technique_id: str
    expected_logging: str  # "NA", "Various" or comma-joined strategies
    observed_logging: tuple[str, ...]
    expected_detection: str
    observed_detection: tuple[str, ...]
    stages: tuple[str, ...]
    events: int
    alerts: int
    verdict: bool

    def to_mapping(self) -> dict:
        return {
            "technique": self.technique_id,
            "expected_logging": self.expected_logging,
            "observed_logging": list(self.observed_logging),
            "expected_detection": self.expected_detection,
            "observed_detection": list(self.observed_detection),
            "stages": list(self.stages),
            "events": self.events,
            "alerts": self.alerts,
            "verdict": "pass" if self.verdict else "fail",
        }


@dataclass(frozen=True)
class CoverageMatrix:
    seed: int
    rows: tuple[CoverageRow, ...]
    benign_alerts: int
    stats: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.verdict for r in self.rows) and self.benign_alerts == 0

    def failures(self) -> list[str]:
        return [r.technique_id for r in self.rows if not r.verdict]

    def to_mapping(self) -> dict:
        return {
            "seed": self.seed,
            "rows": [r.to_mapping() for r in self.rows],
            "benign_alerts": self.benign_alerts,
            "statistics": self.stats,
            "verdict": "pass" if self.passed else "fail",
        }


def statistics() -> dict:
    """Headline AUTOSAR numbers, derived from the shipped tables."""
    levels = autosar_counts()
    total = sum(levels.values())
    return {
        "context_table_sids": len(CONTEXT_TABLE_SIDS),
        "autosar_supported_sids": len(set(AUTOSAR_SUPPORTED_SIDS) & set(CONTEXT_TABLE_SIDS)),
        "techniques": total,
        "autosar_full": levels["full"],
        "autosar_partial": levels["partial"],
        "autosar_none": levels["none"],
        "support_ratio_full": round(100 * levels["full"] / total, 1),
        "support_ratio_full_or_partial": round(100 * (levels["full"] + levels["partial"]) / total, 1),
        # partial rows count half: the point estimate inside the reported bounds
        "support_ratio_weighted": round(100 * (levels["full"] + 0.5 * levels["partial"]) / total, 1),
        "detectable_techniques": len(detectable()),
    }


def run_scenario(scenario: Scenario, policy: LoggingPolicy, rules: RuleSet) -> tuple[list, AlertReport]:
    events = collect_events(scenario.trace, policy, scenario.store, scenario.topology)
    report = run_pipeline(rules, events, scenario.store, scenario.ti_items)
    return events, report


def _cell(strategies, marker: Optional[str]) -> str:
    return marker if marker else ", ".join(sorted(strategies))


def evaluate_technique(
    tech: AttackTechnique, scenario: Scenario, policy: LoggingPolicy, rules: RuleSet
) -> CoverageRow:
    events, report = run_scenario(scenario, policy, rules)
    in_scope = [e for e in events if scenario.in_labels(e.timestamp)]
    observed_logging = frozenset(e.strategy.value for e in in_scope)

    if tech.detection_na:
        # nothing may fire anywhere inside the ground-truth interval
        hits = [a for a in report.alerts if a.timestamp is None or scenario.in_labels(a.timestamp)]
        detection_ok = not hits
        attributed = hits
    else:
        attributed = [
            a
            for a in report.alerts
            if tech.id in a.techniques
            and (a.strategy == PTI or (a.timestamp is not None and scenario.in_labels(a.timestamp)))
        ]
        detection_ok = tech.detection <= {a.strategy for a in attributed}

    if tech.logging_marker == NA:
        logging_ok = True
    elif tech.logging_marker == VARIOUS:
        logging_ok = bool(observed_logging)
    else:
        logging_ok = tech.logging <= observed_logging

    return CoverageRow(
        technique_id=tech.id,
        expected_logging=_cell(tech.logging, tech.logging_marker),
        observed_logging=tuple(sorted(observed_logging)),
        expected_detection=NA if tech.detection_na else _cell(tech.detection, None),
        observed_detection=tuple(sorted({a.strategy for a in attributed})),
        stages=tuple(sorted({a.stage for a in attributed})),
        events=len(in_scope),
        alerts=len(attributed),
        verdict=logging_ok and detection_ok,
    )


def coverage(
    seed: int = 0,
    policy: Optional[LoggingPolicy] = None,
    rules: Optional[RuleSet] = None,
    techniques: Optional[list[str]] = None,
) -> CoverageMatrix:
    policy = policy or LoggingPolicy.default()
    rules = rules or RuleSet.default()
    wanted = None if not techniques else {technique(t).id for t in techniques}
    # catalog order, independent of the order techniques were requested in
    chosen = [t for t in catalog() if wanted is None or t.id in wanted]
    rows = tuple(evaluate_technique(t, simulate(t.id, seed), policy, rules) for t in chosen)
    _events, benign = run_scenario(benign_traffic(seed), policy, rules)
    return CoverageMatrix(seed, rows, len(benign.alerts), statistics())


def format_matrix(matrix: CoverageMatrix) -> str:
    lines = [f"{'technique':<11} {'logging (exp/obs)':<28} {'detection (exp/obs)':<30} {'stages':<14} verdict"]
    for r in matrix.rows:
        log = f"{r.expected_logging} / {','.join(r.observed_logging) or '-'}"
        det = f"{r.expected_detection} / {','.join(r.observed_detection) or '-'}"
        lines.append(f"{r.technique_id:<11} {log:<28} {det:<30} {','.join(r.stages) or '-':<14} {'pass' if r.verdict else 'FAIL'}")
    lines.append("")
    lines.append(f"benign alerts: {matrix.benign_alerts}")
    lines.append(format_stats(matrix.stats))
    passed = sum(r.verdict for r in matrix.rows)
    lines.append(f"verdict: {passed}/{len(matrix.rows)} techniques pass; overall {'pass' if matrix.passed else 'FAIL'}")
    return "\n".join(lines)


def format_stats(stats: dict) -> str:
    return "\n".join(
        [
            f"AUTOSAR-supported SIDs: {stats['autosar_supported_sids']} of {stats['context_table_sids']}",
            f"techniques: {stats['techniques']} (full {stats['autosar_full']}, partial {stats['autosar_partial']}, "
            f"none {stats['autosar_none']})",
            f"AUTOSAR logging support: {stats['support_ratio_full']}% to {stats['support_ratio_full_or_partial']}% "
            f"(weighted {stats['support_ratio_weighted']}%)",
            f"detectable techniques: {stats['detectable_techniques']} of {stats['techniques']}",
        ]
    )
