from __future__ import annotations

from dataclasses import replace

from udsmon.catalog import technique
from udsmon.coverage import coverage, evaluate_technique, statistics
from udsmon.detection import EventPredicate, RuleSet, SlpRule
from udsmon.simulate import simulate


def test_statistics_block():
    s = statistics()
    assert (s["autosar_supported_sids"], s["context_table_sids"]) == (13, 26)
    assert (s["autosar_full"], s["autosar_partial"], s["autosar_none"]) == (20, 10, 23)
    assert s["support_ratio_full"] == round(100 * 20 / 53, 1)
    assert s["support_ratio_full_or_partial"] == round(100 * 30 / 53, 1)
    assert 38 <= s["support_ratio_weighted"] <= 56


def test_missing_strategy_fails_row(policy, rules):
    tech = technique("AT-PS-1")
    sc = simulate(tech.id, 0)
    assert evaluate_technique(tech, sc, policy, rules).verdict
    no_ti = replace(sc, ti_items=())
    row = evaluate_technique(tech, no_ti, policy, rules)
    assert not row.verdict and "PTI" not in row.observed_detection


def test_missing_logging_fails_row(policy, rules):
    from udsmon.sensor import FE, LoggingPolicy

    tech = technique("AT-DE-1")
    fe_off = LoggingPolicy(enabled={sid: s - {FE} for sid, s in policy.enabled.items()},
                           protected_sids=policy.protected_sids)
    assert not evaluate_technique(tech, simulate(tech.id, 0), fe_off, rules).verdict


def test_na_detection_fails_when_anything_fires(policy, rules):
    tech = technique("AT-DS-14")
    sc = simulate(tech.id, 0)
    assert evaluate_technique(tech, sc, policy, rules).verdict
    noisy = RuleSet(slp=(SlpRule("any", EventPredicate(), 1, 1000),))
    row = evaluate_technique(tech, sc, policy, noisy)
    assert not row.verdict and row.alerts > 0


def test_subset_matrix_in_catalog_order():
    m = coverage(0, techniques=["AT-CL-3", "AT-PE-4"])
    assert [r.technique_id for r in m.rows] == ["AT-PE-4", "AT-CL-3"] and m.passed
