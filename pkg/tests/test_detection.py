from __future__ import annotations

import itertools
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udsmon._yamlio import ConfigError
from udsmon.catalog import catalog
from udsmon.detection import (
    CLC,
    PTI,
    SLP,
    ClcRule,
    ContextUnavailableError,
    EventPredicate,
    PreconditionError,
    RuleSet,
    SlpRule,
    ThreatIntelItem,
    clc_evaluate,
    load_rules,
    pti_evaluate,
    read_ti,
    rules_from_mapping,
    run_pipeline,
    slp_evaluate,
    write_ti,
)
from udsmon.replay import collect_events
from udsmon.sensor import FE, IR, EcuState, SecurityEvent
from udsmon.simulate import FW_CURRENT, FW_CUSTOM, FW_OLD, VEHICLE_ID, default_store
from udsmon import _yamlio

from conftest import download, exchange, sa_attempts
from slp_oracle import random_rule, random_stream, slp_oracle


def ev(ts, strategy=IR, sid=0x27, sf=0x02, ecu="ECM", source=0x0E80, eid=None, **ctx):
    context = {"sid": sid, "sf": sf, **ctx}
    return SecurityEvent(strategy, sid, ecu, source, ts, context, vehicle_id=VEHICLE_ID, event_id=eid or f"E{ts}")


SA_FAIL = SlpRule("sa", EventPredicate(strategies=frozenset({IR}), sids=frozenset({0x27})), 10, 60_000)


# --- SLP -----------------------------------------------------------------------


def test_slp_threshold_boundary():
    ten = [ev(i * 1000) for i in range(10)]
    (alert,) = slp_evaluate(SA_FAIL, ten)
    assert alert.strategy == SLP and len(alert.event_ids) == 10 and alert.window == (0, 9000)
    assert slp_evaluate(SA_FAIL, ten[:9]) == []


def test_slp_window_is_exclusive():
    spread = [ev(i * 6000) for i in range(10)] + [ev(54_000 + 6000)]
    # 0..54000 fits (54000 < 60000); shifting the last event to 60000 does not
    assert len(slp_evaluate(SA_FAIL, spread[:10])) == 1
    stretched = [ev(i * 6000) for i in range(9)] + [ev(60_000)]
    assert slp_evaluate(SA_FAIL, stretched) == []


def test_slp_consumes_events():
    assert len(slp_evaluate(SA_FAIL, [ev(i) for i in range(19)])) == 1
    assert len(slp_evaluate(SA_FAIL, [ev(i) for i in range(20)])) == 2


def test_slp_groups_by_ecu():
    mixed = [ev(i, ecu="ECM" if i % 2 else "BCM") for i in range(18)]
    assert slp_evaluate(SA_FAIL, mixed) == []
    assert len(slp_evaluate(replace(SA_FAIL, group_by=("vehicle",)), mixed)) == 1


def test_slp_requires_order():
    with pytest.raises(PreconditionError):
        slp_evaluate(SA_FAIL, [ev(5), ev(1)])


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1), st.integers(0, 200))
def test_slp_matches_bruteforce(seed, n):
    rng = random.Random(seed)
    rule = random_rule(rng)
    events = random_stream(rng, n)
    got = [a.event_ids for a in sorted(slp_evaluate(rule, events), key=lambda a: a.timestamp)]
    want = slp_oracle(rule, events)
    assert sorted(got) == sorted(want)


@given(st.lists(st.integers(0, 200_000), max_size=60))
def test_slp_alerts_never_share_events(times):
    events = [ev(t, eid=f"E{i}") for i, t in enumerate(sorted(times))]
    ids = [i for a in slp_evaluate(SA_FAIL, events) for i in a.event_ids]
    assert len(ids) == len(set(ids))


def test_pe4_worked_example(policy, rules):
    store = default_store()
    events = collect_events(sa_attempts(10), policy, store)
    slp = [a for a in run_pipeline(rules, events, store).alerts if a.strategy == SLP]
    assert len(slp) == 1 and slp[0].rule_id == "sa-key-failures"
    by_id = {e.event_id: e for e in events}
    members = [by_id[i] for i in slp[0].event_ids]
    assert len(members) == 10
    assert all(m.strategy == IR and m.sid == 0x27 and m.autosar_event_id == 103 for m in members)
    nine = collect_events(sa_attempts(9), policy, store)
    assert [a for a in run_pipeline(rules, nine, store).alerts if a.strategy == SLP] == []


# --- CLC -----------------------------------------------------------------------


def _rule(check, trigger=None, **params):
    return ClcRule("t", trigger or EventPredicate(), check, ("AT-PE-4",), params)


def test_vehicle_status_check():
    store = default_store()  # maintenance [60000, 300000)
    rule = _rule("vehicle-status-consistency", max_speed_kph=5)
    assert clc_evaluate(rule, ev(100_000, FE, ecu="ECM"), store) is None
    alert = clc_evaluate(rule, ev(360_000, FE, ecu="ECM"), store)
    assert alert.strategy == CLC and "maintenance" in alert.context_fact
    assert clc_evaluate(rule, ev(300_000, FE, ecu="ECM"), store) is not None


def test_permission_check():
    rule = _rule("permission-consistency")
    write = ev(5000, FE, sid=0x2E, sf=None)
    unlock = ev(1000, FE, sid=0x27, sf=0x02)
    other = ev(1000, FE, sid=0x27, sf=0x02, source=0x0760)
    relock = ev(2000, FE, sid=0x10, sf=0x03, source=0x0760)
    store = default_store()
    assert clc_evaluate(rule, write, store, [unlock, write]) is None
    assert clc_evaluate(rule, write, store, [other, write]) is not None
    assert clc_evaluate(rule, write, store, [unlock, relock, write]) is not None


def test_configuration_check():
    from udsmon.sensor import hash_payload
    from udsmon.simulate import EXPECTED_WRITES

    store = default_store()
    rule = _rule("configuration-consistency")
    good = ev(1, FE, sid=0x2E, sf=None, did=0xF198, data_hash=hash_payload(EXPECTED_WRITES[0xF198]))
    bad = replace(good, context={**good.context, "data_hash": hash_payload(b"x")})
    unknown = replace(good, context={**good.context, "did": 0x1234})
    assert clc_evaluate(rule, good, store) is None
    assert clc_evaluate(rule, bad, store) is not None
    assert clc_evaluate(rule, unknown, store) is not None
    io = ev(1, FE, sid=0x2F, sf=None, did=0x4A10)
    assert clc_evaluate(rule, io, store) is None
    assert clc_evaluate(rule, replace(io, context={**io.context, "did": 0x4B20}), store) is not None


def test_cross_log_check():
    rule = _rule(
        "cross-log-consistency",
        requires={"strategies": ["FE"], "sids": [0x31], "subfunctions": [1]},
        direction="before",
        within_ms=10_000,
        same=["source", "rid"],
    )
    stop = ev(5000, FE, sid=0x31, sf=2, rid=0xFF01)
    start = ev(1000, FE, sid=0x31, sf=1, rid=0xFF01)
    store = default_store()
    assert clc_evaluate(rule, stop, store, [start, stop]) is None
    assert clc_evaluate(rule, stop, store, [replace(start, context={**start.context, "rid": 2}), stop]) is not None
    assert clc_evaluate(rule, stop, store, [replace(start, source_address=1), stop]) is not None
    assert clc_evaluate(rule, stop, store, [stop]) is not None


def _firmware_alerts(policy, rules, image):
    store = default_store()
    events = collect_events(download(image), policy, store)
    return [a for a in run_pipeline(rules, events, store).alerts if a.rule_id == "firmware-not-authorized"]


def test_ps1_worked_example(policy, rules):
    (unknown,) = _firmware_alerts(policy, rules, FW_CUSTOM)
    assert "unauthorized" in unknown.context_fact and unknown.severity == "critical"
    assert _firmware_alerts(policy, rules, FW_CURRENT) == []
    (older,) = _firmware_alerts(policy, rules, FW_OLD)
    assert "downgrade" in older.context_fact


def test_firmware_check_ignores_uploads(policy, rules):
    store = default_store()
    trace = download(FW_CUSTOM)
    # same flow with RequestUpload instead of RequestDownload
    trace[3] = exchange(trace[3].timestamp, b"\x35" + trace[3].request_bytes[1:], b"\x75\x20\x01\x02")
    events = collect_events(trace, policy, store)
    assert not [a for a in run_pipeline(rules, events, store).alerts if a.rule_id == "firmware-not-authorized"]


def test_sensitive_reference_check():
    store = default_store()
    rule = _rule("sensitive-reference")
    assert clc_evaluate(rule, ev(1, FE, sid=0x22, sf=None, did_list=[0xF190, 0xF1A0]), store) is not None
    assert clc_evaluate(rule, ev(1, FE, sid=0x22, sf=None, did_list=[0xF190]), store) is None
    assert clc_evaluate(rule, ev(1, FE, sid=0x23, sf=None, mem_addr=0x80FF0, mem_size=0x20), store) is not None
    assert clc_evaluate(rule, ev(1, FE, sid=0x23, sf=None, mem_addr=0x81000, mem_size=0x20), store) is None
    assert clc_evaluate(rule, ev(1, FE, sid=0x2C, sf=1, source_did_list=[0xF1A1], mem_addr=[], mem_size=[]), store)
    assert clc_evaluate(rule, ev(1, FE, sid=0x31, sf=1, rid=0xFF10), store) is not None
    assert clc_evaluate(rule, ev(1, FE, sid=0x38, sf=None, file_path="/secure/x"), store) is not None


def test_unknown_vehicle_is_not_checked():
    stray = replace(ev(360_000, FE), vehicle_id="V-UNKNOWN", ecu_id="ZZ")
    assert clc_evaluate(_rule("vehicle-status-consistency"), stray, default_store()) is None


def test_clc_without_context():
    with pytest.raises(ContextUnavailableError):
        clc_evaluate(_rule("sensitive-reference"), ev(1, FE), None)


def test_pipeline_defers_clc_without_context(policy, rules):
    events = collect_events(sa_attempts(3), policy)
    report = run_pipeline(rules, events, None)
    assert report.deferred and all(a.strategy == SLP for a in report.alerts)


# --- PTI -----------------------------------------------------------------------

tags = st.frozensets(
    st.tuples(st.sampled_from(["model", "ecu_type", "technique"]), st.sampled_from(["X1", "Y9", "ecm-x1", "AT-PE-4"])),
    min_size=1,
    max_size=4,
)
items_st = st.lists(
    st.builds(ThreatIntelItem, st.text("abc123", min_size=1, max_size=6), st.sampled_from(["public", "disclosed", "internal-test"]), tags),
    max_size=8,
    unique_by=lambda i: i.item_id,
)
assets_st = st.frozensets(st.tuples(st.sampled_from(["model", "ecu_type"]), st.sampled_from(["X1", "Y9", "ecm-x1"])))


@given(items_st, assets_st, st.randoms())
def test_pti_matches_nested_loop(items, assets, rnd):
    want = set()
    for item in items:
        for tag in item.tags:
            for asset in assets:
                if tag == asset:
                    want.add(item.item_id)
    got = pti_evaluate(items, assets)
    assert {a.ti_item_ids[0] for a in got} == want
    shuffled = list(items)
    rnd.shuffle(shuffled)
    assert pti_evaluate(shuffled, assets) == got


def test_pti_severity_by_source():
    public = ThreatIntelItem("a", "public", frozenset({("model", "X1")}))
    private = ThreatIntelItem("b", "disclosed", frozenset({("model", "X1")}))
    got = {a.ti_item_ids[0]: a.severity for a in pti_evaluate([public, private], {("model", "X1")})}
    assert got == {"a": "critical", "b": "warn"}


def test_ti_roundtrip(tmp_path):
    items = [ThreatIntelItem("x", "public", frozenset({("model", "X1"), ("technique", "AT-RD-1")}), "text")]
    write_ti(tmp_path / "ti.ndjson", items)
    assert read_ti(tmp_path / "ti.ndjson") == items


def test_ti_rejects_unknown_source():
    with pytest.raises(ValueError):
        ThreatIntelItem("x", "rumor", frozenset({("model", "X1")}))


# --- rules files ---------------------------------------------------------------


def test_default_rules_cover_expected_strategies(rules):
    slp = {t for r in rules.slp for t in r.techniques}
    clc = {t for r in rules.clc for t in r.techniques}
    for tech in catalog():
        if "SLP" in tech.detection:
            assert tech.id in slp, tech.id
        if "CLC" in tech.detection:
            assert tech.id in clc, tech.id


def test_rules_reject_unknown_technique():
    doc = _yamlio.loads("slp:\n  - id: x\n    match: {}\n    threshold: 2\n    window_ms: 10\n    techniques: [AT-ZZ-1]\n")
    with pytest.raises(ConfigError) as info:
        rules_from_mapping(doc)
    assert info.value.line == 2


def test_rules_reject_duplicate_ids():
    doc = _yamlio.loads(
        "slp:\n  - {id: x, match: {}, threshold: 2, window_ms: 10}\n"
        "clc:\n  - {id: x, match: {}, check: sensitive-reference}\n"
    )
    with pytest.raises(ConfigError):
        rules_from_mapping(doc)


def test_rules_file_error_has_path(tmp_path):
    path = tmp_path / "rules.yaml"
    path.write_text("slp:\n  - {id: x, match: {}, threshold: 0, window_ms: 10}\n")
    with pytest.raises(ConfigError) as info:
        load_rules(path)
    assert str(path) in str(info.value)
