from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udsmon._yamlio import ConfigError
from udsmon.codec import CONTEXT_TABLE_SIDS
from udsmon.sensor import (
    AUTOSAR_SUPPORTED_SIDS,
    FE,
    IR,
    EcuState,
    LoggingPolicy,
    NoContextDefinedError,
    autosar_context_fields,
    autosar_support,
    context_fields,
    evaluate_exchange,
    extract_context,
    hash_payload,
    load_policy,
    read_events,
    save_policy,
    update_state,
    write_events,
)

import table2
from conftest import exchange

# a well-formed request per context-table service
SAMPLE_REQUESTS = {
    0x10: "1003",
    0x11: "1101",
    0x14: "14ffffff01",
    0x19: "1902ff",
    0x22: "22f190f18c",
    0x23: "23240008000001 00".replace(" ", ""),
    0x24: "24f190",
    0x27: "2701",
    0x28: "280301",
    0x29: "290100aabb",
    0x2A: "2a030102",
    0x2C: "2c01f300f1a00110",
    0x2E: "2ef19841424344",
    0x2F: "2f4a100301",
    0x31: "3101ff00",
    0x34: "3400440002000000000800",
    0x35: "3500440008000000001000",
    0x36: "3601deadbeef",
    0x37: "37",
    0x38: "380400052f612f626300",
    0x3D: "3d240008000000040a0b0c0d",
    0x3E: "3e00",
    0x84: "840001010000000122f190",
    0x85: "8502",
    0x86: "860102ff19",
    0x87: "870101",
}

ALL_ON = LoggingPolicy(enabled={sid: frozenset((IR, FE)) for sid in CONTEXT_TABLE_SIDS})
TABLE = table2.parse()


def _events(sid, positive, state=None, policy=ALL_ON):
    resp = bytes([sid + 0x40, 0x00]) if positive else bytes([0x7F, sid, 0x22])
    ex = exchange(0, bytes.fromhex(SAMPLE_REQUESTS[sid]), resp)
    return evaluate_exchange(policy, ex, state or EcuState("ECM", mode="development", security_level=1))


def test_transcription_covers_context_table():
    assert sorted(TABLE) == sorted(CONTEXT_TABLE_SIDS)
    assert sorted(SAMPLE_REQUESTS) == sorted(CONTEXT_TABLE_SIDS)


@pytest.mark.parametrize("sid", sorted(TABLE), ids=lambda s: f"0x{s:02X}")
@pytest.mark.parametrize("strategy", ["IR", "FE"])
def test_context_fields_match_table(sid, strategy):
    expected = TABLE[sid][0][strategy]
    assert set(context_fields(sid, strategy)) == expected
    events = [e for e in _events(sid, positive=strategy == "FE") if e.strategy.value == strategy]
    if not expected:
        assert events == []
        return
    (ev,) = events
    assert set(ev.context) == expected
    assert all(v is not None for v in ev.context.values())


def test_autosar_support_column():
    assert {sid for sid, (_, ar) in TABLE.items() if ar} == set(AUTOSAR_SUPPORTED_SIDS)
    assert len(AUTOSAR_SUPPORTED_SIDS) == 13
    assert autosar_support(0x10) == frozenset()
    assert autosar_support(0x27) == {IR, FE}


def test_autosar_field_differences():
    assert "data_hash" not in autosar_context_fields(0x2E, FE)
    assert "data_hash" not in autosar_context_fields(0x3D, FE)
    assert "client_address" in autosar_context_fields(0x27, IR)
    assert autosar_context_fields(0x22, FE) == ()


def test_access_timing_has_no_context():
    with pytest.raises(NoContextDefinedError):
        context_fields(0x83, IR)
    with pytest.raises(NoContextDefinedError):
        extract_context(0x83, exchange(0, b"\x83\x01").request, None, IR)


def test_default_policy_tags_sa_failures_with_event_103(policy):
    ex = exchange(0, b"\x27\x02\x11\x22", b"\x7f\x27\x35")
    (ev,) = evaluate_exchange(policy, ex, EcuState("ECM"))
    assert ev.strategy == IR and ev.autosar_event_id == 103 and ev.autosar_supported
    assert ev.context == {"sid": 0x27, "sf": 0x02, "nrc": 0x35}


def test_speed_circumstance_flags_positive_reset(policy):
    ex = exchange(0, b"\x11\x01", b"\x51\x01")
    events = evaluate_exchange(policy, ex, EcuState("ECM", vehicle_speed_kph=20))
    assert {(e.strategy, e.reason) for e in events} == {(IR, "speed"), (FE, None)}
    assert [e.strategy for e in evaluate_exchange(policy, ex, EcuState("ECM", vehicle_speed_kph=5))] == [FE]


def test_authorization_circumstance(policy):
    write = exchange(10, b"\x2e\xf1\x98\x01", b"\x6e\xf1\x98")
    locked = EcuState("ECM")
    assert [(e.strategy, e.reason) for e in evaluate_exchange(policy, write, locked)][0] == (IR, "authorization")
    unlocked = update_state(locked, exchange(5, b"\x27\x02\xaa", b"\x67\x02"))
    assert [e.strategy for e in evaluate_exchange(policy, write, unlocked)] == [FE]
    relocked = update_state(unlocked, exchange(6, b"\x10\x03", b"\x50\x03"))
    assert relocked.security_level == 0


def test_production_mode_circumstance(policy):
    read = exchange(0, bytes.fromhex(SAMPLE_REQUESTS[0x23]), b"\x63\x00")
    prod = EcuState("ECM", security_level=1)
    dev = EcuState("ECM", security_level=1, mode="development")
    assert {e.reason for e in evaluate_exchange(policy, read, prod)} == {"production", None}
    assert [e.reason for e in evaluate_exchange(policy, read, dev)] == [None]


def test_transfer_hash_covers_all_blocks(policy):
    state = EcuState("ECM", security_level=1)
    blocks = [b"\x01\x02", b"\x03", b"\x04\x05\x06"]
    state = update_state(state, exchange(0, bytes.fromhex(SAMPLE_REQUESTS[0x34]), b"\x74\x20\x01\x00"))
    for n, blk in enumerate(blocks, 1):
        state = update_state(state, exchange(n, bytes([0x36, n]) + blk, bytes([0x76, n])))
    exit_ex = exchange(9, b"\x37", b"\x77")
    (ev,) = evaluate_exchange(policy, exit_ex, state)
    assert ev.context["transfer_hash"] == hash_payload(b"".join(blocks))
    assert update_state(state, exit_ex).transfer_data == b""


def test_disabled_strategies_emit_nothing():
    assert evaluate_exchange(LoggingPolicy(), exchange(0, b"\x27\x02", b"\x7f\x27\x35"), EcuState("ECM")) == []


@settings(max_examples=200)
@given(
    sid=st.sampled_from(sorted(SAMPLE_REQUESTS)),
    positive=st.booleans(),
    speed=st.floats(0, 200),
    level=st.integers(0, 3),
    mode=st.sampled_from(["production", "development"]),
    enabled=st.sets(st.sampled_from([IR, FE])),
)
def test_emission_rules(policy, sid, positive, speed, level, mode, enabled):
    pol = LoggingPolicy(
        enabled={sid: frozenset(enabled)},
        protected_sids=policy.protected_sids,
        dev_only_sids=policy.dev_only_sids,
    )
    state = EcuState("ECM", security_level=level, vehicle_speed_kph=speed, mode=mode)
    events = _events(sid, positive, state, pol)
    kinds = [e.strategy for e in events]
    assert set(kinds) <= enabled and len(kinds) == len(set(kinds))
    if FE in kinds:
        assert positive
    if IR in enabled and context_fields(sid, IR) and not positive:
        assert IR in kinds
    for ev in events:
        assert set(ev.context) == set(context_fields(sid, ev.strategy))


def test_policy_roundtrip(tmp_path, policy):
    path = tmp_path / "policy.yaml"
    save_policy(path, policy)
    assert load_policy(path) == policy


def test_policy_error_has_line(tmp_path):
    path = tmp_path / "policy.yaml"
    path.write_text("strategies:\n  0x27: [IR, XX]\n")
    with pytest.raises(ConfigError) as info:
        load_policy(path)
    assert info.value.line is not None and str(path) in str(info.value)


def test_events_roundtrip(tmp_path, policy):
    events = _events(0x31, positive=False) + _events(0x37, positive=True)
    path = tmp_path / "events.ndjson"
    write_events(path, events)
    assert read_events(path) == events
