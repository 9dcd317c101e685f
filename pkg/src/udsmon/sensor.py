"""Vehicle-side security event generation for Invalid Request and Function Execution.

Each event carries a compact per-service context record instead of the raw
request/response bytes; bulk data (written records, transferred images) is
reduced to a SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional

from udsmon import _yamlio
from udsmon.codec import CONTEXT_TABLE_SIDS, SERVICES, UdsExchange, UdsRequest, UdsResponse


class Strategy(str, Enum):
    IR = "IR"
    FE = "FE"
    MFI = "MFI"

    def __str__(self) -> str:
        return self.value


IR, FE, MFI = Strategy.IR, Strategy.FE, Strategy.MFI


class NoContextDefinedError(LookupError):
    pass


# Per-SID context fields in logging order. The IR and FE sets differ only where
# the table marks a field for one strategy alone.
_BOTH = (IR, FE)
_CONTEXT_LAYOUT: dict[int, tuple[tuple[str, tuple[Strategy, ...]], ...]] = {}


def _layout(sids: Iterable[int], *fields: tuple[str, tuple[Strategy, ...]]) -> None:
    for sid in sids:
        _CONTEXT_LAYOUT[sid] = fields


_SID = ("sid", _BOTH)
_NRC = ("nrc", (IR,))
_layout((0x10, 0x11, 0x19, 0x27, 0x28, 0x29, 0x85, 0x87), _SID, ("sf", _BOTH), _NRC)
_layout((0x14,), _SID, ("group_of_dtc", _BOTH), ("memory_selection", _BOTH), _NRC)
_layout((0x22,), _SID, ("did_list", _BOTH), _NRC)
_layout((0x23, 0x34, 0x35), _SID, ("mem_addr", _BOTH), ("mem_size", _BOTH), _NRC)
_layout((0x24,), _SID, ("did", _BOTH), _NRC)
_layout((0x2A,), _SID, ("transmission_mode", _BOTH), ("periodic_did_list", _BOTH), _NRC)
_layout(
    (0x2C,),
    _SID,
    ("sf", _BOTH),
    ("dddid", _BOTH),
    ("source_did_list", _BOTH),
    ("mem_addr", _BOTH),
    ("mem_size", _BOTH),
    _NRC,
)
_layout((0x2E,), _SID, ("did", _BOTH), ("data_hash", _BOTH), _NRC)
_layout((0x2F,), _SID, ("did", _BOTH), ("io_control_parameter", _BOTH), _NRC)
_layout((0x31,), _SID, ("sf", _BOTH), ("rid", _BOTH), _NRC)
_layout((0x36,), ("sid", (IR,)), ("block_sequence_counter", (IR,)), _NRC)
_layout((0x37,), _SID, _NRC, ("transfer_hash", (FE,)))
_layout((0x38,), _SID, ("mode_of_operation", _BOTH), ("file_path", _BOTH), _NRC)
_layout((0x3D,), _SID, ("mem_addr", _BOTH), ("mem_size", _BOTH), _NRC, ("data_hash", (FE,)))
_layout((0x3E,))
_layout((0x84,), _SID, ("apar", _BOTH), ("crypto_calc", _BOTH), ("wrapped_sid", _BOTH), _NRC)
_layout((0x86,), _SID, ("sf", _BOTH), ("response_sid", _BOTH), _NRC)

AUTOSAR_SUPPORTED_SIDS = frozenset(
    (0x11, 0x14, 0x27, 0x28, 0x29, 0x2E, 0x2F, 0x31, 0x34, 0x35, 0x38, 0x3D, 0x85)
)


def context_fields(sid: int, strategy: Strategy) -> tuple[str, ...]:
    """Field names logged for ``sid`` under ``strategy``; empty when nothing is logged."""
    if sid not in _CONTEXT_LAYOUT:
        raise NoContextDefinedError(f"no context data defined for sid 0x{sid:02X}")
    strategy = Strategy(strategy)
    return tuple(name for name, strategies in _CONTEXT_LAYOUT[sid] if strategy in strategies)


def autosar_support(sid: int) -> frozenset[Strategy]:
    return frozenset((IR, FE)) if sid in AUTOSAR_SUPPORTED_SIDS else frozenset()


def autosar_context_fields(sid: int, strategy: Strategy) -> tuple[str, ...]:
    """Field set of the standardized AUTOSAR event, when one exists.

    AUTOSAR omits the write hashes for 0x2E and 0x3D and adds the logical
    client address to every UDS event.
    """
    if strategy not in autosar_support(sid):
        return ()
    names = [n for n in context_fields(sid, strategy) if not (sid in (0x2E, 0x3D) and n == "data_hash")]
    return tuple(names) + ("client_address",)


def hash_payload(data: bytes) -> str:
    return hashlib.sha256(bytes(data)).hexdigest()


# --- payload grammar --------------------------------------------------------


class _Reader:
    """Lenient cursor over a request payload; short reads yield None."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> Optional[bytes]:
        if n < 0 or self.pos + n > len(self.data):
            self.pos = len(self.data)
            return None
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def int(self, n: int) -> Optional[int]:
        chunk = self.take(n)
        return None if chunk is None else int.from_bytes(chunk, "big")

    def rest(self) -> bytes:
        chunk = self.data[self.pos :]
        self.pos = len(self.data)
        return chunk


def _addr_and_size(r: _Reader) -> tuple[Optional[int], Optional[int]]:
    alfid = r.int(1)
    if alfid is None:
        return None, None
    return r.int(alfid & 0x0F), r.int(alfid >> 4)


def _did_list(data: bytes) -> list[int]:
    return [int.from_bytes(data[i : i + 2], "big") for i in range(0, len(data) - 1, 2)]


# eventTypeRecord length per ResponseOnEvent event type (storage bit masked)
_ROE_EVENT_RECORD_LEN = {0x01: 1, 0x02: 1, 0x03: 2, 0x07: 10, 0x08: 1, 0x09: 2}


def _parse_params(
    sid: int, req: UdsRequest, transferred: bytes
) -> dict[str, Any]:
    """Every field the service's grammar can yield, keyed by context field name."""
    r = _Reader(req.payload)
    out: dict[str, Any] = {"sid": sid, "sf": req.subfunction}
    if sid == 0x14:
        out["group_of_dtc"] = r.int(3)
        out["memory_selection"] = r.int(1)
    elif sid == 0x22:
        out["did_list"] = _did_list(r.rest())
    elif sid in (0x23,):
        out["mem_addr"], out["mem_size"] = _addr_and_size(r)
    elif sid in (0x34, 0x35):
        r.int(1)  # dataFormatIdentifier
        out["mem_addr"], out["mem_size"] = _addr_and_size(r)
    elif sid == 0x24:
        out["did"] = r.int(2)
    elif sid == 0x2A:
        out["transmission_mode"] = r.int(1)
        out["periodic_did_list"] = list(r.rest())
    elif sid == 0x2C:
        out["dddid"] = r.int(2)
        sources: list[int] = []
        addrs: list[int] = []
        sizes: list[int] = []
        sf = (req.subfunction or 0) & 0x7F
        if sf == 0x01:
            while True:
                entry = r.take(4)
                if entry is None:
                    break
                sources.append(int.from_bytes(entry[:2], "big"))
                sizes.append(entry[3])
        elif sf == 0x02:
            alfid = r.int(1)
            if alfid is not None:
                while True:
                    addr, size = r.int(alfid & 0x0F), r.int(alfid >> 4)
                    if addr is None or size is None:
                        break
                    addrs.append(addr)
                    sizes.append(size)
        out["source_did_list"] = sources
        out["mem_addr"] = addrs
        out["mem_size"] = sizes
    elif sid == 0x2E:
        out["did"] = r.int(2)
        out["data_hash"] = hash_payload(r.rest())
    elif sid == 0x2F:
        out["did"] = r.int(2)
        out["io_control_parameter"] = r.int(1)
    elif sid == 0x31:
        out["rid"] = r.int(2)
    elif sid == 0x36:
        out["block_sequence_counter"] = r.int(1)
    elif sid == 0x37:
        out["transfer_hash"] = hash_payload(transferred)
    elif sid == 0x38:
        out["mode_of_operation"] = r.int(1)
        length = r.int(2)
        raw = r.take(length) if length is not None else None
        out["file_path"] = None if raw is None else raw.decode("latin-1")
    elif sid == 0x3D:
        out["mem_addr"], out["mem_size"] = _addr_and_size(r)
        out["data_hash"] = hash_payload(r.rest())
    elif sid == 0x84:
        out["apar"] = r.int(2)
        out["crypto_calc"] = r.int(1)
        r.take(4)  # signature length, anti-replay counter
        out["wrapped_sid"] = r.int(1)
    elif sid == 0x86:
        event_type = (req.subfunction or 0) & 0x3F
        r.int(1)  # eventWindowTime
        record_len = _ROE_EVENT_RECORD_LEN.get(event_type)
        if record_len is None:
            out["response_sid"] = None
        else:
            r.take(record_len)
            out["response_sid"] = r.int(1)
    return out


def extract_context(
    sid: int,
    request: UdsRequest,
    response: Optional[UdsResponse],
    strategy: Strategy,
    transferred: bytes = b"",
) -> dict[str, Any]:
    """Build the logged context record for one exchange.

    ``transferred`` is the data accumulated by TransferData since the last
    RequestDownload/RequestUpload; it only matters for 0x37.
    """
    names = context_fields(sid, strategy)
    if sid == 0x83 or sid not in SERVICES:
        raise NoContextDefinedError(f"no context data defined for sid 0x{sid:02X}")
    params = _parse_params(sid, request, transferred)
    nrc = response.nrc if response is not None and not response.positive else None
    params["nrc"] = nrc
    return {name: params.get(name) for name in names}


# --- policy and state -------------------------------------------------------

STATE_CHANGING_SIDS = frozenset((0x11, 0x2E, 0x2F, 0x31, 0x34, 0x36, 0x37, 0x38, 0x3D, 0x85))
PROTECTED_SIDS = {sid: 1 for sid in (0x23, 0x2C, 0x2E, 0x2F, 0x31, 0x34, 0x35, 0x38, 0x3D)}
DEV_ONLY_SIDS = frozenset((0x23, 0x3D))


@dataclass(frozen=True)
class LoggingPolicy:
    enabled: dict[int, frozenset[Strategy]] = field(default_factory=dict)
    speed_threshold_kph: float = 5.0
    state_changing_sids: frozenset[int] = STATE_CHANGING_SIDS
    protected_sids: dict[int, int] = field(default_factory=dict)
    protected_dids: dict[int, int] = field(default_factory=dict)
    dev_only_sids: frozenset[int] = frozenset()
    autosar_event_ids: dict[tuple[int, Strategy], int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for sid in self.enabled:
            if sid not in SERVICES:
                raise ValueError(f"policy references non-UDS sid 0x{sid:02X}")

    def strategies(self, sid: int) -> frozenset[Strategy]:
        return self.enabled.get(sid, frozenset())

    @classmethod
    def default(cls) -> "LoggingPolicy":
        return load_policy(_yamlio.data_path("default_policy.yaml"))


@dataclass(frozen=True)
class EcuState:
    ecu_id: str
    active_session: int = 0x01
    security_level: int = 0
    authenticated: bool = False
    vehicle_speed_kph: float = 0.0
    mode: str = "production"
    workshop_session_active: bool = False
    transfer_sid: Optional[int] = None
    transfer_data: bytes = b""

    def __post_init__(self) -> None:
        if self.vehicle_speed_kph < 0:
            raise ValueError("vehicle speed cannot be negative")
        if self.mode not in ("development", "production"):
            raise ValueError(f"unknown ECU mode {self.mode!r}")

    @property
    def security_access_unlocked(self) -> bool:
        return self.security_level > 0

    def authorized(self, level: int) -> bool:
        return self.authenticated or self.security_level >= level


def update_state(state: EcuState, exchange: UdsExchange) -> EcuState:
    """Apply the side effects a positive response has on the server state."""
    resp = exchange.response
    if resp is None or not resp.positive:
        return state
    req = exchange.request
    sf = None if req.subfunction is None else req.subfunction & 0x7F
    sid = req.sid
    if sid == 0x10 and sf is not None:
        return replace(state, active_session=sf, security_level=0, authenticated=False)
    if sid == 0x11:
        return replace(
            state, active_session=0x01, security_level=0, authenticated=False,
            transfer_sid=None, transfer_data=b"",
        )
    if sid == 0x27 and sf and sf % 2 == 0:
        return replace(state, security_level=sf // 2)
    if sid == 0x29 and sf is not None:
        if sf in (0x03, 0x06, 0x07):
            return replace(state, authenticated=True)
        if sf == 0x00:
            return replace(state, authenticated=False)
    if sid in (0x34, 0x35):
        return replace(state, transfer_sid=sid, transfer_data=b"")
    if sid == 0x36 and state.transfer_sid is not None:
        return replace(state, transfer_data=state.transfer_data + req.payload[1:])
    if sid == 0x37:
        return replace(state, transfer_sid=None, transfer_data=b"")
    return state


def classify_circumstance(
    exchange: UdsExchange, state: EcuState, policy: LoggingPolicy
) -> Optional[str]:
    sid = exchange.sid
    if sid in policy.state_changing_sids and state.vehicle_speed_kph > policy.speed_threshold_kph:
        return "speed"
    level = policy.protected_sids.get(sid)
    if level is not None and not state.authorized(level):
        return "authorization"
    if sid in (0x2E, 0x2F) and len(exchange.request.payload) >= 2:
        did = int.from_bytes(exchange.request.payload[:2], "big")
        did_level = policy.protected_dids.get(did)
        if did_level is not None and not state.authorized(did_level):
            return "authorization"
    if sid in policy.dev_only_sids and state.mode == "production":
        return "production"
    return None


@dataclass(frozen=True)
class SecurityEvent:
    strategy: Strategy
    sid: int
    ecu_id: str
    source_address: int
    timestamp: int
    context: dict[str, Any]
    autosar_supported: bool = False
    autosar_event_id: Optional[int] = None
    reason: Optional[str] = None
    vehicle_id: str = ""
    event_id: str = ""

    def to_record(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "sid": self.sid,
            "ecu": self.ecu_id,
            "source": self.source_address,
            "timestamp": self.timestamp,
            "context": dict(self.context),
            "reason": self.reason,
            "autosar_supported": self.autosar_supported,
            "autosar_event_id": self.autosar_event_id,
            "vehicle": self.vehicle_id,
            "event_id": self.event_id,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "SecurityEvent":
        return cls(
            strategy=Strategy(rec["strategy"]),
            sid=int(rec["sid"]),
            ecu_id=str(rec["ecu"]),
            source_address=int(rec["source"]),
            timestamp=int(rec["timestamp"]),
            context=dict(rec["context"]),
            autosar_supported=bool(rec.get("autosar_supported", False)),
            autosar_event_id=rec.get("autosar_event_id"),
            reason=rec.get("reason"),
            vehicle_id=str(rec.get("vehicle", "")),
            event_id=str(rec.get("event_id", "")),
        )


def _make_event(
    strategy: Strategy,
    exchange: UdsExchange,
    state: EcuState,
    policy: LoggingPolicy,
    reason: Optional[str] = None,
) -> SecurityEvent:
    sid = exchange.sid
    context = extract_context(sid, exchange.request, exchange.response, strategy, state.transfer_data)
    return SecurityEvent(
        strategy=strategy,
        sid=sid,
        ecu_id=exchange.target_ecu,
        source_address=exchange.source,
        timestamp=exchange.timestamp,
        context=context,
        autosar_supported=strategy in autosar_support(sid),
        autosar_event_id=policy.autosar_event_ids.get((sid, strategy)),
        reason=reason,
    )


def evaluate_exchange(
    policy: LoggingPolicy, exchange: UdsExchange, state: EcuState
) -> list[SecurityEvent]:
    sid = exchange.sid
    enabled = policy.strategies(sid)
    if not enabled or sid not in _CONTEXT_LAYOUT:
        return []
    resp = exchange.response
    events = []
    if IR in enabled and context_fields(sid, IR):
        negative = resp is not None and not resp.positive
        reason = classify_circumstance(exchange, state, policy)
        if negative or reason is not None:
            events.append(_make_event(IR, exchange, state, policy, reason))
    if FE in enabled and context_fields(sid, FE) and resp is not None and resp.positive:
        events.append(_make_event(FE, exchange, state, policy))
    return events


# --- files ------------------------------------------------------------------


def _parse_strategies(value: Any, line: Optional[int]) -> frozenset[Strategy]:
    try:
        return frozenset(Strategy(str(v)) for v in value)
    except (ValueError, TypeError) as exc:
        raise _yamlio.ConfigError(f"bad strategy list {value!r}", line=line) from exc


def policy_from_mapping(doc: dict[str, Any], path: str | None = None) -> LoggingPolicy:
    line = doc.get(_yamlio.LINE)
    try:
        enabled = {
            _yamlio.as_int(sid): _parse_strategies(strats, _yamlio.line_of(doc.get("strategies")) or line)
            for sid, strats in (doc.get("strategies") or {}).items()
            if sid != _yamlio.LINE
        }
        ar_ids = {}
        for key, value in (doc.get("autosar_event_ids") or {}).items():
            if key == _yamlio.LINE:
                continue
            sid_text, _, strat = str(key).partition("/")
            ar_ids[(_yamlio.as_int(sid_text), Strategy(strat))] = int(value)
        return LoggingPolicy(
            enabled=enabled,
            speed_threshold_kph=float(doc.get("speed_threshold_kph", 5.0)),
            state_changing_sids=frozenset(
                _yamlio.as_int(s) for s in doc.get("state_changing_sids", sorted(STATE_CHANGING_SIDS))
            ),
            protected_sids=_yamlio.int_map(doc.get("protected_sids")),
            protected_dids=_yamlio.int_map(doc.get("protected_dids")),
            dev_only_sids=frozenset(_yamlio.as_int(s) for s in doc.get("dev_only_sids") or ()),
            autosar_event_ids=ar_ids,
        )
    except _yamlio.ConfigError as exc:
        if path is not None and exc.path is None:
            raise exc.at(path) from exc
        raise
    except (ValueError, TypeError, AttributeError) as exc:
        raise _yamlio.ConfigError(str(exc), path, line) from exc


def load_policy(path: str | Path) -> LoggingPolicy:
    doc = _yamlio.load(path)
    if not isinstance(doc, dict):
        raise _yamlio.ConfigError("policy file must be a mapping", str(path), 1)
    return policy_from_mapping(doc, str(path))


def policy_to_mapping(policy: LoggingPolicy) -> dict[str, Any]:
    order = {IR: 0, FE: 1, MFI: 2}
    return {
        "strategies": {
            _yamlio.hexbyte(sid): [s.value for s in sorted(strats, key=order.get)]
            for sid, strats in sorted(policy.enabled.items())
        },
        "speed_threshold_kph": policy.speed_threshold_kph,
        "state_changing_sids": [_yamlio.hexbyte(s) for s in sorted(policy.state_changing_sids)],
        "protected_sids": {_yamlio.hexbyte(k): v for k, v in sorted(policy.protected_sids.items())},
        "protected_dids": {f"0x{k:04X}": v for k, v in sorted(policy.protected_dids.items())},
        "dev_only_sids": [_yamlio.hexbyte(s) for s in sorted(policy.dev_only_sids)],
        "autosar_event_ids": {
            f"{_yamlio.hexbyte(sid)}/{strat.value}": v
            for (sid, strat), v in sorted(policy.autosar_event_ids.items(), key=lambda kv: (kv[0][0], kv[0][1].value))
        },
    }


def save_policy(path: str | Path, policy: LoggingPolicy) -> None:
    _yamlio.dump(path, policy_to_mapping(policy))


def write_events(path: str | Path, events: Iterable[SecurityEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_record(), separators=(",", ":")) + "\n")


def read_events(path: str | Path) -> list[SecurityEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(SecurityEvent.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise _yamlio.ConfigError(str(exc), str(path), lineno) from exc
    return out


__all__ = [
    "AUTOSAR_SUPPORTED_SIDS",
    "CONTEXT_TABLE_SIDS",
    "EcuState",
    "FE",
    "IR",
    "LoggingPolicy",
    "MFI",
    "NoContextDefinedError",
    "SecurityEvent",
    "Strategy",
    "autosar_context_fields",
    "autosar_support",
    "classify_circumstance",
    "context_fields",
    "evaluate_exchange",
    "extract_context",
    "hash_payload",
    "load_policy",
    "save_policy",
    "update_state",
]
