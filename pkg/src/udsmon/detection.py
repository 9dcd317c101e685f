"""Detection over security events: counting rules, context checks, threat intel matching."""

from __future__ import annotations

import hashlib
import json
from bisect import bisect_left, bisect_right
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from udsmon import _yamlio
from udsmon.catalog import technique_ids
from udsmon.sensor import FE, SecurityEvent, Strategy
from udsmon.store import ContextStore, FirmwareStatus, StoreLookupError

SLP, CLC, PTI = "SLP", "CLC", "PTI"
SEVERITIES = ("info", "warn", "critical")
GROUP_KEYS = ("vehicle", "ecu", "source")

VEHICLE_STATUS = "vehicle-status-consistency"
PERMISSION = "permission-consistency"
CONFIGURATION = "configuration-consistency"
CROSS_LOG = "cross-log-consistency"
FIRMWARE_HASH = "firmware-hash-validation"
SENSITIVE_REFERENCE = "sensitive-reference"
CHECKS = (VEHICLE_STATUS, PERMISSION, CONFIGURATION, CROSS_LOG, FIRMWARE_HASH, SENSITIVE_REFERENCE)

PERMISSION_LOOKBACK_MS = 10 * 60 * 1000
TI_SOURCES = ("public", "disclosed", "internal-test")
ASSET_TAG_KINDS = ("model", "ecu_type")
TI_TAG_KINDS = ("model", "ecu_type", "technique", "sid")


class PreconditionError(ValueError):
    pass


class ContextUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class EventPredicate:
    """Conjunction of optional constraints on one security event."""

    strategies: Optional[frozenset[Strategy]] = None
    sids: Optional[frozenset[int]] = None
    subfunctions: Optional[frozenset[int]] = None
    exclude_subfunctions: frozenset[int] = frozenset()
    sf_parity: Optional[str] = None
    nrcs: Optional[frozenset[int]] = None
    reasons: Optional[frozenset[str]] = None

    def matches(self, ev: SecurityEvent) -> bool:
        if self.strategies is not None and ev.strategy not in self.strategies:
            return False
        if self.sids is not None and ev.sid not in self.sids:
            return False
        if self.subfunctions is not None or self.exclude_subfunctions or self.sf_parity:
            sf = ev.context.get("sf")
            if sf is None:
                return False
            sf &= 0x7F
            if self.subfunctions is not None and sf not in self.subfunctions:
                return False
            if sf in self.exclude_subfunctions:
                return False
            if self.sf_parity == "odd" and sf % 2 != 1:
                return False
            if self.sf_parity == "even" and (sf == 0 or sf % 2 != 0):
                return False
        if self.nrcs is not None and ev.context.get("nrc") not in self.nrcs:
            return False
        if self.reasons is not None and ev.reason not in self.reasons:
            return False
        return True


@dataclass(frozen=True)
class SlpRule:
    rule_id: str
    predicate: EventPredicate
    threshold: int
    window_ms: int
    group_by: tuple[str, ...] = ("vehicle", "ecu")
    techniques: tuple[str, ...] = ()
    severity: str = "warn"

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ValueError(f"{self.rule_id}: threshold must be >= 1")
        if self.window_ms <= 0:
            raise ValueError(f"{self.rule_id}: window must be positive")
        if not set(self.group_by) <= set(GROUP_KEYS):
            raise ValueError(f"{self.rule_id}: group_by must be a subset of {GROUP_KEYS}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"{self.rule_id}: unknown severity {self.severity!r}")


@dataclass(frozen=True)
class ClcRule:
    rule_id: str
    trigger: EventPredicate
    check: str
    techniques: tuple[str, ...] = ()
    params: dict[str, Any] = field(default_factory=dict)
    severity: str = "warn"

    def __post_init__(self) -> None:
        if self.check not in CHECKS:
            raise ValueError(f"{self.rule_id}: unknown check {self.check!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"{self.rule_id}: unknown severity {self.severity!r}")


@dataclass(frozen=True)
class ThreatIntelItem:
    item_id: str
    source: str
    tags: frozenset[tuple[str, str]]
    text: str = ""

    def __post_init__(self) -> None:
        if self.source not in TI_SOURCES:
            raise ValueError(f"{self.item_id}: unknown source kind {self.source!r}")
        if not self.tags:
            raise ValueError(f"{self.item_id}: at least one tag is required")
        for kind, _value in self.tags:
            if kind not in TI_TAG_KINDS:
                raise ValueError(f"{self.item_id}: unknown tag kind {kind!r}")

    @property
    def techniques(self) -> tuple[str, ...]:
        return tuple(sorted(v for k, v in self.tags if k == "technique"))

    def to_record(self) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "source": self.source,
            "tags": [list(t) for t in sorted(self.tags)],
            "text": self.text,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ThreatIntelItem":
        return cls(
            item_id=str(rec["item_id"]),
            source=str(rec["source"]),
            tags=frozenset((str(k), str(v)) for k, v in rec["tags"]),
            text=str(rec.get("text", "")),
        )


@dataclass(frozen=True)
class Alert:
    alert_id: str
    strategy: str
    rule_id: str
    techniques: tuple[str, ...]
    vehicle_id: Optional[str]
    ecu_id: Optional[str]
    event_ids: tuple[str, ...] = ()
    ti_item_ids: tuple[str, ...] = ()
    window: Optional[tuple[int, int]] = None
    timestamp: Optional[int] = None
    explanation: str = ""
    severity: str = "warn"
    stage: str = "vsoc"
    context_fact: Optional[str] = None

    def to_record(self) -> dict[str, Any]:
        return {
            "alert_id": self.alert_id,
            "strategy": self.strategy,
            "rule": self.rule_id,
            "techniques": list(self.techniques),
            "vehicle": self.vehicle_id,
            "ecu": self.ecu_id,
            "events": list(self.event_ids),
            "ti_items": list(self.ti_item_ids),
            "window": None if self.window is None else list(self.window),
            "timestamp": self.timestamp,
            "severity": self.severity,
            "stage": self.stage,
            "context_fact": self.context_fact,
            "explanation": self.explanation,
        }


def _alert(strategy: str, rule_id: str, techniques: Iterable[str], **kw: Any) -> Alert:
    techniques = tuple(sorted(techniques))
    key = json.dumps(
        [strategy, rule_id, techniques, kw.get("vehicle_id"), kw.get("ecu_id"),
         list(kw.get("event_ids", ())), list(kw.get("ti_item_ids", ())), kw.get("timestamp")],
        separators=(",", ":"),
    )
    alert_id = hashlib.sha256(key.encode()).hexdigest()[:16]
    return Alert(alert_id=alert_id, strategy=strategy, rule_id=rule_id, techniques=techniques, **kw)


# --- SLP ----------------------------------------------------------------------


def _group_key(ev: SecurityEvent, keys: Sequence[str]) -> tuple:
    values = {"vehicle": ev.vehicle_id, "ecu": ev.ecu_id, "source": ev.source_address}
    return tuple(values[k] for k in keys)


def _check_sorted(events: Sequence[SecurityEvent]) -> None:
    for a, b in zip(events, events[1:]):
        if b.timestamp < a.timestamp:
            raise PreconditionError("event stream must be ordered by timestamp")


def slp_evaluate(rule: SlpRule, events: Sequence[SecurityEvent], stage: str = "vehicle") -> list[Alert]:
    """Sliding-window counting with reset.

    Matching events that fit in one window (``last - first < window_ms``) are
    counted per group; reaching the threshold raises an alert that consumes
    them, so no event contributes to two alerts.
    """
    _check_sorted(events)
    windows: dict[tuple, deque[SecurityEvent]] = defaultdict(deque)
    alerts = []
    for ev in events:
        if not rule.predicate.matches(ev):
            continue
        q = windows[_group_key(ev, rule.group_by)]
        q.append(ev)
        while ev.timestamp - q[0].timestamp >= rule.window_ms:
            q.popleft()
        if len(q) >= rule.threshold:
            members = list(q)
            q.clear()
            alerts.append(
                _alert(
                    SLP,
                    rule.rule_id,
                    rule.techniques,
                    vehicle_id=ev.vehicle_id or None,
                    ecu_id=ev.ecu_id if "ecu" in rule.group_by else None,
                    event_ids=tuple(m.event_id for m in members),
                    window=(members[0].timestamp, members[-1].timestamp),
                    timestamp=members[-1].timestamp,
                    explanation=f"{len(members)} matching events within {rule.window_ms} ms",
                    severity=rule.severity,
                    stage=stage,
                )
            )
    return alerts


# --- CLC ----------------------------------------------------------------------


class _Neighborhood:
    """Time-indexed view of the events around a triggering event."""

    def __init__(self, events: Sequence[SecurityEvent]):
        self.events = sorted(events, key=lambda e: e.timestamp)
        self.times = [e.timestamp for e in self.events]
        self.index = {id(e): i for i, e in enumerate(self.events)}

    def _position(self, ev: SecurityEvent) -> tuple[int, int]:
        # events at the same timestamp are ordered by stream position when known
        i = self.index.get(id(ev))
        if i is not None:
            return i, i + 1
        return bisect_right(self.times, ev.timestamp), bisect_right(self.times, ev.timestamp)

    def before(self, ev: SecurityEvent, lookback_ms: int) -> list[SecurityEvent]:
        lo = bisect_left(self.times, ev.timestamp - lookback_ms)
        hi, _ = self._position(ev)
        return self.events[lo:hi]

    def after(self, ev: SecurityEvent, lookahead_ms: int) -> list[SecurityEvent]:
        _, lo = self._position(ev)
        hi = bisect_right(self.times, ev.timestamp + lookahead_ms)
        return self.events[lo:hi]


def _predicate_from(doc: Any) -> EventPredicate:
    doc = dict(doc or {})

    def ints(key: str) -> Optional[frozenset[int]]:
        value = doc.get(key)
        return None if value is None else frozenset(_yamlio.as_int(v) for v in value)

    strategies = doc.get("strategies")
    reasons = doc.get("reasons")
    return EventPredicate(
        strategies=None if strategies is None else frozenset(Strategy(s) for s in strategies),
        sids=ints("sids"),
        subfunctions=ints("subfunctions"),
        exclude_subfunctions=ints("exclude_subfunctions") or frozenset(),
        sf_parity=doc.get("sf_parity"),
        nrcs=ints("nrcs"),
        reasons=None if reasons is None else frozenset(str(r) for r in reasons),
    )


def _vehicle_of(ev: SecurityEvent, ctx: ContextStore) -> Optional[str]:
    # events from vehicles missing in the inventory are not checked
    vid = ev.vehicle_id or ctx.vehicle_of(ev.ecu_id)
    return vid if vid in ctx.vehicles else None


def _check_vehicle_status(rule: ClcRule, ev: SecurityEvent, ctx: ContextStore, _nb) -> Optional[str]:
    vid = _vehicle_of(ev, ctx)
    if vid is None:
        return None
    if not ctx.in_maintenance(vid, ev.timestamp):
        return "outside any maintenance window"
    max_speed = rule.params.get("max_speed_kph")
    if max_speed is not None:
        sample = ctx.state_at(vid, ev.timestamp)
        if sample is not None and sample.speed_kph > float(max_speed):
            return f"vehicle moving at {sample.speed_kph:g} km/h"
    return None


def _unlock_events(nb: _Neighborhood, ev: SecurityEvent, lookback: int) -> bool:
    """True if the same client unlocked this ECU and no session change relocked it since."""
    unlocked = False
    for prior in nb.before(ev, lookback):
        if prior.ecu_id != ev.ecu_id or prior.strategy != FE:
            continue
        sf = prior.context.get("sf")
        sf = None if sf is None else sf & 0x7F
        if prior.source_address == ev.source_address and (
            (prior.sid == 0x27 and sf and sf % 2 == 0) or (prior.sid == 0x29 and sf in (0x03, 0x06, 0x07))
        ):
            unlocked = True
        elif prior.sid in (0x10, 0x11):
            unlocked = False
    return unlocked


def _check_permission(rule: ClcRule, ev: SecurityEvent, _ctx, nb: _Neighborhood) -> Optional[str]:
    lookback = int(rule.params.get("lookback_ms", PERMISSION_LOOKBACK_MS))
    if _unlock_events(nb, ev, lookback):
        return None
    return f"no SecurityAccess/Authentication by 0x{ev.source_address:04X} within {lookback} ms"


def _check_configuration(rule: ClcRule, ev: SecurityEvent, ctx: ContextStore, _nb) -> Optional[str]:
    vid = _vehicle_of(ev, ctx)
    if vid is None:
        return None
    rec = ctx.vehicle(vid)
    did = ev.context.get("did")
    if did is None:
        return "request carries no DID"
    if ev.sid == 0x2E:
        expected = rec.expected_dids.get(did)
        if expected is None:
            return f"DID 0x{did:04X} is not part of the expected configuration"
        if ev.context.get("data_hash") != expected:
            return f"DID 0x{did:04X} written with unexpected data"
    elif ev.sid == 0x2F:
        if did not in rec.io_control_allowed:
            return f"IO control of DID 0x{did:04X} is not allowed for this vehicle"
    return None


def _companion_matches(cand: SecurityEvent, ev: SecurityEvent, pred: EventPredicate, same: Sequence[str]) -> bool:
    if cand.ecu_id != ev.ecu_id or not pred.matches(cand):
        return False
    for key in same:
        if key == "source":
            if cand.source_address != ev.source_address:
                return False
        elif cand.context.get(key) != ev.context.get(key):
            return False
    return True


def _check_cross_log(rule: ClcRule, ev: SecurityEvent, _ctx, nb: _Neighborhood) -> Optional[str]:
    pred = _predicate_from(rule.params.get("requires"))
    direction = rule.params.get("direction", "before")
    within = int(rule.params.get("within_ms", PERMISSION_LOOKBACK_MS))
    same = tuple(rule.params.get("same", ()))
    pool = nb.before(ev, within) if direction == "before" else nb.after(ev, within)
    if any(_companion_matches(c, ev, pred, same) for c in pool):
        return None
    return f"no companion event {direction} within {within} ms"


def _check_firmware(rule: ClcRule, ev: SecurityEvent, ctx: ContextStore, nb: _Neighborhood) -> Optional[str]:
    digest = ev.context.get("transfer_hash")
    if digest is None:
        return None
    # only downloads install firmware; find the transfer this exit closes
    latest = None
    for prior in nb.before(ev, int(rule.params.get("lookback_ms", PERMISSION_LOOKBACK_MS))):
        if prior.ecu_id == ev.ecu_id and prior.strategy == FE and prior.sid in (0x34, 0x35):
            latest = prior
    if latest is None or latest.sid != 0x34:
        return None
    ecu = ctx.ecu_record(ev.ecu_id)
    if ecu is None:
        return None
    try:
        status = ctx.firmware_known(ecu.ecu_type, digest)
    except StoreLookupError:
        return f"no firmware registry for ECU type {ecu.ecu_type}"
    if status == FirmwareStatus.OLDER:
        return f"downgrade: digest {digest[:12]} is an older authorized release"
    if status == FirmwareStatus.UNKNOWN:
        return f"unauthorized firmware: digest {digest[:12]} not in registry"
    return None


def _check_sensitive(rule: ClcRule, ev: SecurityEvent, ctx: ContextStore, _nb) -> Optional[str]:
    c = ev.context
    dids = []
    for key in ("did_list", "source_did_list"):
        dids.extend(c.get(key) or [])
    if c.get("did") is not None:
        dids.append(c["did"])
    hits = [d for d in dids if ctx.sensitive.is_sensitive_did(d)]
    if hits:
        return "sensitive DID " + ", ".join(f"0x{d:04X}" for d in hits)
    addrs, sizes = c.get("mem_addr"), c.get("mem_size")
    if addrs is not None and sizes is not None:
        if not isinstance(addrs, list):
            addrs, sizes = [addrs], [sizes]
        for a, s in zip(addrs, sizes):
            if a is not None and s is not None and ctx.sensitive.overlaps_sensitive_memory(a, s):
                return f"sensitive memory range at 0x{a:X}+{s}"
    if c.get("rid") is not None and ctx.sensitive.is_sensitive_rid(c["rid"]):
        return f"sensitive routine 0x{c['rid']:04X}"
    if c.get("file_path") and ctx.sensitive.is_sensitive_path(c["file_path"]):
        return f"sensitive file {c['file_path']}"
    return None


_CHECKERS = {
    VEHICLE_STATUS: _check_vehicle_status,
    PERMISSION: _check_permission,
    CONFIGURATION: _check_configuration,
    CROSS_LOG: _check_cross_log,
    FIRMWARE_HASH: _check_firmware,
    SENSITIVE_REFERENCE: _check_sensitive,
}


def clc_evaluate(
    rule: ClcRule,
    event: SecurityEvent,
    ctx: Optional[ContextStore],
    neighborhood: Sequence[SecurityEvent] | _Neighborhood = (),
) -> Optional[Alert]:
    if not rule.trigger.matches(event):
        return None
    if ctx is None:
        raise ContextUnavailableError(f"{rule.rule_id}: no context snapshot for event {event.event_id}")
    nb = neighborhood if isinstance(neighborhood, _Neighborhood) else _Neighborhood(neighborhood)
    fact = _CHECKERS[rule.check](rule, event, ctx, nb)
    if fact is None:
        return None
    return _alert(
        CLC,
        rule.rule_id,
        rule.techniques,
        vehicle_id=_vehicle_of(event, ctx),
        ecu_id=event.ecu_id,
        event_ids=(event.event_id,),
        timestamp=event.timestamp,
        explanation=f"{rule.check}: {fact}",
        severity=rule.severity,
        stage="vsoc",
        context_fact=fact,
    )


# --- PTI ----------------------------------------------------------------------


def pti_evaluate(items: Iterable[ThreatIntelItem], assets: Iterable[tuple[str, str]]) -> list[Alert]:
    fleet = {t for t in assets if t[0] in ASSET_TAG_KINDS}
    alerts = []
    for item in sorted(items, key=lambda i: i.item_id):
        hits = sorted(item.tags & fleet)
        if not hits:
            continue
        alerts.append(
            _alert(
                PTI,
                "threat-intel",
                item.techniques,
                vehicle_id=None,
                ecu_id=None,
                ti_item_ids=(item.item_id,),
                explanation="matches fleet assets " + ", ".join(f"{k}={v}" for k, v in hits),
                severity="critical" if item.source == "public" else "warn",
                stage="vsoc",
            )
        )
    return alerts


# --- pipeline -----------------------------------------------------------------


@dataclass(frozen=True)
class RuleSet:
    slp: tuple[SlpRule, ...] = ()
    clc: tuple[ClcRule, ...] = ()

    @classmethod
    def default(cls) -> "RuleSet":
        return load_rules(_yamlio.data_path("default_rules.yaml"))


@dataclass(frozen=True)
class AlertReport:
    alerts: tuple[Alert, ...] = ()
    deferred: tuple[tuple[str, str], ...] = ()  # (rule id, event id) awaiting context

    @property
    def by_technique(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for a in self.alerts:
            for t in a.techniques:
                out[t].append(a.alert_id)
        return dict(sorted(out.items()))

    @property
    def strategies_fired(self) -> dict[str, list[str]]:
        out: dict[str, set[str]] = defaultdict(set)
        for a in self.alerts:
            for t in a.techniques:
                out[t].add(a.strategy)
        return {t: sorted(s) for t, s in sorted(out.items())}

    def to_mapping(self) -> dict[str, Any]:
        return {
            "alerts": [a.to_record() for a in self.alerts],
            "by_technique": self.by_technique,
            "strategies_fired": self.strategies_fired,
            "deferred": [list(d) for d in self.deferred],
        }


_STRATEGY_ORDER = {SLP: 0, CLC: 1, PTI: 2}


def run_pipeline(
    rules: RuleSet,
    events: Iterable[SecurityEvent],
    ctx: Optional[ContextStore],
    ti: Iterable[ThreatIntelItem] = (),
) -> AlertReport:
    events = sorted(events, key=lambda e: e.timestamp)
    partitions: dict[str, list[SecurityEvent]] = defaultdict(list)
    for ev in events:
        partitions[ev.vehicle_id].append(ev)

    alerts: list[Alert] = []
    deferred: list[tuple[str, str]] = []
    for vid in sorted(partitions):
        stream = partitions[vid]
        for rule in rules.slp:
            alerts.extend(slp_evaluate(rule, stream, stage="vehicle"))
        nb = _Neighborhood(stream)
        for ev in stream:
            for rule in rules.clc:
                if not rule.trigger.matches(ev):
                    continue
                if ctx is None:
                    deferred.append((rule.rule_id, ev.event_id))
                    continue
                alert = clc_evaluate(rule, ev, ctx, nb)
                if alert is not None:
                    alerts.append(alert)
    if ctx is not None:
        alerts.extend(pti_evaluate(ti, ctx.asset_tags()))

    alerts.sort(key=lambda a: (-1 if a.timestamp is None else a.timestamp, _STRATEGY_ORDER[a.strategy], a.rule_id, a.alert_id))
    return AlertReport(tuple(alerts), tuple(deferred))


# --- files --------------------------------------------------------------------


def _techniques(value: Any, rule_id: str, line: Optional[int]) -> tuple[str, ...]:
    tags = tuple(str(t) for t in value or ())
    unknown = sorted(set(tags) - technique_ids())
    if unknown:
        raise _yamlio.ConfigError(f"rule {rule_id}: unknown technique tags {unknown}", line=line)
    return tags


def rules_from_mapping(doc: Any) -> RuleSet:
    if doc is None:
        return RuleSet()
    if not isinstance(doc, dict):
        raise _yamlio.ConfigError("rules file must be a mapping", line=1)
    slp, clc = [], []
    seen = set()
    for entry in doc.get("slp") or []:
        line = _yamlio.line_of(entry)
        try:
            rid = str(entry["id"])
            rule = SlpRule(
                rule_id=rid,
                predicate=_predicate_from(_yamlio.strip(entry.get("match"))),
                threshold=int(entry["threshold"]),
                window_ms=int(entry["window_ms"]),
                group_by=tuple(entry.get("group_by") or ("vehicle", "ecu")),
                techniques=_techniques(entry.get("techniques"), rid, line),
                severity=str(entry.get("severity", "warn")),
            )
        except _yamlio.ConfigError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise _yamlio.ConfigError(f"bad SLP rule: {exc}", line=line) from exc
        if rid in seen:
            raise _yamlio.ConfigError(f"duplicate rule id {rid}", line=line)
        seen.add(rid)
        slp.append(rule)
    for entry in doc.get("clc") or []:
        line = _yamlio.line_of(entry)
        try:
            rid = str(entry["id"])
            rule = ClcRule(
                rule_id=rid,
                trigger=_predicate_from(_yamlio.strip(entry.get("match"))),
                check=str(entry["check"]),
                techniques=_techniques(entry.get("techniques"), rid, line),
                params=_yamlio.strip(entry.get("params") or {}),
                severity=str(entry.get("severity", "warn")),
            )
        except _yamlio.ConfigError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise _yamlio.ConfigError(f"bad CLC rule: {exc}", line=line) from exc
        if rid in seen:
            raise _yamlio.ConfigError(f"duplicate rule id {rid}", line=line)
        seen.add(rid)
        clc.append(rule)
    return RuleSet(tuple(slp), tuple(clc))


def load_rules(path: str | Path) -> RuleSet:
    doc = _yamlio.load(path)
    try:
        return rules_from_mapping(doc)
    except _yamlio.ConfigError as exc:
        raise exc.at(str(path)) from exc


def read_ti(path: str | Path) -> list[ThreatIntelItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                items.append(ThreatIntelItem.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise _yamlio.ConfigError(str(exc), str(path), lineno) from exc
    return items


def write_ti(path: str | Path, items: Iterable[ThreatIntelItem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_record(), separators=(",", ":"), ensure_ascii=False) + "\n")
