"""Message Flow Inconsistency checks from a gateway / network sensor vantage point."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from udsmon import _yamlio
from udsmon.codec import UdsExchange
from udsmon.sensor import MFI, SecurityEvent

UNEXPECTED_SOURCE = "unexpected-source"
MODIFIED_IN_TRANSIT = "modified-in-transit"
ROUTED_WITHOUT_ORIGINAL = "routed-without-original"
BAD_SEQUENCE = "bad-sequence"

PAIRING_WINDOW_MS = 2000
SEQUENCE_THRESHOLD = 3

SEED_OR_CHALLENGE = {0x27: None, 0x29: frozenset((0x01, 0x02, 0x05))}
KEY_OR_PROOF = {0x27: None, 0x29: frozenset((0x03, 0x06, 0x07))}


class TopologyError(LookupError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class RoutingExpectation:
    """Scenario topology: where ECUs live, who may talk to them, how the gateway routes."""

    ecu_links: dict[str, str]
    permitted: dict[tuple[str, Optional[int]], frozenset[int]] = field(default_factory=dict)
    routes: frozenset[tuple[str, str]] = frozenset()
    pairing_window_ms: int = PAIRING_WINDOW_MS
    sequence_threshold: int = SEQUENCE_THRESHOLD

    def __post_init__(self) -> None:
        links = set(self.ecu_links.values()) | {l for pair in self.routes for l in pair}
        for ecu, _sid in self.permitted:
            if ecu not in self.ecu_links:
                raise TopologyError(f"permitted-source entry for unknown ECU {ecu!r}")
        if self.sequence_threshold < 1:
            raise ValueError("sequence threshold must be >= 1")
        object.__setattr__(self, "_links", frozenset(links))

    @property
    def links(self) -> frozenset[str]:
        return self._links  # type: ignore[attr-defined]

    def permitted_sources(self, ecu: str, sid: int) -> frozenset[int]:
        if ecu not in self.ecu_links:
            raise TopologyError(f"unknown target ECU {ecu!r}")
        return self.permitted.get((ecu, None), frozenset()) | self.permitted.get((ecu, sid), frozenset())

    def upstream_links(self, link: str) -> frozenset[str]:
        return frozenset(up for up, down in self.routes if down == link)

    def is_delivery(self, exchange: UdsExchange) -> bool:
        """True when the exchange is observed on the target ECU's own segment."""
        return self.ecu_links.get(exchange.target_ecu) == exchange.link


@dataclass(frozen=True)
class MfiEvent:
    kind: str
    sid: int
    target_ecu: str
    observed_origin: int
    expected_origins: frozenset[int]
    detail: str
    timestamp: int = 0

    def to_security_event(self) -> SecurityEvent:
        return SecurityEvent(
            strategy=MFI,
            sid=self.sid,
            ecu_id=self.target_ecu,
            source_address=self.observed_origin,
            timestamp=self.timestamp,
            context={
                "sid": self.sid,
                "target_ecu": self.target_ecu,
                "observed_origin": self.observed_origin,
                "expected_origin": sorted(self.expected_origins),
            },
            reason=self.kind,
        )


def check_source(expect: RoutingExpectation, exchange: UdsExchange) -> Optional[MfiEvent]:
    allowed = expect.permitted_sources(exchange.target_ecu, exchange.sid)
    if exchange.source in allowed:
        return None
    return MfiEvent(
        UNEXPECTED_SOURCE,
        exchange.sid,
        exchange.target_ecu,
        exchange.source,
        allowed,
        f"source 0x{exchange.source:04X} not permitted for sid 0x{exchange.sid:02X}",
        exchange.timestamp,
    )


def check_routing(
    expect: RoutingExpectation, upstream: Optional[UdsExchange], downstream: UdsExchange
) -> Optional[MfiEvent]:
    allowed = expect.permitted.get((downstream.target_ecu, None), frozenset()) | expect.permitted.get(
        (downstream.target_ecu, downstream.sid), frozenset()
    )
    if upstream is None:
        return MfiEvent(
            ROUTED_WITHOUT_ORIGINAL,
            downstream.sid,
            downstream.target_ecu,
            downstream.source,
            allowed,
            f"no original on {sorted(expect.upstream_links(downstream.link))} for message on {downstream.link}",
            downstream.timestamp,
        )
    diffs = []
    if upstream.request_bytes != downstream.request_bytes:
        diffs.append("request")
    if upstream.response_bytes != downstream.response_bytes:
        diffs.append("response")
    if upstream.source != downstream.source:
        diffs.append("source")
    if not diffs:
        return None
    return MfiEvent(
        MODIFIED_IN_TRANSIT,
        downstream.sid,
        downstream.target_ecu,
        downstream.source,
        allowed,
        f"{'/'.join(diffs)} differs from original on {upstream.link}",
        downstream.timestamp,
    )


def _is_seed(sid: int, sf: int) -> bool:
    allowed = SEED_OR_CHALLENGE[sid]
    return sf % 2 == 1 if allowed is None else sf in allowed


def _is_key(sid: int, sf: int) -> bool:
    allowed = KEY_OR_PROOF[sid]
    return (sf != 0 and sf % 2 == 0) if allowed is None else sf in allowed


def check_sequence(
    window: list[UdsExchange], threshold: int = SEQUENCE_THRESHOLD
) -> list[MfiEvent]:
    """Flag runs of seed/challenge requests that never get a key/proof.

    Runs are tracked per (service, source); one event per run once it reaches
    ``threshold`` requests.
    """
    for a, b in zip(window, window[1:]):
        if b.timestamp < a.timestamp:
            raise PreconditionError("sequence window must be sorted by timestamp")
    runs: dict[tuple[int, int], int] = defaultdict(int)
    events = []
    for ex in window:
        req = ex.request
        if req.sid not in SEED_OR_CHALLENGE or req.subfunction is None:
            continue
        sf = req.subfunction & 0x7F
        key = (req.sid, ex.source)
        if _is_seed(req.sid, sf):
            runs[key] += 1
            if runs[key] == threshold:
                label = "seed requests" if req.sid == 0x27 else "challenge requests"
                events.append(
                    MfiEvent(
                        BAD_SEQUENCE,
                        req.sid,
                        ex.target_ecu,
                        ex.source,
                        frozenset(),
                        f"{threshold} {label} without a completing response",
                        ex.timestamp,
                    )
                )
        elif _is_key(req.sid, sf):
            runs[key] = 0
    return events


class FlowMonitor:
    """Runs all MFI checks over a merged multi-link trace."""

    def __init__(self, expect: RoutingExpectation):
        self.expect = expect

    def run(self, trace: Iterable[UdsExchange]) -> list[MfiEvent]:
        expect = self.expect
        pending: dict[tuple[str, str, int], deque[UdsExchange]] = defaultdict(deque)
        per_ecu: dict[str, list[UdsExchange]] = defaultdict(list)
        events: list[MfiEvent] = []
        downstream_links = {down for _up, down in expect.routes}
        for ex in trace:
            if ex.target_ecu not in expect.ecu_links:
                raise TopologyError(f"unknown target ECU {ex.target_ecu!r}")
            if expect.is_delivery(ex):
                ev = check_source(expect, ex)
                if ev is not None:
                    events.append(ev)
                per_ecu[ex.target_ecu].append(ex)
                if ex.link in downstream_links:
                    original = self._pair(pending, ex)
                    ev = check_routing(expect, original, ex)
                    if ev is not None:
                        events.append(ev)
            elif any((ex.link, down) in expect.routes for down in downstream_links):
                pending[(ex.link, ex.target_ecu, ex.sid)].append(ex)
        for ecu in sorted(per_ecu):
            events.extend(check_sequence(per_ecu[ecu], expect.sequence_threshold))
        events.sort(key=lambda e: e.timestamp)
        return events

    def _pair(self, pending, downstream: UdsExchange) -> Optional[UdsExchange]:
        best = None
        for up_link in sorted(self.expect.upstream_links(downstream.link)):
            queue = pending.get((up_link, downstream.target_ecu, downstream.sid))
            if not queue:
                continue
            while queue and downstream.timestamp - queue[0].timestamp >= self.expect.pairing_window_ms:
                queue.popleft()
            if queue and queue[0].timestamp <= downstream.timestamp:
                if best is None or queue[0].timestamp < best[1][0].timestamp:
                    best = (up_link, queue)
        if best is None:
            return None
        return best[1].popleft()


# --- config file ------------------------------------------------------------


def topology_from_mapping(doc: dict[str, Any], path: str | None = None) -> RoutingExpectation:
    try:
        ecus = {}
        for name, spec in (doc.get("ecus") or {}).items():
            if name == _yamlio.LINE:
                continue
            ecus[str(name)] = str(spec["link"]) if isinstance(spec, dict) else str(spec)
        permitted: dict[tuple[str, Optional[int]], frozenset[int]] = {}
        for entry in doc.get("permitted_sources") or []:
            line = _yamlio.line_of(entry)
            ecu = str(entry["ecu"])
            if ecu not in ecus:
                raise _yamlio.ConfigError(f"unknown ECU {ecu!r}", path, line)
            sids = entry.get("sids", "*")
            sources = frozenset(_yamlio.as_int(s) for s in entry.get("sources") or [])
            keys = [None] if sids == "*" else [_yamlio.as_int(s) for s in sids]
            for sid in keys:
                permitted[(ecu, sid)] = permitted.get((ecu, sid), frozenset()) | sources
        routes = []
        for entry in doc.get("routes") or []:
            routes.append((str(entry["upstream"]), str(entry["downstream"])))
        return RoutingExpectation(
            ecu_links=ecus,
            permitted=permitted,
            routes=frozenset(routes),
            pairing_window_ms=int(doc.get("pairing_window_ms", PAIRING_WINDOW_MS)),
            sequence_threshold=int(doc.get("sequence_threshold", SEQUENCE_THRESHOLD)),
        )
    except _yamlio.ConfigError:
        raise
    except (KeyError, ValueError, TypeError, AttributeError, TopologyError) as exc:
        raise _yamlio.ConfigError(f"bad topology: {exc}", path, _yamlio.line_of(doc)) from exc


def topology_to_mapping(expect: RoutingExpectation) -> dict[str, Any]:
    entries = []
    for (ecu, sid), sources in sorted(
        expect.permitted.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])
    ):
        entries.append(
            {
                "ecu": ecu,
                "sids": "*" if sid is None else [_yamlio.hexbyte(sid)],
                "sources": [f"0x{s:04X}" for s in sorted(sources)],
            }
        )
    return {
        "ecus": {ecu: {"link": link} for ecu, link in sorted(expect.ecu_links.items())},
        "permitted_sources": entries,
        "routes": [{"upstream": u, "downstream": d} for u, d in sorted(expect.routes)],
        "pairing_window_ms": expect.pairing_window_ms,
        "sequence_threshold": expect.sequence_threshold,
    }


def load_topology(path: str | Path) -> RoutingExpectation:
    doc = _yamlio.load(path)
    if not isinstance(doc, dict):
        raise _yamlio.ConfigError("topology file must be a mapping", str(path), 1)
    return topology_from_mapping(doc, str(path))


def save_topology(path: str | Path, expect: RoutingExpectation) -> None:
    _yamlio.dump(path, topology_to_mapping(expect))
