"""Turn a recorded multi-link trace into the vehicle's security event stream."""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable, Optional

from udsmon.codec import UdsExchange
from udsmon.flow import FlowMonitor, RoutingExpectation
from udsmon.sensor import MFI, EcuState, LoggingPolicy, SecurityEvent, evaluate_exchange, update_state
from udsmon.store import ContextStore


def collect_events(
    trace: Iterable[UdsExchange],
    policy: LoggingPolicy,
    store: Optional[ContextStore] = None,
    topology: Optional[RoutingExpectation] = None,
) -> list[SecurityEvent]:
    """Run the ECU sensors and the gateway monitor over ``trace``.

    ECU sensors only see the copy of each request delivered on the ECU's own
    segment. Vehicle speed and workshop flags come from the store's timeline,
    the ECU mode from its inventory.
    """
    trace = list(trace)
    states: dict[str, EcuState] = {}
    tagged: list[tuple[int, int, SecurityEvent]] = []
    for i, ex in enumerate(trace):
        if topology is not None and not topology.is_delivery(ex):
            continue
        state = states.get(ex.target_ecu)
        if state is None:
            rec = store.ecu_record(ex.target_ecu) if store else None
            state = EcuState(ex.target_ecu, mode=rec.mode if rec else "production")
        vid = store.vehicle_of(ex.target_ecu) if store else None
        if vid is not None:
            sample = store.state_at(vid, ex.timestamp)
            if sample is not None:
                state = replace(
                    state,
                    vehicle_speed_kph=sample.speed_kph,
                    workshop_session_active=sample.workshop_session,
                )
        for ev in evaluate_exchange(policy, ex, state):
            tagged.append((ex.timestamp, i, ev))
        states[ex.target_ecu] = update_state(state, ex)

    if topology is not None:
        for j, mfi in enumerate(FlowMonitor(topology).run(trace)):
            if MFI in policy.strategies(mfi.sid):
                tagged.append((mfi.timestamp, len(trace) + j, mfi.to_security_event()))

    tagged.sort(key=lambda t: (t[0], t[1]))
    out = []
    for n, (_ts, _i, ev) in enumerate(tagged):
        vid = (store.vehicle_of(ev.ecu_id) if store else None) or ""
        out.append(replace(ev, vehicle_id=vid, event_id=f"E{n:06d}"))
    return out
