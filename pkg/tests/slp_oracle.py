"""Brute-force reference for sliding-window counting with reset."""

from __future__ import annotations


def slp_oracle(rule, events):
    """Rescan the whole candidate window at every event: O(n^2).

    Returns the list of contributing event-id tuples, one per alert.
    """
    groups = {}
    for ev in events:
        if rule.predicate.matches(ev):
            key = tuple({"vehicle": ev.vehicle_id, "ecu": ev.ecu_id, "source": ev.source_address}[k] for k in rule.group_by)
            groups.setdefault(key, []).append(ev)
    alerts = []
    for key in groups:
        seq = groups[key]
        floor = 0  # events before this index were consumed by an earlier alert
        for j in range(len(seq)):
            members = [seq[i] for i in range(floor, j + 1) if seq[j].timestamp - seq[i].timestamp < rule.window_ms]
            if len(members) >= rule.threshold:
                alerts.append((seq[j].timestamp, tuple(m.event_id for m in members)))
                floor = j + 1
    return [ids for _ts, ids in sorted(alerts)]


def random_stream(rng, n):
    from udsmon.sensor import FE, IR, MFI, SecurityEvent

    t = rng.randint(0, 1000)
    out = []
    for i in range(n):
        t += rng.choice((0, 0, 1, 5, 50, 400, 2000, 9000))
        strategy = rng.choice((IR, IR, FE, MFI))
        sid = rng.choice((0x27, 0x22, 0x31))
        sf = rng.choice((1, 2, 3, 4)) if sid in (0x27, 0x31) else None
        out.append(
            SecurityEvent(
                strategy, sid, rng.choice(("ECM", "BCM")), rng.choice((0x0E80, 0x0760)), t,
                {"sid": sid, "sf": sf, "nrc": rng.choice((0x35, 0x13, None))},
                vehicle_id=rng.choice(("V1", "V2")), event_id=f"E{i:04d}",
            )
        )
    return out


def random_rule(rng):
    from udsmon.detection import EventPredicate, SlpRule
    from udsmon.sensor import FE, IR

    pred = rng.choice(
        (
            EventPredicate(),
            EventPredicate(strategies=frozenset({IR})),
            EventPredicate(strategies=frozenset({IR}), sids=frozenset({0x27}), sf_parity="even"),
            EventPredicate(sids=frozenset({0x22, 0x31}), strategies=frozenset({IR, FE})),
            EventPredicate(nrcs=frozenset({0x35})),
        )
    )
    keys = [k for k in ("vehicle", "ecu", "source") if rng.random() < 0.5]
    return SlpRule("r", pred, rng.randint(1, 12), rng.choice((1, 10, 500, 3000, 60_000)), tuple(keys))
