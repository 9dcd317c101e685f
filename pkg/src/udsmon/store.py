"""Backend context for contextualized checks.

The store is an immutable snapshot. Time intervals and memory ranges are
half-open everywhere: ``[start, end)`` and ``[addr, addr + size)``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional

from udsmon import _yamlio
from udsmon._yamlio import ConfigError


class StoreLookupError(LookupError):
    pass


class FirmwareStatus(str, Enum):
    CURRENT = "authorized-current"
    OLDER = "authorized-older"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class MaintenanceWindow:
    start: int
    end: int
    workshop: str = ""


@dataclass(frozen=True)
class EcuRecord:
    ecu_type: str
    mode: str = "production"


@dataclass(frozen=True)
class VehicleRecord:
    vehicle_id: str
    model: str
    ecus: dict[str, EcuRecord] = field(default_factory=dict)
    maintenance: tuple[MaintenanceWindow, ...] = ()
    # did -> digest of the data record the backend expects to be written
    expected_dids: dict[int, str] = field(default_factory=dict)
    io_control_allowed: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        windows = tuple(sorted(self.maintenance, key=lambda w: w.start))
        for w in windows:
            if w.end <= w.start:
                raise ValueError(f"maintenance window [{w.start}, {w.end}) is empty or reversed")
        for a, b in zip(windows, windows[1:]):
            if b.start < a.end:
                raise ValueError(f"maintenance windows overlap at {b.start}")
        object.__setattr__(self, "maintenance", windows)


@dataclass(frozen=True)
class FirmwareRelease:
    version: int
    digest: str
    label: str = ""


@dataclass(frozen=True)
class MemoryRange:
    start: int
    size: int
    label: str = ""

    @property
    def end(self) -> int:
        return self.start + self.size


def normalize_ranges(ranges: Iterable[MemoryRange]) -> tuple[MemoryRange, ...]:
    merged: list[MemoryRange] = []
    for r in sorted((r for r in ranges if r.size > 0), key=lambda r: (r.start, r.end)):
        if merged and r.start < merged[-1].end:
            last = merged[-1]
            labels = last.label if r.label in last.label.split("+") else f"{last.label}+{r.label}"
            merged[-1] = MemoryRange(last.start, max(last.end, r.end) - last.start, labels)
        else:
            merged.append(r)
    return tuple(merged)


@dataclass(frozen=True)
class SensitiveRegistry:
    dids: dict[int, str] = field(default_factory=dict)
    memory: tuple[MemoryRange, ...] = ()
    rids: dict[int, str] = field(default_factory=dict)
    file_paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "memory", normalize_ranges(self.memory))
        object.__setattr__(self, "_starts", [r.start for r in self.memory])

    def is_sensitive_did(self, did: int) -> bool:
        return did in self.dids

    def overlaps_sensitive_memory(self, addr: int, size: int) -> bool:
        if size <= 0:
            return False
        end = addr + size
        # ranges are disjoint and sorted: only the last range starting before `end` can overlap
        i = bisect.bisect_left(self._starts, end) - 1  # type: ignore[attr-defined]
        return i >= 0 and self.memory[i].end > addr

    def is_sensitive_rid(self, rid: int) -> bool:
        return rid in self.rids

    def is_sensitive_path(self, path: str) -> bool:
        return any(path.startswith(prefix) for prefix in self.file_paths)


@dataclass(frozen=True)
class StateSample:
    timestamp: int
    speed_kph: float = 0.0
    mode: str = "production"
    workshop_session: bool = False
    campaign: Optional[str] = None


@dataclass(frozen=True)
class ContextStore:
    vehicles: dict[str, VehicleRecord] = field(default_factory=dict)
    firmware: dict[str, tuple[FirmwareRelease, ...]] = field(default_factory=dict)
    sensitive: SensitiveRegistry = field(default_factory=SensitiveRegistry)
    timeline: dict[str, tuple[StateSample, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        fw = {}
        for ecu_type, releases in self.firmware.items():
            ordered = tuple(sorted(releases, key=lambda r: r.version))
            versions = [r.version for r in ordered]
            if len(set(versions)) != len(versions):
                raise ValueError(f"firmware versions for {ecu_type} are not strictly ordered")
            digests = [r.digest for r in ordered]
            if len(set(digests)) != len(digests):
                raise ValueError(f"duplicate firmware digest for {ecu_type}")
            fw[ecu_type] = ordered
        object.__setattr__(self, "firmware", fw)
        tl = {}
        for vid, samples in self.timeline.items():
            samples = tuple(samples)
            for a, b in zip(samples, samples[1:]):
                if b.timestamp <= a.timestamp:
                    raise ValueError(f"timeline for {vid} is not strictly increasing at {b.timestamp}")
            tl[vid] = samples
        object.__setattr__(self, "timeline", tl)
        ecu_index = {}
        for vid, rec in self.vehicles.items():
            for ecu_id in rec.ecus:
                ecu_index[ecu_id] = vid
        object.__setattr__(self, "_ecu_index", ecu_index)

    def vehicle(self, vehicle_id: str) -> VehicleRecord:
        try:
            return self.vehicles[vehicle_id]
        except KeyError:
            raise StoreLookupError(f"unknown vehicle {vehicle_id!r}") from None

    def vehicle_of(self, ecu_id: str) -> Optional[str]:
        return self._ecu_index.get(ecu_id)  # type: ignore[attr-defined]

    def ecu_record(self, ecu_id: str) -> Optional[EcuRecord]:
        vid = self.vehicle_of(ecu_id)
        return None if vid is None else self.vehicles[vid].ecus[ecu_id]

    def in_maintenance(self, vehicle_id: str, timestamp: int) -> bool:
        windows = self.vehicle(vehicle_id).maintenance
        i = bisect.bisect_right([w.start for w in windows], timestamp) - 1
        return i >= 0 and timestamp < windows[i].end

    def firmware_known(self, ecu_type: str, digest: str) -> FirmwareStatus:
        if ecu_type not in self.firmware:
            raise StoreLookupError(f"unknown ECU type {ecu_type!r}")
        releases = self.firmware[ecu_type]
        for rel in releases:
            if rel.digest == digest:
                return FirmwareStatus.CURRENT if rel is releases[-1] else FirmwareStatus.OLDER
        return FirmwareStatus.UNKNOWN

    def is_sensitive_did(self, did: int) -> bool:
        return self.sensitive.is_sensitive_did(did)

    def overlaps_sensitive_memory(self, addr: int, size: int) -> bool:
        return self.sensitive.overlaps_sensitive_memory(addr, size)

    def state_at(self, vehicle_id: str, timestamp: int) -> Optional[StateSample]:
        samples = self.timeline.get(vehicle_id, ())
        i = bisect.bisect_right([s.timestamp for s in samples], timestamp) - 1
        return samples[i] if i >= 0 else None

    def asset_tags(self) -> frozenset[tuple[str, str]]:
        tags = set()
        for rec in self.vehicles.values():
            tags.add(("model", rec.model))
            for ecu in rec.ecus.values():
                tags.add(("ecu_type", ecu.ecu_type))
        return frozenset(tags)

    def with_vehicle(self, record: VehicleRecord) -> "ContextStore":
        return replace(self, vehicles={**self.vehicles, record.vehicle_id: record})

    def with_firmware(self, ecu_type: str, releases: Iterable[FirmwareRelease]) -> "ContextStore":
        return replace(self, firmware={**self.firmware, ecu_type: tuple(releases)})


# --- file format --------------------------------------------------------------


def _require(entry: Any, key: str, line: Optional[int]) -> Any:
    if not isinstance(entry, dict) or key not in entry:
        raise ConfigError(f"missing field {key!r}", line=line)
    return entry[key]


def _entries(section: Any, what: str, line: Optional[int]) -> list:
    if section is None:
        return []
    if not isinstance(section, list):
        raise ConfigError(f"section {what!r} must be a list", line=line)
    return section


def store_from_mapping(doc: Any) -> ContextStore:
    if doc is None:
        return ContextStore()
    if not isinstance(doc, dict):
        raise ConfigError("store file must be a mapping", line=1)
    vehicles = {}
    for entry in _entries(doc.get("vehicles"), "vehicles", _yamlio.line_of(doc)):
        line = _yamlio.line_of(entry)
        vid = str(_require(entry, "vehicle_id", line))
        ecus = {}
        for ecu_id, spec in (entry.get("ecus") or {}).items():
            if ecu_id == _yamlio.LINE:
                continue
            ecus[str(ecu_id)] = EcuRecord(
                str(_require(spec, "ecu_type", _yamlio.line_of(spec) or line)),
                str(spec.get("mode", "production")),
            )
        windows = []
        for w in entry.get("maintenance") or []:
            wline = _yamlio.line_of(w) or line
            start, end = int(_require(w, "start", wline)), int(_require(w, "end", wline))
            if end < start:
                raise ConfigError(f"maintenance interval end {end} < start {start}", line=wline)
            windows.append(MaintenanceWindow(start, end, str(w.get("workshop", ""))))
        try:
            vehicles[vid] = VehicleRecord(
                vehicle_id=vid,
                model=str(_require(entry, "model", line)),
                ecus=ecus,
                maintenance=tuple(windows),
                expected_dids={
                    _yamlio.as_int(k): str(v)
                    for k, v in (entry.get("expected_dids") or {}).items()
                    if k != _yamlio.LINE
                },
                io_control_allowed=frozenset(_yamlio.as_int(d) for d in entry.get("io_control_allowed") or ()),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), line=line) from exc

    firmware = {}
    fw_doc = doc.get("firmware") or {}
    for ecu_type, releases in fw_doc.items():
        if ecu_type == _yamlio.LINE:
            continue
        firmware[str(ecu_type)] = tuple(
            FirmwareRelease(
                int(_require(r, "version", _yamlio.line_of(r))),
                str(_require(r, "digest", _yamlio.line_of(r))),
                str(r.get("label", "")),
            )
            for r in _entries(releases, f"firmware.{ecu_type}", _yamlio.line_of(fw_doc))
        )

    sens = doc.get("sensitive") or {}
    sensitive = SensitiveRegistry(
        dids={
            _yamlio.as_int(_require(d, "did", _yamlio.line_of(d))): str(d.get("label", ""))
            for d in _entries(sens.get("dids"), "sensitive.dids", _yamlio.line_of(sens))
        },
        memory=tuple(
            MemoryRange(
                _yamlio.as_int(_require(m, "start", _yamlio.line_of(m))),
                _yamlio.as_int(_require(m, "size", _yamlio.line_of(m))),
                str(m.get("label", "")),
            )
            for m in _entries(sens.get("memory"), "sensitive.memory", _yamlio.line_of(sens))
        ),
        rids={
            _yamlio.as_int(_require(d, "rid", _yamlio.line_of(d))): str(d.get("label", ""))
            for d in _entries(sens.get("rids"), "sensitive.rids", _yamlio.line_of(sens))
        },
        file_paths={
            str(_require(d, "path", _yamlio.line_of(d))): str(d.get("label", ""))
            for d in _entries(sens.get("file_paths"), "sensitive.file_paths", _yamlio.line_of(sens))
        },
    )
    for m in sensitive.memory:
        if m.size < 0:
            raise ConfigError(f"negative memory range size at 0x{m.start:X}")

    timeline = {}
    tl_doc = doc.get("timeline") or {}
    for vid, samples in tl_doc.items():
        if vid == _yamlio.LINE:
            continue
        parsed = []
        last = None
        for s in _entries(samples, f"timeline.{vid}", _yamlio.line_of(tl_doc)):
            sline = _yamlio.line_of(s)
            ts = int(_require(s, "timestamp", sline))
            if last is not None and ts <= last:
                raise ConfigError(f"timeline timestamps must be strictly increasing ({ts} after {last})", line=sline)
            last = ts
            speed = float(s.get("speed_kph", 0.0))
            if speed < 0:
                raise ConfigError("negative speed", line=sline)
            parsed.append(
                StateSample(ts, speed, str(s.get("mode", "production")), bool(s.get("workshop_session", False)),
                            s.get("campaign"))
            )
        timeline[str(vid)] = tuple(parsed)
    try:
        return ContextStore(vehicles=vehicles, firmware=firmware, sensitive=sensitive, timeline=timeline)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def store_to_mapping(store: ContextStore) -> dict[str, Any]:
    vehicles = []
    for vid in sorted(store.vehicles):
        rec = store.vehicles[vid]
        vehicles.append(
            {
                "vehicle_id": rec.vehicle_id,
                "model": rec.model,
                "ecus": {
                    ecu_id: {"ecu_type": e.ecu_type, "mode": e.mode} for ecu_id, e in sorted(rec.ecus.items())
                },
                "maintenance": [
                    {"start": w.start, "end": w.end, "workshop": w.workshop} for w in rec.maintenance
                ],
                "expected_dids": {f"0x{k:04X}": v for k, v in sorted(rec.expected_dids.items())},
                "io_control_allowed": [f"0x{d:04X}" for d in sorted(rec.io_control_allowed)],
            }
        )
    return {
        "vehicles": vehicles,
        "firmware": {
            ecu_type: [{"version": r.version, "digest": r.digest, "label": r.label} for r in releases]
            for ecu_type, releases in sorted(store.firmware.items())
        },
        "sensitive": {
            "dids": [{"did": f"0x{d:04X}", "label": l} for d, l in sorted(store.sensitive.dids.items())],
            "memory": [
                {"start": f"0x{m.start:08X}", "size": f"0x{m.size:X}", "label": m.label}
                for m in store.sensitive.memory
            ],
            "rids": [{"rid": f"0x{r:04X}", "label": l} for r, l in sorted(store.sensitive.rids.items())],
            "file_paths": [{"path": p, "label": l} for p, l in sorted(store.sensitive.file_paths.items())],
        },
        "timeline": {
            vid: [
                {
                    "timestamp": s.timestamp,
                    "speed_kph": s.speed_kph,
                    "mode": s.mode,
                    "workshop_session": s.workshop_session,
                    "campaign": s.campaign,
                }
                for s in samples
            ]
            for vid, samples in sorted(store.timeline.items())
        },
    }


def load_store(path: str | Path) -> ContextStore:
    doc = _yamlio.load(path)
    try:
        return store_from_mapping(doc)
    except ConfigError as exc:
        raise exc.at(str(path)) from exc
    except (ValueError, TypeError, AttributeError) as exc:
        raise ConfigError(f"malformed store: {exc}", str(path)) from exc


def save_store(path: str | Path, store: ContextStore) -> None:
    _yamlio.dump(path, store_to_mapping(store))
