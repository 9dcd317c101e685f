"""Deterministic, labeled traffic for each cataloged attack technique.

Every scenario shares one small vehicle: three ECUs behind a central gateway,
an OBD tester port, a telematics unit polling a few DIDs, and a compromised
ECU (``ROGUE``) sitting directly on the powertrain segment. Each scenario
contains a benign workshop visit inside the vehicle's maintenance window and
the attack segment, which runs outside it unless the technique needs a
workshop session to piggyback on.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from udsmon.catalog import technique
from udsmon.codec import UdsExchange, parse_request, parse_response, write_trace
from udsmon.detection import ThreatIntelItem, write_ti
from udsmon.flow import RoutingExpectation, save_topology
from udsmon.sensor import hash_payload
from udsmon.store import (
    ContextStore,
    EcuRecord,
    FirmwareRelease,
    MaintenanceWindow,
    MemoryRange,
    SensitiveRegistry,
    StateSample,
    VehicleRecord,
    save_store,
)

VEHICLE_ID = "VIN-X1-000042"
MODEL = "X1"
ECU_LINKS = {"ECM": "pt", "BCM": "body", "TCU": "tcu"}
ECU_TYPES = {"ECM": "ecm-x1", "BCM": "bcm-x1", "TCU": "tcu-x1"}
TESTER = 0x0E80
TELEMATICS = 0x0E10
ROGUE = 0x0760

MAINTENANCE = (60_000, 300_000)
WORKSHOP_AT = 90_000
WORKSHOP_ATTACK_AT = 200_000
ATTACK_AT = 360_000
DURATION = 600_000
DRIVING = ((0, 50_000, 45.0), (305_000, 340_000, 30.0), (450_000, 520_000, 50.0))
ATTACK_DRIVE = (350_000, 440_000, 60.0)

SENSITIVE_DIDS = {0xF1A0: "immobilizer secret", 0xF1A1: "SecOC key"}
KEYSTORE = (0x00080000, 0x1000)
SENSITIVE_RID = 0xFF10
SECURE_DIR = "/secure/"
FLASH_ADDR = 0x00020000
IO_ALLOWED = (0x4A10, 0x4A11)
# DIDs the workshop writes, with the data the backend expects
EXPECTED_WRITES = {0xF198: b"WS17-TESTER-0042", 0x0101: bytes.fromhex("01020304a5a5")}
TELEMATICS_DIDS = (0xF190, 0xD100, 0xD101)

# services the simulated ECM implements (drives discovery responses)
ECM_SERVICES = frozenset((0x10, 0x11, 0x14, 0x19, 0x22, 0x27, 0x28, 0x29, 0x2E, 0x2F, 0x31, 0x34, 0x36, 0x37, 0x3E, 0x85))
ECM_SESSIONS = frozenset((0x01, 0x02, 0x03))
ECM_DIDS = frozenset((0xF180, 0xF181, 0xF186, 0xF187, 0xF18A, 0xF18C, 0xF190, 0xF195, 0xF197))
ECM_RIDS = frozenset((0xFF00, 0xFF01, SENSITIVE_RID, 0x0203))
TCU_DIRS = frozenset(("/", "/fw", "/log", "/secure"))


def firmware_image(label: str, size: int = 2048) -> bytes:
    return random.Random(f"image:{label}").randbytes(size)


FW_OLD = firmware_image("ecm-x1 1.0.0")
FW_CURRENT = firmware_image("ecm-x1 1.1.0")
FW_CUSTOM = firmware_image("attacker build")


@dataclass(frozen=True)
class Scenario:
    technique_id: Optional[str]
    seed: int
    topology: RoutingExpectation
    trace: tuple[UdsExchange, ...]
    store: ContextStore
    ti_items: tuple[ThreatIntelItem, ...] = ()
    labels: tuple[tuple[int, int], ...] = ()
    undetectable: bool = False
    notes: str = ""

    def in_labels(self, ts: int) -> bool:
        return any(start <= ts < end for start, end in self.labels)

    def manifest(self) -> dict:
        return {
            "technique": self.technique_id,
            "seed": self.seed,
            "labels": [list(l) for l in self.labels],
            "undetectable": self.undetectable,
            "notes": self.notes,
            "exchanges": len(self.trace),
        }

    def save(self, directory: str | Path) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_trace(out / "trace.ndjson", self.trace)
        save_store(out / "store.yaml", self.store)
        save_topology(out / "topology.yaml", self.topology)
        write_ti(out / "ti.ndjson", self.ti_items)
        (out / "scenario.json").write_text(json.dumps(self.manifest(), indent=2) + "\n", encoding="utf-8")


# --- fixtures -----------------------------------------------------------------


def default_topology() -> RoutingExpectation:
    permitted = {}
    for ecu in ECU_LINKS:
        permitted[(ecu, None)] = frozenset((TESTER,))
    for ecu in ("ECM", "BCM"):
        for sid in (0x22, 0x3E):
            permitted[(ecu, sid)] = frozenset((TELEMATICS,))
    routes = frozenset((("obd", "pt"), ("obd", "body"), ("obd", "tcu"), ("tcu", "pt"), ("tcu", "body")))
    return RoutingExpectation(dict(ECU_LINKS), permitted, routes)


def _timeline(driving) -> tuple[StateSample, ...]:
    points = {0, MAINTENANCE[0], MAINTENANCE[1]}
    for start, end, _speed in driving:
        points |= {start, end}
    samples = []
    for p in sorted(points):
        speed = next((s for a, b, s in driving if a <= p < b), 0.0)
        workshop = MAINTENANCE[0] <= p < MAINTENANCE[1]
        state = (speed, workshop)
        if samples and (samples[-1].speed_kph, samples[-1].workshop_session) == state:
            continue
        samples.append(StateSample(p, speed, "production", workshop, "campaign-7" if workshop else None))
    return tuple(samples)


def default_store(driving=DRIVING) -> ContextStore:
    vehicle = VehicleRecord(
        vehicle_id=VEHICLE_ID,
        model=MODEL,
        ecus={ecu: EcuRecord(ECU_TYPES[ecu], "production") for ecu in ECU_LINKS},
        maintenance=(MaintenanceWindow(MAINTENANCE[0], MAINTENANCE[1], "WS-17"),),
        expected_dids={did: hash_payload(data) for did, data in EXPECTED_WRITES.items()},
        io_control_allowed=frozenset(IO_ALLOWED),
    )
    return ContextStore(
        vehicles={VEHICLE_ID: vehicle},
        firmware={
            "ecm-x1": (
                FirmwareRelease(1, hash_payload(FW_OLD), "1.0.0"),
                FirmwareRelease(2, hash_payload(FW_CURRENT), "1.1.0"),
            ),
            "bcm-x1": (FirmwareRelease(1, hash_payload(firmware_image("bcm-x1 2.0.0")), "2.0.0"),),
            "tcu-x1": (FirmwareRelease(1, hash_payload(firmware_image("tcu-x1 4.2.0")), "4.2.0"),),
        },
        sensitive=SensitiveRegistry(
            dids=dict(SENSITIVE_DIDS),
            memory=(MemoryRange(KEYSTORE[0], KEYSTORE[1], "key store"),),
            rids={SENSITIVE_RID: "erase key store"},
            file_paths={SECURE_DIR: "credential store"},
        ),
        timeline={VEHICLE_ID: _timeline(driving)},
    )


# --- frame helpers ------------------------------------------------------------


def pos(sid: int, *rest: int | bytes) -> bytes:
    out = bytearray([sid + 0x40])
    for part in rest:
        out += part if isinstance(part, (bytes, bytearray)) else bytes([part])
    return bytes(out)


def neg(sid: int, nrc: int) -> bytes:
    return bytes([0x7F, sid, nrc])


def u16(v: int) -> bytes:
    return v.to_bytes(2, "big")


def u32(v: int) -> bytes:
    return v.to_bytes(4, "big")


def rdbi(did: int) -> bytes:
    return bytes([0x22]) + u16(did)


def wdbi(did: int, data: bytes) -> bytes:
    return bytes([0x2E]) + u16(did) + data


def iocbi(did: int, param: int, state: bytes = b"") -> bytes:
    return bytes([0x2F]) + u16(did) + bytes([param]) + state


def rc(sf: int, rid: int, option: bytes = b"") -> bytes:
    return bytes([0x31, sf]) + u16(rid) + option


def request_download(addr: int, size: int, sid: int = 0x34) -> bytes:
    return bytes([sid, 0x00, 0x44]) + u32(addr) + u32(size)


def rmba(addr: int, size: int) -> bytes:
    return bytes([0x23, 0x24]) + u32(addr) + u16(size)


def wmba(addr: int, data: bytes) -> bytes:
    return bytes([0x3D, 0x24]) + u32(addr) + u16(len(data)) + data


def rft(mode: int, path: str, tail: bytes = b"") -> bytes:
    raw = path.encode("ascii")
    return bytes([0x38, mode]) + u16(len(raw)) + raw + tail


def roe(sf: int, record: bytes, service: bytes) -> bytes:
    return bytes([0x86, sf, 0x02]) + record + service


def sdt(apar: int, crypto: int, wrapped: bytes) -> bytes:
    return bytes([0x84]) + u16(apar) + bytes([crypto]) + u16(0) + u16(1) + wrapped


class _Builder:
    """Accumulates exchanges on a shared trace clock."""

    def __init__(self, rng: random.Random, start: int = 0):
        self.rng = rng
        self.t = start
        self.exchanges: list[UdsExchange] = []

    def at(self, t: int) -> None:
        self.t = max(self.t, t)

    def wait(self, lo: int, hi: int) -> None:
        self.t += self.rng.randint(lo, hi)

    def _emit(self, ts, link, source, ecu, req, resp) -> None:
        self.exchanges.append(
            UdsExchange(ts, link, source, ecu, parse_request(req), None if resp is None else parse_response(resp))
        )

    def send(
        self,
        req: bytes,
        resp: Optional[bytes],
        *,
        ecu: str = "ECM",
        source: int = TESTER,
        via: Optional[str] = "obd",
        delivered: Optional[bytes] = None,
        gap: tuple[int, int] = (150, 600),
    ) -> None:
        """One exchange; routed through the gateway unless ``via`` is None (direct injection)."""
        self.wait(*gap)
        if via is None:
            self._emit(self.t, ECU_LINKS[ecu], source, ecu, req, resp)
            return
        self._emit(self.t, via, source, ecu, req, resp)
        self._emit(self.t + 1, ECU_LINKS[ecu], source, ecu, req if delivered is None else delivered, resp)
        self.t += 1

    def rogue(self, req: bytes, resp: Optional[bytes], **kw) -> None:
        self.send(req, resp, source=ROGUE, via=None, **kw)

    # common procedures

    def session(self, sf: int, **kw) -> None:
        self.send(bytes([0x10, sf]), pos(0x10, sf, b"\x00\x32\x01\xf4"), **kw)

    def seed(self, ok: bool = True, nrc: int = 0x37, **kw) -> None:
        self.send(b"\x27\x01", pos(0x27, 0x01, self.rng.randbytes(4)) if ok else neg(0x27, nrc), **kw)

    def key(self, ok: bool = True, nrc: int = 0x35, **kw) -> None:
        self.send(b"\x27\x02" + self.rng.randbytes(4), pos(0x27, 0x02) if ok else neg(0x27, nrc), **kw)

    def unlock(self, **kw) -> None:
        self.seed(**kw)
        self.key(**kw)

    def download(self, image: bytes, addr: int = FLASH_ADDR, block: int = 256, exit_ok: bool = True, **kw) -> None:
        self.send(request_download(addr, len(image)), pos(0x34, 0x20, u16(block + 2)), **kw)
        for n, off in enumerate(range(0, len(image), block), start=1):
            bsc = n & 0xFF
            self.send(bytes([0x36, bsc]) + image[off : off + block], pos(0x36, bsc), gap=(20, 60), **kw)
        self.send(b"\x37", pos(0x37) if exit_ok else neg(0x37, 0x24), **kw)


# --- benign background --------------------------------------------------------


def _telematics(b: _Builder, duration: int) -> None:
    t, last = 5_000, duration - 1  # the final poll is delivered at `duration`
    while t <= last:
        b.at(t)
        ecu = b.rng.choice(("ECM", "BCM"))
        if b.rng.random() < 0.2:
            b.send(b"\x3e\x00", pos(0x3E, 0x00), ecu=ecu, source=TELEMATICS, via="tcu", gap=(0, 0))
        else:
            did = b.rng.choice(TELEMATICS_DIDS)
            b.send(rdbi(did), pos(0x22, u16(did), b.rng.randbytes(8)), ecu=ecu, source=TELEMATICS, via="tcu", gap=(0, 0))
        t = min(t + b.rng.randint(8_000, 20_000), last) if t < last else last + 1


def _workshop_visit(b: _Builder) -> None:
    """Routine service: diagnostics, configuration, one current-firmware flash."""
    b.at(WORKSHOP_AT)
    b.send(b"\x3e\x00", pos(0x3E, 0x00))
    b.session(0x03)
    b.seed()
    if b.rng.random() < 0.5:
        b.key(ok=False)  # mistyped key
        b.seed()
    b.key()
    for did in (0xF190, 0xF18C, 0xF195):
        b.send(rdbi(did), pos(0x22, u16(did), b.rng.randbytes(6)))
    # one isolated failure per visit, well below every counting threshold
    b.send(rdbi(b.rng.choice((0xF1F0, 0xF1F1, 0xF1F2))), neg(0x22, 0x31))
    for _ in range(b.rng.randint(1, 2)):
        b.send(b"\x19\x02\xff", pos(0x19, 0x02, 0xFF))
    for did, data in EXPECTED_WRITES.items():
        b.send(wdbi(did, data), pos(0x2E, u16(did)))
    b.send(iocbi(IO_ALLOWED[0], 0x03, b"\x01"), pos(0x2F, u16(IO_ALLOWED[0]), 0x03, b"\x01"))
    b.send(iocbi(IO_ALLOWED[0], 0x00), pos(0x2F, u16(IO_ALLOWED[0]), 0x00))
    b.send(rc(0x01, 0x0203), pos(0x31, 0x01, u16(0x0203), 0x00))
    b.send(rc(0x03, 0x0203), pos(0x31, 0x03, u16(0x0203), 0x00))
    b.send(rc(0x02, 0x0203), pos(0x31, 0x02, u16(0x0203)))
    b.send(b"\x19\x02\xff", pos(0x19, 0x02, 0xFF), ecu="BCM")
    b.session(0x02)
    b.unlock()
    b.download(FW_CURRENT)
    b.send(b"\x11\x01", pos(0x11, 0x01))
    b.wait(2_000, 4_000)
    b.session(0x01)


def _base(rng: random.Random, duration: int = DURATION) -> _Builder:
    b = _Builder(rng)
    _workshop_visit(b)
    return b


def _assemble(b: _Builder, rng: random.Random, duration: int) -> tuple[UdsExchange, ...]:
    tele = _Builder(rng)
    _telematics(tele, duration)
    merged = sorted(b.exchanges + tele.exchanges, key=lambda e: e.timestamp)
    return tuple(merged)


def benign_traffic(seed: int, duration: int = DURATION) -> Scenario:
    if duration < MAINTENANCE[1]:
        raise ValueError(f"benign scenarios need at least {MAINTENANCE[1]} ms to cover the workshop visit")
    rng = random.Random(f"benign:{seed}")
    b = _base(rng, duration)
    unrelated = ThreatIntelItem(
        "TI-Y9-0001", "public", frozenset({("model", "Y9"), ("technique", "AT-PE-4")}),
        "brute-force tooling for a different vehicle line",
    )
    return Scenario(
        technique_id=None,
        seed=seed,
        topology=default_topology(),
        trace=_assemble(b, rng, duration),
        store=default_store(),
        ti_items=(unrelated,),
        labels=(),
        notes="workshop visit inside the maintenance window plus telematics polling",
    )


# --- attack scripts -----------------------------------------------------------
# Each script runs on a builder already positioned at the attack start.


def _ps_1(b: _Builder) -> None:
    b.session(0x02)
    b.unlock()
    for _ in range(3):
        b.send(request_download(FLASH_ADDR, len(FW_CUSTOM)), neg(0x34, 0x70))
    b.download(FW_CUSTOM)


def _pe_1(b: _Builder) -> None:
    b.rogue(b"\x10\x03", pos(0x10, 0x03, b"\x00\x32\x01\xf4"))
    for _ in range(2):
        b.rogue(b"\x3e\x00", pos(0x3E, 0x00), gap=(1_500, 2_500))


def _auth_pki(b: _Builder, source_ok: bool = True) -> None:
    b.send(b"\x29\x01\x00" + b.rng.randbytes(12), pos(0x29, 0x01, 0x11, b.rng.randbytes(8)))
    b.send(b"\x29\x03" + b.rng.randbytes(12), pos(0x29, 0x03, 0x12))


def _pe_2(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    _auth_pki(b)


def _pe_3(b: _Builder) -> None:
    captured = b.rng.randbytes(4)
    for _ in range(12):
        b.rogue(b"\x27\x01", pos(0x27, 0x01, b.rng.randbytes(4)))
        b.rogue(b"\x27\x02" + captured, neg(0x27, 0x35))
    b.rogue(b"\x27\x01", pos(0x27, 0x01, b.rng.randbytes(4)))
    b.rogue(b"\x27\x02" + b.rng.randbytes(4), pos(0x27, 0x02))


def _brute_force(b: _Builder, rounds: int, succeed: bool) -> None:
    for _ in range(rounds):
        b.seed(gap=(100, 400))
        b.key(ok=False, gap=(100, 400))
    if succeed:
        b.unlock(gap=(100, 400))


def _pe_4(b: _Builder) -> None:
    b.session(0x03)
    _brute_force(b, 12, succeed=True)


def _pe_5(b: _Builder) -> None:
    b.session(0x03)
    for _ in range(2):
        b.send(b"\x29\x01\x00" + b.rng.randbytes(12), neg(0x29, 0x50))
    _auth_pki(b)


def _de_1(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    b.send(b"\x85\x02", pos(0x85, 0x02))


def _de_2(b: _Builder) -> None:
    b.session(0x03)
    b.send(b"\x14\xff\xff\xff\x01", pos(0x14))


def _de_3(b: _Builder) -> None:
    b.session(0x02)
    b.unlock()
    b.download(FW_OLD)


def _de_4(b: _Builder) -> None:
    # the ECU should refuse programming while driving; a bypassed check accepts it
    b.session(0x02)
    b.unlock()


def _de_5(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    b.send(b"\x2c\x01\xf3\x00" + u16(0xF1A0) + b"\x01\x10", pos(0x2C, 0x01, u16(0xF300)))
    b.send(rdbi(0xF300), pos(0x22, u16(0xF300), b.rng.randbytes(16)))


def _ca_1(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    b.send(rdbi(0xF1A0), pos(0x22, u16(0xF1A0), b.rng.randbytes(16)))
    b.send(rmba(KEYSTORE[0], 0x100), pos(0x23, b.rng.randbytes(32)))
    b.send(rc(0x01, SENSITIVE_RID), pos(0x31, 0x01, u16(SENSITIVE_RID), 0x00))


def _probe_response(sid: int) -> tuple[bytes, bytes]:
    from udsmon.codec import SERVICES

    desc = SERVICES.get(sid)
    if desc is not None and desc.has_subfunction:
        req = bytes([sid, 0x01])
        if sid in ECM_SERVICES:
            return req, pos(sid, 0x01)
    else:
        req = bytes([sid])
        if sid in ECM_SERVICES:
            return req, neg(sid, 0x13)
    return req, neg(sid, 0x11)


def _ds_1(b: _Builder) -> None:
    from udsmon.codec import SERVICES

    probes = sorted(set(SERVICES) | {0x01, 0x02, 0x09, 0xBA})
    for session in (None, 0x03):
        if session is not None:
            b.session(session, gap=(50, 150))
        for sid in probes:
            req, resp = _probe_response(sid)
            b.send(req, resp, gap=(50, 150))


def _sf_sweep(b: _Builder, sid: int, sfs, supported) -> None:
    for sf in sfs:
        if sf in supported:
            b.send(bytes([sid, sf]), pos(sid, sf, b.rng.randbytes(4)), gap=(40, 120))
        else:
            b.send(bytes([sid, sf]), neg(sid, 0x12), gap=(40, 120))


def _ds_2(b: _Builder) -> None:
    _sf_sweep(b, 0x27, range(0x01, 0x20, 2), {0x01})
    _sf_sweep(b, 0x11, range(0x02, 0x0A), set())
    _sf_sweep(b, 0x10, range(0x01, 0x10), ECM_SESSIONS)


def _ds_3(b: _Builder) -> None:
    _sf_sweep(b, 0x10, range(0x01, 0x80), ECM_SESSIONS)


def _fuzz_one(b: _Builder) -> tuple[bytes, bytes]:
    rng = b.rng
    sid = rng.choice((0x10, 0x22, 0x27, 0x31, 0x3E))
    kind = rng.random()
    if sid == 0x22:
        if kind < 0.5:
            raw = bytes([0x22]) + rng.randbytes(rng.choice((1, 3, 5)))
            return raw, neg(0x22, 0x13)
        did = rng.randrange(0x10000)
        return rdbi(did), neg(0x22, 0x31) if did not in ECM_DIDS else pos(0x22, u16(did), 0x00)
    if sid == 0x31:
        if kind < 0.5:
            return bytes([0x31, 0x01]), neg(0x31, 0x13)
        return rc(rng.choice((0x04, 0x05, 0x7F)), rng.randrange(0x10000)), neg(0x31, 0x12)
    sf = rng.randrange(0x04, 0x80)
    if kind < 0.5:
        return bytes([sid, sf]) + rng.randbytes(rng.randint(1, 6)), neg(sid, 0x13)
    return bytes([sid, sf]), neg(sid, 0x12)


def _ds_4(b: _Builder) -> None:
    for i in range(80):
        if i % 20 == 0:
            b.session(0x03, gap=(30, 90))
            b.seed(gap=(30, 90))
            continue
        req, resp = _fuzz_one(b)
        b.send(req, resp, gap=(30, 90))


def _ds_5(b: _Builder) -> None:
    for i in range(8):
        b.seed(ok=i < 2, nrc=0x37, gap=(300, 900))


def _ds_6(b: _Builder) -> None:
    b.session(0x03)
    for _ in range(5):
        b.unlock(gap=(1_000, 3_000))


def _ds_7(b: _Builder) -> None:
    b.send(b"\x29\x08", pos(0x29, 0x08, 0x02))


def _ds_8(b: _Builder) -> None:
    for i in range(6):
        algo = bytes([0x06, 0x09, 0x60, 0x86, 0x48, 0x01, 0x65, 0x03, 0x04, 0x02, i, 0, 0, 0, 0, 0])
        if i in (1, 4):
            b.send(b"\x29\x05\x00" + algo, pos(0x29, 0x05, 0x00, algo, b.rng.randbytes(8)))
        else:
            b.send(b"\x29\x05\x00" + algo, neg(0x29, 0x31))


def _ds_9(b: _Builder) -> None:
    algo = bytes(16)
    for i in range(8):
        if i == 0:
            b.send(b"\x29\x05\x00" + algo, pos(0x29, 0x05, 0x00, algo, b.rng.randbytes(8)))
        else:
            b.send(b"\x29\x05\x00" + algo, neg(0x29, 0x37), gap=(300, 900))


def _ds_10(b: _Builder) -> None:
    for apar, ok in ((0x0001, True), (0x0002, True), (0x0044, False)):
        wrapped = rdbi(0xF190)
        b.send(sdt(apar, 0x01, wrapped), pos(0x84, u16(apar), 0x01) if ok else neg(0x84, 0x31))


def _ds_11(b: _Builder) -> None:
    for did in range(0xF180, 0xF1B0):
        if did in SENSITIVE_DIDS:
            b.send(rdbi(did), neg(0x22, 0x33), gap=(50, 150))
        elif did in ECM_DIDS:
            b.send(rdbi(did), pos(0x22, u16(did), b.rng.randbytes(4)), gap=(50, 150))
        else:
            b.send(rdbi(did), neg(0x22, 0x31), gap=(50, 150))


def _ds_12(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    for rid in range(0xFF00, 0xFF20):
        if rid in ECM_RIDS:
            b.send(rc(0x01, rid), pos(0x31, 0x01, u16(rid), 0x00), gap=(50, 150))
        else:
            b.send(rc(0x01, rid), neg(0x31, 0x31), gap=(50, 150))


def _ds_13(b: _Builder) -> None:
    b.session(0x03, ecu="TCU")
    b.unlock(ecu="TCU")
    for path in ("/", "/etc", "/var", "/secure", "/secure/keys", "/fw", "/tmp", "/log", "/boot",
                 "/data", "/cfg", "/home", "/opt", "/root"):
        if path in TCU_DIRS:
            b.send(rft(0x05, path), pos(0x38, 0x05, u16(0x0400), 0x00), ecu="TCU", gap=(50, 150))
        else:
            b.send(rft(0x05, path), neg(0x38, 0x31), ecu="TCU", gap=(50, 150))


def _lm_1(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    did = 0xF198
    original = wdbi(did, EXPECTED_WRITES[did])
    for i in range(6):
        if i % 3 == 2:
            # mangled beyond recognition: the ECU rejects it
            b.send(original, neg(0x2E, 0x13), delivered=original[:2])
        else:
            b.send(original, pos(0x2E, u16(did)), delivered=wdbi(did, b"EVIL-" + b.rng.randbytes(11)))


def _cl_1(b: _Builder, count: int = 12) -> None:
    b.session(0x03)
    for i in range(count):
        req = roe(0x01, b"\xff", b"\x19\x02\xff")
        b.send(req, neg(0x86, 0x22) if i % 6 == 5 else pos(0x86, 0x01, 0x00, 0x02), gap=(200, 800))


def _cl_2(b: _Builder, mode: int = 0x03, source: Optional[int] = None, count: int = 12) -> None:
    for i in range(count):
        req = bytes([0x2A, mode, 0x01, 0x02])
        resp = neg(0x2A, 0x31) if i % 6 == 5 else pos(0x2A)
        if source == ROGUE:
            b.rogue(req, resp, gap=(200, 800))
        else:
            b.send(req, resp, gap=(200, 800))


def _cl_3(b: _Builder) -> None:
    b.send(rdbi(0xF1A0), neg(0x22, 0x33))
    b.session(0x03)
    b.unlock()
    b.send(rdbi(0xF1A0), pos(0x22, u16(0xF1A0), b.rng.randbytes(16)))


def _cl_4(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    b.send(rmba(KEYSTORE[0], 0x200), pos(0x23, b.rng.randbytes(64)))
    b.send(request_download(KEYSTORE[0], KEYSTORE[1], sid=0x35), pos(0x35, 0x20, u16(0x0102)))
    for bsc in range(1, 5):
        b.send(bytes([0x36, bsc]), pos(0x36, bsc, b.rng.randbytes(64)), gap=(20, 60))
    b.send(b"\x37", pos(0x37))


def _cl_5(b: _Builder) -> None:
    b.session(0x03, ecu="TCU")
    b.unlock(ecu="TCU")
    b.send(rft(0x04, "/secure/keys.bin", b"\x00"), pos(0x38, 0x04, 0x02, u16(0x0400), 0x00), ecu="TCU")
    b.send(rft(0x04, "/secure/ca.pem", b"\x00"), neg(0x38, 0x31), ecu="TCU")


def _cl_6(b: _Builder) -> None:
    for i in range(12):
        b.send(b"\x19\x02\xff", neg(0x19, 0x31) if i % 6 == 5 else pos(0x19, 0x02, 0xFF), gap=(200, 800))


def _af_1(b: _Builder) -> None:
    for i in range(150):
        sid = (0x10, 0x22, 0x27, 0x31, 0x3E)[i % 5]
        req = {
            0x10: b"\x10\x03",
            0x22: rdbi(0xF190),
            0x27: b"\x27\x01",
            0x31: rc(0x01, 0xFF00),
            0x3E: b"\x3e\x00",
        }[sid]
        served = i % 10 == 0 or i % 10 == 1
        if served:
            resp = pos(sid, req[1:2] if sid in (0x10, 0x3E) else u16(0xF190) if sid == 0x22 else req[1:2])
        else:
            resp = neg(sid, 0x21)
        b.send(req, resp, gap=(15, 40))


def _af_2(b: _Builder) -> None:
    b.session(0x03)
    for i in range(80):
        if i % 2:
            b.rogue(b"\x3e\x00", pos(0x3E, 0x00), gap=(20, 60))
        else:
            b.rogue(rdbi(0xF190), pos(0x22, u16(0xF190), b.rng.randbytes(8)), gap=(20, 60))
        if i % 6 == 0:
            req, sid = ((rdbi(0xF18C), 0x22), (rc(0x01, 0x0203), 0x31), (b"\x27\x01", 0x27))[i // 6 % 3]
            b.send(req, neg(sid, 0x21), gap=(20, 60))


def _af_3(b: _Builder) -> None:
    b.session(0x02)
    b.unlock()
    b.send(request_download(FLASH_ADDR, len(FW_CURRENT)), pos(0x34, 0x20, u16(258)))
    for bsc in (1, 2):
        b.send(bytes([0x36, bsc]) + FW_CURRENT[(bsc - 1) * 256 : bsc * 256], pos(0x36, bsc), gap=(20, 60))
    for _ in range(6):
        b.rogue(b"\x10\x01", pos(0x10, 0x01, b"\x00\x32\x01\xf4"), gap=(500, 2_000))
    for bsc in (3, 4):
        b.send(bytes([0x36, bsc]) + FW_CURRENT[(bsc - 1) * 256 : bsc * 256], neg(0x36, 0x7F), gap=(100, 300))


def _af_4(b: _Builder) -> None:
    _brute_force(b, 12, succeed=False)


def _af_5_1(b: _Builder) -> None:
    _cl_1(b, count=20)


def _af_5_2(b: _Builder) -> None:
    _cl_2(b, mode=0x03, source=ROGUE, count=20)


def _af_6(b: _Builder) -> None:
    _cl_2(b, mode=0x04)


def _af_7(b: _Builder) -> None:
    for i in range(12):
        b.rogue(iocbi(0x4B20, 0x03, bytes([i & 1])), pos(0x2F, u16(0x4B20), 0x03, bytes([i & 1])), gap=(300, 900))


def _af_8(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    b.send(rc(0x01, SENSITIVE_RID), pos(0x31, 0x01, u16(SENSITIVE_RID), 0x00))
    b.send(rc(0x01, 0xFF01), pos(0x31, 0x01, u16(0xFF01), 0x00))


def _af_9(b: _Builder) -> None:
    b.session(0x02)
    b.unlock()
    b.send(request_download(FLASH_ADDR, len(FW_CURRENT)), pos(0x34, 0x20, u16(258)))
    blocks = [FW_CURRENT[i : i + 256] for i in range(0, len(FW_CURRENT), 256)]
    for n in range(3):
        b.send(bytes([0x36, n + 1]) + blocks[n], pos(0x36, n + 1), gap=(20, 60))
    b.rogue(b"\x37", pos(0x37), gap=(5, 15))
    for n in range(3, 6):
        b.send(bytes([0x36, n + 1]) + blocks[n], neg(0x36, 0x24), gap=(20, 60))
    b.send(b"\x37", neg(0x37, 0x24))


def _af_10(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    b.send(rc(0x01, 0xFF01), pos(0x31, 0x01, u16(0xFF01), 0x00))
    for i in range(12):
        b.rogue(rc(0x02, 0xFF01), pos(0x31, 0x02, u16(0xFF01)) if i == 0 else neg(0x31, 0x24), gap=(300, 900))
    for _ in range(2):
        b.send(rc(0x03, 0xFF01), neg(0x31, 0x24))


def _af_11(b: _Builder) -> None:
    b.rogue(b"\x10\x03", pos(0x10, 0x03, b"\x00\x32\x01\xf4"))
    for _ in range(10):
        b.rogue(b"\x3e\x80", None, gap=(1_800, 2_200))


def _af_12(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    b.send(iocbi(IO_ALLOWED[0], 0x03, b"\x01"), pos(0x2F, u16(IO_ALLOWED[0]), 0x03, b"\x01"))
    b.send(iocbi(IO_ALLOWED[1], 0x03, b"\x01"), pos(0x2F, u16(IO_ALLOWED[1]), 0x03, b"\x01"))
    b.send(iocbi(0x4A12, 0x03, b"\x01"), neg(0x2F, 0x31))


def _af_13(b: _Builder) -> None:
    b.rogue(b"\x28\x03\x01", pos(0x28, 0x03))
    b.rogue(b"\x28\x01\x01", neg(0x28, 0x22))


def _af_14(b: _Builder) -> None:
    for _ in range(4):
        b.rogue(b"\x11\x01", pos(0x11, 0x01), gap=(2_000, 6_000))


def _af_15(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    targets = (0xF198, 0xF190, 0x0101)
    for i in range(13):
        did = targets[i % 3]
        data = b"X" * (4 + i)
        if i in (3, 7, 11):
            b.send(wdbi(did, data), pos(0x2E, u16(did)))
        else:
            b.send(wdbi(did, data), neg(0x2E, (0x31, 0x33, 0x72)[i % 3]))


def _af_16(b: _Builder) -> None:
    b.session(0x03, ecu="TCU")
    b.unlock(ecu="TCU")
    for i in range(12):
        mode = 0x01 if i % 2 == 0 else 0x03
        req = rft(mode, "/fw/app.bin", b"\x00\x02" + u16(0x4000) + u16(0x4000))
        if i in (5, 10):
            b.send(req, pos(0x38, mode, 0x02, u16(0x0400)), ecu="TCU")
        else:
            b.send(req, neg(0x38, 0x70 if i % 2 else 0x31), ecu="TCU")


def _af_17(b: _Builder) -> None:
    b.session(0x03)
    b.unlock()
    for i in range(10):
        data = b.rng.randbytes(16)
        b.send(wmba(KEYSTORE[0] + 0x10 * i, data), pos(0x3D, 0x24, u32(KEYSTORE[0] + 0x10 * i), u16(16)))
    b.send(request_download(KEYSTORE[0], KEYSTORE[1]), pos(0x34, 0x20, u16(258)))


@dataclass(frozen=True)
class _Plan:
    script: Optional[Callable[[_Builder], None]]
    in_workshop: bool = False
    driving: bool = False
    ti_source: Optional[str] = None
    note: str = ""
    traffic: bool = True  # False: the technique leaves no trace in the vehicle at all


_PLANS: dict[str, _Plan] = {
    "AT-RD-1": _Plan(None, ti_source="public", traffic=False, note="no traffic; leaked reverse-engineering write-up"),
    "AT-RD-2": _Plan(None, ti_source="disclosed", traffic=False, note="no traffic; disclosed secret leak"),
    "AT-PS-1": _Plan(_ps_1, ti_source="disclosed", note="rejected downloads, then an unregistered image"),
    "AT-PE-1": _Plan(_pe_1, note="compromised ECU opens the extended session"),
    "AT-PE-2": _Plan(_pe_2, ti_source="disclosed", note="valid SA and PKI credentials used off-schedule"),
    "AT-PE-3": _Plan(_pe_3, ti_source="public", note="compromised ECU replays a captured key"),
    "AT-PE-4": _Plan(_pe_4, note="twelve wrong keys, then success"),
    "AT-PE-5": _Plan(_pe_5, note="weak certificate accepted after rejections"),
    "AT-DE-1": _Plan(_de_1, note="DTC setting switched off"),
    "AT-DE-2": _Plan(_de_2, note="DTC memory cleared"),
    "AT-DE-3": _Plan(_de_3, note="replayed download of the previous release"),
    "AT-DE-4": _Plan(_de_4, driving=True, ti_source="public",
                     note="session-check bypass over 0x10/0x27 while driving; one of several readings"),
    "AT-DE-5": _Plan(_de_5, ti_source="public", note="DDDID sourced from a protected DID"),
    "AT-CA-1": _Plan(_ca_1, note="sensitive DID, memory and routine"),
    "AT-DS-1": _Plan(_ds_1, note="service sweep in default and extended session"),
    "AT-DS-2": _Plan(_ds_2, note="subfunction sweeps over 0x27, 0x11, 0x10"),
    "AT-DS-3": _Plan(_ds_3, note="session sweep 0x01..0x7F"),
    "AT-DS-4": _Plan(_ds_4, note="fuzzing over the representative SID set"),
    "AT-DS-5": _Plan(_ds_5, note="seed harvesting without keys"),
    "AT-DS-6": _Plan(_ds_6, ti_source="internal-test", note="valid seed/key pairs collected"),
    "AT-DS-7": _Plan(_ds_7, ti_source="internal-test", note="authentication configuration query"),
    "AT-DS-8": _Plan(_ds_8, ti_source="internal-test", note="algorithm indicator enumeration"),
    "AT-DS-9": _Plan(_ds_9, note="challenge harvesting without proofs"),
    "AT-DS-10": _Plan(_ds_10, ti_source="internal-test", note="SDT parameter probing"),
    "AT-DS-11": _Plan(_ds_11, note="DID sweep 0xF180..0xF1AF"),
    "AT-DS-12": _Plan(_ds_12, note="RID sweep 0xFF00..0xFF1F"),
    "AT-DS-13": _Plan(_ds_13, note="directory probing on the TCU"),
    "AT-DS-14": _Plan(None, note="passive eavesdropping; benign traffic only"),
    "AT-LM-1": _Plan(_lm_1, in_workshop=True, ti_source="public", note="gateway rewrites workshop writes"),
    "AT-CL-1": _Plan(_cl_1, note="repeated ResponseOnEvent setup"),
    "AT-CL-2": _Plan(_cl_2, note="repeated periodic readout"),
    "AT-CL-3": _Plan(_cl_3, note="sensitive DID read, denied then granted"),
    "AT-CL-4": _Plan(_cl_4, note="key store read by address and upload"),
    "AT-CL-5": _Plan(_cl_5, note="credential file read from the TCU"),
    "AT-CL-6": _Plan(_cl_6, note="repeated DTC readout"),
    "AT-AF-1": _Plan(_af_1, ti_source="public", note="request flood answered with busy"),
    "AT-AF-2": _Plan(_af_2, in_workshop=True, ti_source="public", note="compromised ECU starves the tester"),
    "AT-AF-3": _Plan(_af_3, in_workshop=True, note="default-session requests interrupt a flash"),
    "AT-AF-4": _Plan(_af_4, note="wrong keys lock SA"),
    "AT-AF-5.1": _Plan(_af_5_1, note="ROE overload"),
    "AT-AF-5.2": _Plan(_af_5_2, note="RDBPI overload from the compromised ECU"),
    "AT-AF-6": _Plan(_af_6, note="periodic readout stopped repeatedly"),
    "AT-AF-7": _Plan(_af_7, note="IO control on a DID outside the allowed set"),
    "AT-AF-8": _Plan(_af_8, note="key-store erase routine started"),
    "AT-AF-9": _Plan(_af_9, in_workshop=True, note="injected transfer exit during a flash"),
    "AT-AF-10": _Plan(_af_10, in_workshop=True, note="injected routine stops"),
    "AT-AF-11": _Plan(_af_11, note="extended session kept alive"),
    "AT-AF-12": _Plan(_af_12, note="IO control outside maintenance"),
    "AT-AF-13": _Plan(_af_13, note="communication control disables traffic"),
    "AT-AF-14": _Plan(_af_14, driving=True, note="repeated resets while driving"),
    "AT-AF-15": _Plan(_af_15, note="DID writes diverging from the expected configuration"),
    "AT-AF-16": _Plan(_af_16, note="file add/replace attempts"),
    "AT-AF-17": _Plan(_af_17, note="key-store writes by address and download"),
}


def simulate(technique_id: str, seed: int) -> Scenario:
    tech = technique(technique_id)  # raises for unknown ids
    plan = _PLANS[tech.id]
    rng = random.Random(f"{tech.id}:{seed}")
    b = _base(rng)
    labels: tuple[tuple[int, int], ...] = ()
    if plan.script is not None:
        b.at(WORKSHOP_ATTACK_AT if plan.in_workshop else ATTACK_AT)
        start = b.t + 1
        plan.script(b)
        labels = ((start, b.t + 1),)  # half-open, like every interval here
        limit = MAINTENANCE[1] if plan.in_workshop else (ATTACK_DRIVE[1] if plan.driving else DURATION)
        if b.t >= limit:
            raise AssertionError(f"{tech.id} scenario overruns its slot ({b.t} >= {limit})")
    undetectable = tech.detection_na
    if undetectable:
        labels = ((0, DURATION + 1),)
    items: tuple[ThreatIntelItem, ...] = ()
    if plan.ti_source is not None:
        items = (
            ThreatIntelItem(
                f"TI-{tech.id}",
                plan.ti_source,
                frozenset({("model", MODEL), ("ecu_type", "ecm-x1"), ("technique", tech.id)}),
                f"{tech.name}: report affecting {MODEL}",
            ),
        )
    driving = DRIVING + ((ATTACK_DRIVE,) if plan.driving else ())
    return Scenario(
        technique_id=tech.id,
        seed=seed,
        topology=default_topology(),
        trace=_assemble(b, rng, DURATION) if plan.traffic else (),
        store=default_store(tuple(sorted(driving))),
        ti_items=items,
        labels=labels,
        undetectable=undetectable,
        notes=plan.note,
    )
