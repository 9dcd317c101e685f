"""UDS application-layer framing, the service registry, and the trace file format.

Transport segmentation (ISO-TP, DoIP) is assumed to be reassembled already;
everything here operates on complete UDS messages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional

NEGATIVE_RESPONSE = 0x7F
POSITIVE_OFFSET = 0x40


class FrameError(ValueError):
    """Base class for frames that cannot be decoded."""


class MalformedFrameError(FrameError):
    pass


class NotAResponseError(FrameError):
    pass


class TraceFormatError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class ServiceDescriptor:
    sid: int
    name: str
    short_name: str
    has_subfunction: bool
    in_context_table: bool = True


_SERVICES = (
    ServiceDescriptor(0x10, "DiagnosticSessionControl", "DSC", True),
    ServiceDescriptor(0x11, "ECUReset", "ER", True),
    ServiceDescriptor(0x14, "ClearDiagnosticInformation", "CDTCI", False),
    ServiceDescriptor(0x19, "ReadDTCInformation", "RDTCI", True),
    ServiceDescriptor(0x22, "ReadDataByIdentifier", "RDBI", False),
    ServiceDescriptor(0x23, "ReadMemoryByAddress", "RMBA", False),
    ServiceDescriptor(0x24, "ReadScalingDataByIdentifier", "RSDBI", False),
    ServiceDescriptor(0x27, "SecurityAccess", "SA", True),
    ServiceDescriptor(0x28, "CommunicationControl", "CC", True),
    ServiceDescriptor(0x29, "Authentication", "AUTH", True),
    ServiceDescriptor(0x2A, "ReadDataByPeriodicIdentifier", "RDBPI", False),
    ServiceDescriptor(0x2C, "DynamicallyDefineDataIdentifier", "DDDID", True),
    ServiceDescriptor(0x2E, "WriteDataByIdentifier", "WDBI", False),
    ServiceDescriptor(0x2F, "InputOutputControlByIdentifier", "IOCBI", False),
    ServiceDescriptor(0x31, "RoutineControl", "RC", True),
    ServiceDescriptor(0x34, "RequestDownload", "RD", False),
    ServiceDescriptor(0x35, "RequestUpload", "RU", False),
    ServiceDescriptor(0x36, "TransferData", "TD", False),
    ServiceDescriptor(0x37, "RequestTransferExit", "RTE", False),
    ServiceDescriptor(0x38, "RequestFileTransfer", "RFT", False),
    ServiceDescriptor(0x3D, "WriteMemoryByAddress", "WMBA", False),
    # TesterPresent and AccessTimingParameters carry a subfunction byte per ISO 14229
    ServiceDescriptor(0x3E, "TesterPresent", "TP", True),
    ServiceDescriptor(0x83, "AccessTimingParameters", "ATP", True, in_context_table=False),
    ServiceDescriptor(0x84, "SecuredDataTransmission", "SDT", False),
    ServiceDescriptor(0x85, "ControlDTCSetting", "CDTCS", True),
    ServiceDescriptor(0x86, "ResponseOnEvent", "ROE", True),
    ServiceDescriptor(0x87, "LinkControl", "LC", True),
)

SERVICES: dict[int, ServiceDescriptor] = {s.sid: s for s in _SERVICES}
CONTEXT_TABLE_SIDS: tuple[int, ...] = tuple(s.sid for s in _SERVICES if s.in_context_table)


def service_info(sid: int) -> Optional[ServiceDescriptor]:
    return SERVICES.get(sid)


def _check_byte(value: int, what: str) -> None:
    if not 0 <= value <= 0xFF:
        raise ValueError(f"{what} out of byte range: {value!r}")


@dataclass(frozen=True)
class UdsRequest:
    sid: int
    subfunction: Optional[int] = None
    payload: bytes = b""

    def __post_init__(self) -> None:
        _check_byte(self.sid, "sid")
        object.__setattr__(self, "payload", bytes(self.payload))
        if self.subfunction is not None:
            _check_byte(self.subfunction, "subfunction")
            desc = SERVICES.get(self.sid)
            if desc is None or not desc.has_subfunction:
                raise ValueError(f"service 0x{self.sid:02X} takes no subfunction")
        elif self.payload and self.has_subfunction_slot:
            # a subfunction service with trailing bytes must have consumed one as SF
            raise ValueError(f"service 0x{self.sid:02X} requires a subfunction before payload")

    @property
    def known(self) -> bool:
        return self.sid in SERVICES

    @property
    def has_subfunction_slot(self) -> bool:
        desc = SERVICES.get(self.sid)
        return bool(desc and desc.has_subfunction)

    def encode(self) -> bytes:
        return encode_request(self)


@dataclass(frozen=True)
class UdsResponse:
    positive: bool
    sid: int
    nrc: Optional[int] = None
    payload: bytes = b""

    def __post_init__(self) -> None:
        _check_byte(self.sid, "sid")
        object.__setattr__(self, "payload", bytes(self.payload))
        if self.positive:
            if self.nrc is not None:
                raise ValueError("positive response cannot carry an NRC")
            if self.sid + POSITIVE_OFFSET > 0xFF or self.sid + POSITIVE_OFFSET == NEGATIVE_RESPONSE:
                raise ValueError(f"sid 0x{self.sid:02X} has no positive response byte")
        else:
            if self.nrc is None:
                raise ValueError("negative response requires an NRC")
            _check_byte(self.nrc, "nrc")
            if self.payload:
                raise ValueError("negative response has no payload")

    @property
    def kind(self) -> str:
        return "positive" if self.positive else "negative"

    @classmethod
    def negative(cls, sid: int, nrc: int) -> "UdsResponse":
        return cls(False, sid, nrc)

    @classmethod
    def ok(cls, sid: int, payload: bytes = b"") -> "UdsResponse":
        return cls(True, sid, None, payload)

    def encode(self) -> bytes:
        return encode_response(self)


def parse_request(data: bytes) -> UdsRequest:
    data = bytes(data)
    if not data:
        raise MalformedFrameError("empty request frame")
    sid = data[0]
    desc = SERVICES.get(sid)
    if desc is not None and desc.has_subfunction and len(data) >= 2:
        return UdsRequest(sid, data[1], data[2:])
    return UdsRequest(sid, None, data[1:])


def encode_request(req: UdsRequest) -> bytes:
    head = bytes([req.sid]) if req.subfunction is None else bytes([req.sid, req.subfunction])
    return head + req.payload


def parse_response(data: bytes) -> UdsResponse:
    data = bytes(data)
    if not data:
        raise MalformedFrameError("empty response frame")
    lead = data[0]
    if lead == NEGATIVE_RESPONSE:
        if len(data) != 3:
            raise MalformedFrameError(f"negative response must be 3 bytes, got {len(data)}")
        return UdsResponse(False, data[1], data[2])
    if lead < POSITIVE_OFFSET:
        raise NotAResponseError(f"0x{lead:02X} is a request SID, not a response")
    return UdsResponse(True, lead - POSITIVE_OFFSET, None, data[1:])


def encode_response(resp: UdsResponse) -> bytes:
    if resp.positive:
        return bytes([resp.sid + POSITIVE_OFFSET]) + resp.payload
    return bytes([NEGATIVE_RESPONSE, resp.sid, resp.nrc])


@dataclass(frozen=True)
class UdsExchange:
    """One request/response pair as seen on one network segment."""

    timestamp: int
    link: str
    source: int
    target_ecu: str
    request: UdsRequest
    response: Optional[UdsResponse] = None

    def __post_init__(self) -> None:
        if self.response is not None and self.response.sid != self.request.sid:
            raise ValueError(
                f"response sid 0x{self.response.sid:02X} does not match request 0x{self.request.sid:02X}"
            )

    @property
    def sid(self) -> int:
        return self.request.sid

    @property
    def request_bytes(self) -> bytes:
        return encode_request(self.request)

    @property
    def response_bytes(self) -> Optional[bytes]:
        return None if self.response is None else encode_response(self.response)

    def to_record(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "link": self.link,
            "source": self.source,
            "target_ecu": self.target_ecu,
            "request": self.request_bytes.hex(),
            "response": None if self.response is None else self.response_bytes.hex(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "UdsExchange":
        response = rec.get("response")
        return cls(
            timestamp=int(rec["timestamp"]),
            link=str(rec["link"]),
            source=int(rec["source"]),
            target_ecu=str(rec["target_ecu"]),
            request=parse_request(_unhex(rec["request"])),
            response=None if response is None else parse_response(_unhex(response)),
        )


def _unhex(text: str) -> bytes:
    if not isinstance(text, str) or text != text.lower():
        raise ValueError(f"hex field must be a lowercase string: {text!r}")
    return bytes.fromhex(text)


def dump_trace(exchanges: Iterable[UdsExchange], fh: IO[str]) -> None:
    for ex in exchanges:
        fh.write(json.dumps(ex.to_record(), separators=(",", ":")) + "\n")


def iter_trace(lines: Iterable[str], path: str | None = None) -> Iterator[UdsExchange]:
    last_ts = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            ex = UdsExchange.from_record(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise TraceFormatError(str(exc) or type(exc).__name__, path, lineno) from exc
        if last_ts is not None and ex.timestamp < last_ts:
            raise TraceFormatError("timestamps must be non-decreasing", path, lineno)
        last_ts = ex.timestamp
        yield ex


def read_trace(path: str | Path) -> list[UdsExchange]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_trace(fh, str(path)))


def write_trace(path: str | Path, exchanges: Iterable[UdsExchange]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dump_trace(exchanges, fh)
