from __future__ import annotations

import pytest

from udsmon.codec import UdsExchange, parse_request, parse_response
from udsmon.detection import RuleSet
from udsmon.sensor import LoggingPolicy


def exchange(ts, req: bytes, resp: bytes | None = None, *, link="pt", source=0x0E80, ecu="ECM"):
    return UdsExchange(ts, link, source, ecu, parse_request(req), None if resp is None else parse_response(resp))


@pytest.fixture(scope="session")
def policy():
    return LoggingPolicy.default()


@pytest.fixture(scope="session")
def rules():
    return RuleSet.default()


def sa_attempts(n, t0=360_000, gap=500, source=0x0E80, ecu="ECM"):
    """n rounds of seed request + rejected key."""
    out, t = [], t0
    for _ in range(n):
        out.append(exchange(t, b"\x27\x01", b"\x67\x01\x12\x34\x56\x78", source=source, ecu=ecu))
        out.append(exchange(t + gap // 2, b"\x27\x02\xde\xad\xbe\xef", b"\x7f\x27\x35", source=source, ecu=ecu))
        t += gap
    return out


def download(image: bytes, t0=360_000, block=256, source=0x0E80, ecu="ECM"):
    """Programming session, unlock, RequestDownload / TransferData... / RequestTransferExit."""
    out = [
        exchange(t0, b"\x10\x02", b"\x50\x02\x00\x32\x01\xf4", source=source, ecu=ecu),
        exchange(t0 + 10, b"\x27\x01", b"\x67\x01\x01\x02\x03\x04", source=source, ecu=ecu),
        exchange(t0 + 20, b"\x27\x02\x05\x06\x07\x08", b"\x67\x02", source=source, ecu=ecu),
        exchange(
            t0 + 30,
            b"\x34\x00\x44" + (0x20000).to_bytes(4, "big") + len(image).to_bytes(4, "big"),
            b"\x74\x20\x01\x02",
            source=source,
            ecu=ecu,
        ),
    ]
    t = t0 + 40
    for n, off in enumerate(range(0, len(image), block), 1):
        out.append(exchange(t, bytes([0x36, n & 0xFF]) + image[off : off + block], bytes([0x76, n & 0xFF]), source=source, ecu=ecu))
        t += 5
    out.append(exchange(t, b"\x37", b"\x77", source=source, ecu=ecu))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
