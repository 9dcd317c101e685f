"""Independent transcription of the per-SID logging context table.

Each row: SID | comma-separated labels with strategy marks | AR column.
(1) = Invalid Request, (2) = Function Execution.
"""

from __future__ import annotations

import re

ROWS = """
0x10 | SID(1,2), SF(1,2), NRC(1) | -
0x11 | SID(1,2), SF(1,2), NRC(1) | IR, FE
0x14 | SID(1,2), groupOfDTC(1,2), MemorySelection(1,2), NRC(1) | IR, FE
0x19 | SID(1,2), SF(1,2), NRC(1) | -
0x22 | SID(1,2), DID1..DIDn(1,2), NRC(1) | -
0x23 | SID(1,2), memAddr(1,2), memSize(1,2), NRC(1) | -
0x24 | SID(1,2), DID(1,2), NRC(1) | -
0x27 | SID(1,2), SF(1,2), NRC(1) | IR, FE
0x28 | SID(1,2), SF(1,2), NRC(1) | IR, FE
0x29 | SID(1,2), SF(1,2), NRC(1) | IR, FE
0x2A | SID(1,2), transmissionMode(1,2), periodicDID#1..#n(1,2), NRC(1) | -
0x2C | SID(1,2), SF(1,2), dynamicallyDefinedDID(1,2), sourceDID#1..#n(1,2), memAddr(1,2), memSize(1,2), NRC(1) | -
0x2E | SID(1,2), DID(1,2), hash over dataRecord(1,2), NRC(1) | IR, FE
0x2F | SID(1,2), DID(1,2), I/O controlParameter(1,2), NRC(1) | IR, FE
0x31 | SID(1,2), SF(1,2), RID(1,2), NRC(1) | IR, FE
0x34 | SID(1,2), memAddr(1,2), memSize(1,2), NRC(1) | IR, FE
0x35 | SID(1,2), memAddr(1,2), memSize(1,2), NRC(1) | IR, FE
0x36 | SID(1), blockSequenceCounter(1), NRC(1) | -
0x37 | SID(1,2), NRC(1), hash over transferred data(2) | -
0x38 | SID(1,2), modeOfOperation(1,2), filePathAndName(1,2), NRC(1) | IR, FE
0x3D | SID(1,2), memAddr(1,2), memSize(1,2), NRC(1), hash over transferred data(2) | IR, FE
0x3E | n/a | -
0x84 | SID(1,2), Apar(1,2), Signature/Encryption Calculation(1,2), req. SID(1,2), NRC(1) | -
0x85 | SID(1,2), SF(1,2), NRC(1) | IR, FE
0x86 | SID(1,2), SF(1,2), SID for response(1,2), NRC(1) | -
0x87 | SID(1,2), SF(1,2), NRC(1) | -
"""

# label in the table -> field name in emitted events
LABELS = {
    "SID": "sid",
    "SF": "sf",
    "NRC": "nrc",
    "groupOfDTC": "group_of_dtc",
    "MemorySelection": "memory_selection",
    "DID1..DIDn": "did_list",
    "memAddr": "mem_addr",
    "memSize": "mem_size",
    "DID": "did",
    "transmissionMode": "transmission_mode",
    "periodicDID#1..#n": "periodic_did_list",
    "dynamicallyDefinedDID": "dddid",
    "sourceDID#1..#n": "source_did_list",
    "hash over dataRecord": "data_hash",
    "I/O controlParameter": "io_control_parameter",
    "RID": "rid",
    "blockSequenceCounter": "block_sequence_counter",
    "modeOfOperation": "mode_of_operation",
    "filePathAndName": "file_path",
    "Apar": "apar",
    "Signature/Encryption Calculation": "crypto_calc",
    "req. SID": "wrapped_sid",
    "SID for response": "response_sid",
}
# the same label names a different digest for 0x37 and 0x3D
TRANSFERRED = {0x37: "transfer_hash", 0x3D: "data_hash"}

_ITEM = re.compile(r"^(?P<label>.+?)\((?P<marks>[12,]+)\)$")


def parse():
    """sid -> ({"IR": set(fields), "FE": set(fields)}, ar_supported)"""
    table = {}
    for row in ROWS.strip().splitlines():
        sid_cell, fields_cell, ar_cell = (c.strip() for c in row.split("|"))
        sid = int(sid_cell, 16)
        sets = {"IR": set(), "FE": set()}
        if fields_cell != "n/a":
            for item in fields_cell.split(", "):
                m = _ITEM.match(item.strip())
                label = m.group("label")
                name = TRANSFERRED[sid] if label == "hash over transferred data" else LABELS[label]
                marks = m.group("marks").split(",")
                if "1" in marks:
                    sets["IR"].add(name)
                if "2" in marks:
                    sets["FE"].add(name)
        table[sid] = (sets, ar_cell == "IR, FE")
    return table
