"""The UDS attack technique catalog with expected logging/detection coverage."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

from udsmon import _yamlio

TACTICS = ("RD", "PS", "PE", "DE", "CA", "DS", "LM", "CL", "AF")
LOGGING_STRATEGIES = ("IR", "FE", "MFI")
DETECTION_STRATEGIES = ("SLP", "CLC", "PTI")

# "Multiple" rows are instantiated over this bounded set
REPRESENTATIVE_SIDS = frozenset((0x10, 0x22, 0x27, 0x31, 0x3E))

NA = "NA"
VARIOUS = "Various"

_ID_RE = re.compile(r"^AT-(?P<tactic>[A-Z]{2})-(?P<number>\d+(?:\.\d+)?)$")


class UnknownTechniqueError(LookupError):
    pass


@dataclass(frozen=True)
class AttackTechnique:
    id: str
    name: str
    sids: frozenset[int]
    multiple_sids: bool
    logging: frozenset[str]
    logging_marker: Optional[str]  # "NA" or "Various" when the cell is not a strategy list
    autosar: str  # full | partial | none
    detection: frozenset[str]
    detection_na: bool
    raw: tuple[str, str, str, str, str]  # sids, logging, autosar, detection cells as transcribed

    @property
    def tactic(self) -> str:
        return _ID_RE.match(self.id).group("tactic")  # type: ignore[union-attr]

    @property
    def effective_sids(self) -> frozenset[int]:
        return REPRESENTATIVE_SIDS if self.multiple_sids else self.sids


def _split(cell: str) -> list[str]:
    return [p.strip() for p in cell.split(",") if p.strip()]


def _autosar_level(cell: str) -> str:
    if cell == "✓":
        return "full"
    if cell == "(✓)" or cell.startswith("Only "):
        return "partial"
    if cell == "No":
        return "none"
    raise ValueError(f"unrecognized AUTOSAR cell {cell!r}")


def technique_from_row(row: dict) -> AttackTechnique:
    tid = str(row["id"])
    if not _ID_RE.match(tid) or _ID_RE.match(tid).group("tactic") not in TACTICS:  # type: ignore[union-attr]
        raise ValueError(f"malformed technique id {tid!r}")
    sids_cell = str(row.get("sids") or "")
    logging_cell = str(row["logging"])
    autosar_cell = str(row["autosar"])
    detection_cell = str(row["detection"])

    multiple = sids_cell == "Multiple"
    sids = frozenset() if multiple or sids_cell in ("", "-") else frozenset(int(s, 16) for s in _split(sids_cell))

    marker = logging_cell if logging_cell in (NA, VARIOUS) else None
    logging = frozenset() if marker else frozenset(_split(logging_cell))
    if not logging <= set(LOGGING_STRATEGIES):
        raise ValueError(f"{tid}: unknown logging strategy in {logging_cell!r}")

    detection_na = detection_cell == NA
    detection = frozenset() if detection_na else frozenset(_split(detection_cell))
    if not detection <= set(DETECTION_STRATEGIES):
        raise ValueError(f"{tid}: unknown detection strategy in {detection_cell!r}")

    return AttackTechnique(
        id=tid,
        name=str(row["name"]),
        sids=sids,
        multiple_sids=multiple,
        logging=logging,
        logging_marker=marker,
        autosar=_autosar_level(autosar_cell),
        detection=detection,
        detection_na=detection_na,
        raw=(str(row["name"]), sids_cell, logging_cell, autosar_cell, detection_cell),
    )


@lru_cache(maxsize=1)
def catalog() -> tuple[AttackTechnique, ...]:
    doc = _yamlio.strip(_yamlio.load(_yamlio.data_path("catalog.yaml")))
    return tuple(technique_from_row(row) for row in doc["techniques"])


def technique(tid: str) -> AttackTechnique:
    for t in catalog():
        if t.id == tid:
            return t
    raise UnknownTechniqueError(f"unknown attack technique {tid!r}")


def technique_ids() -> frozenset[str]:
    return frozenset(t.id for t in catalog())


def tactic_counts() -> dict[str, int]:
    counts = Counter(t.tactic for t in catalog())
    return {tactic: counts.get(tactic, 0) for tactic in TACTICS}


def autosar_counts() -> dict[str, int]:
    counts = Counter(t.autosar for t in catalog())
    return {level: counts.get(level, 0) for level in ("full", "partial", "none")}


def detectable() -> list[AttackTechnique]:
    return [t for t in catalog() if not t.detection_na]
