"""Grid case input: MATPOWER M-file subset, canonical JSON, per-unit conversion.

Two levels of data are kept apart:

``RawCase``
    Rows exactly as they appear in a MATPOWER file (MW, MVAr, degrees).
``NetworkCase``
    Validated per-unit description used by the solvers (pu, radians),
    with generators aggregated per bus and out-of-service equipment
    removed. This is also what the canonical JSON format stores.
"""

from __future__ import annotations

import dataclasses
import enum
import importlib.resources
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

DEFAULT_V_MIN = 0.9
DEFAULT_V_MAX = 1.1

STOCK_CASES = ("case30", "case118", "case1354pegase", "case2383wp")


class CaseError(ValueError):
    """Base class for case input problems."""


class CaseParseError(CaseError):
    """Malformed text; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseStructureError(CaseError):
    """A mandatory block is missing."""


class CaseValidationError(CaseError):
    """Data parsed fine but violates a case invariant."""


class BusType(str, enum.Enum):
    PQ = "PQ"
    PV = "PV"
    SLACK = "SLACK"


class Status(str, enum.Enum):
    ON = "on"
    OFF = "off"


_MATPOWER_BUS_TYPES = {1: BusType.PQ, 2: BusType.PV, 3: BusType.SLACK}


@dataclass(frozen=True)
class BusRecord:
    id: int
    btype: BusType
    p_demand: float
    q_demand: float
    g_shunt: float
    b_shunt: float
    v_mag_init: float
    v_ang_init: float
    base_kv: float
    v_max: float
    v_min: float


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap: float
    shift: float
    status: Status = Status.ON


@dataclass(frozen=True)
class GenRecord:
    bus: int
    p_set: float
    q_init: float
    q_max: float
    q_min: float
    v_set: float
    status: Status = Status.ON


@dataclass(frozen=True)
class RawCase:
    """Case rows in file units. Use :func:`to_per_unit` before solving."""

    base_mva: float
    buses: tuple[BusRecord, ...]
    gens: tuple[GenRecord, ...]
    branches: tuple[BranchRecord, ...]
    name: str = ""


@dataclass(frozen=True)
class NetworkCase:
    """Per-unit network. Angles in radians, powers in pu of ``base_mva``."""

    name: str
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...] = field(default_factory=tuple)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def slack_bus(self) -> BusRecord:
        return next(b for b in self.buses if b.btype is BusType.SLACK)


# --------------------------------------------------------------------------
# MATPOWER parsing
# --------------------------------------------------------------------------

# minimum column counts (MATPOWER 7 caseformat)
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}
_BLOCK_START = re.compile(r"^\s*(?:mpc\.)?(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*(?:mpc\.)?baseMVA\s*=\s*([^;%\s]+)\s*;?")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_number(token: str, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise CaseParseError(f"cannot parse number {token!r}", lineno) from None


def _read_blocks(text: str) -> tuple[float | None, dict[str, list[tuple[int, list[float]]]]]:
    base_mva = None
    blocks: dict[str, list[tuple[int, list[float]]]] = {}
    current: str | None = None
    rows: list[tuple[int, list[float]]] = []
    pending: list[float] = []
    pending_line = 0

    def flush_row():
        nonlocal pending
        if pending:
            rows.append((pending_line, pending))
        pending = []

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line)
        if current is None:
            m = _SCALAR.match(line)
            if m:
                base_mva = _parse_number(m.group(1), lineno)
                continue
            m = _BLOCK_START.match(line)
            if not m:
                continue
            current, rows, pending = m.group(1), [], []
            line = m.group(2)
        closed = "]" in line
        if closed:
            line = line[: line.index("]")]
        for piece_no, piece in enumerate(line.split(";")):
            if piece_no > 0:
                flush_row()
            tokens = piece.replace(",", " ").split()
            if tokens and not pending:
                pending_line = lineno
            pending.extend(_parse_number(t, lineno) for t in tokens)
        # a newline also ends a matrix row
        flush_row()
        if closed:
            blocks[current] = rows
            current = None
    if current is not None:
        raise CaseParseError(f"unterminated block {current!r}")
    return base_mva, blocks


def _check_columns(name: str, rows: list[tuple[int, list[float]]]) -> None:
    if not rows:
        return
    width = len(rows[0][1])
    for lineno, row in rows:
        if len(row) < _MIN_COLS[name]:
            raise CaseParseError(
                f"{name} row has {len(row)} columns, need at least {_MIN_COLS[name]}", lineno
            )
        if len(row) != width:
            raise CaseParseError(f"{name} row has {len(row)} columns, expected {width}", lineno)


def _status(value: float) -> Status:
    return Status.ON if value > 0 else Status.OFF


def parse_matpower(text: str, name: str = "") -> RawCase:
    """Parse the ``baseMVA``/``bus``/``gen``/``branch`` blocks of a MATPOWER case.

    Other blocks (``gencost``, ``bus_name``, ...) are skipped with a log warning.
    """
    base_mva, blocks = _read_blocks(text)
    if base_mva is None:
        raise CaseStructureError("missing baseMVA")
    for required in ("bus", "gen", "branch"):
        if required not in blocks:
            raise CaseStructureError(f"missing {required!r} block")
    for other in sorted(set(blocks) - {"bus", "gen", "branch"}):
        logger.info("ignoring MATPOWER block %r", other)
    for block_name in ("bus", "gen", "branch"):
        _check_columns(block_name, blocks[block_name])

    buses = []
    for lineno, row in blocks["bus"]:
        code = int(row[1])
        if code not in _MATPOWER_BUS_TYPES:
            raise CaseParseError(f"unsupported bus type {code}", lineno)
        buses.append(
            BusRecord(
                id=int(row[0]),
                btype=_MATPOWER_BUS_TYPES[code],
                p_demand=row[2],
                q_demand=row[3],
                g_shunt=row[4],
                b_shunt=row[5],
                v_mag_init=row[7],
                v_ang_init=row[8],
                base_kv=row[9],
                v_max=row[11],
                v_min=row[12],
            )
        )
    gens = [
        GenRecord(
            bus=int(row[0]),
            p_set=row[1],
            q_init=row[2],
            q_max=row[3],
            q_min=row[4],
            v_set=row[5],
            status=_status(row[7]),
        )
        for _, row in blocks["gen"]
    ]
    branches = [
        BranchRecord(
            from_bus=int(row[0]),
            to_bus=int(row[1]),
            r=row[2],
            x=row[3],
            b_charging=row[4],
            tap=row[8],
            shift=row[9],
            status=_status(row[10]),
        )
        for _, row in blocks["branch"]
    ]
    raw = RawCase(
        base_mva=base_mva,
        buses=tuple(buses),
        gens=tuple(gens),
        branches=tuple(branches),
        name=name,
    )
    validate_raw(raw)
    return raw


def validate_raw(raw: RawCase) -> None:
    if not raw.base_mva > 0:
        raise CaseValidationError(f"base_mva must be positive, got {raw.base_mva}")
    ids = [b.id for b in raw.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    known = set(ids)
    n_slack = sum(b.btype is BusType.SLACK for b in raw.buses)
    if n_slack != 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {n_slack}")
    for br in raw.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
        if br.status is Status.ON and br.r**2 + br.x**2 == 0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
    for g in raw.gens:
        if g.bus not in known:
            raise CaseValidationError(f"generator references unknown bus {g.bus}")
        if g.status is Status.ON and not g.v_set > 0:
            raise CaseValidationError(f"generator at bus {g.bus} has non-positive v_set")
    for b in raw.buses:
        if not b.v_mag_init > 0:
            raise CaseValidationError(f"bus {b.id} has non-positive initial voltage")
        if b.v_min > 0 and b.v_max > 0 and b.v_min > b.v_max:
            raise CaseValidationError(f"bus {b.id} has v_min > v_max")


def read_matpower(path: str | Path) -> RawCase:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def stock_case_path(name: str) -> Path:
    """Location of a case file shipped with the ``matpower`` distribution."""
    stem = name[:-2] if name.endswith(".m") else name
    path = importlib.resources.files("matpower") / "data" / f"{stem}.m"
    if not path.is_file():
        raise FileNotFoundError(f"no stock MATPOWER case named {name!r}")
    return Path(str(path))


# --------------------------------------------------------------------------
# Per-unit conversion and transforms
# --------------------------------------------------------------------------


def to_per_unit(
    raw: RawCase, v_min: float = DEFAULT_V_MIN, v_max: float = DEFAULT_V_MAX
) -> NetworkCase:
    """Convert to per-unit, aggregate generators and drop out-of-service equipment.

    ``v_min``/``v_max`` only fill in bounds the file leaves at zero; use
    :func:`with_voltage_bounds` to override the file's bounds.
    """
    validate_raw(raw)
    base = raw.base_mva
    buses = []
    for b in raw.buses:
        lo = b.v_min if b.v_min > 0 else v_min
        hi = b.v_max if b.v_max > 0 else v_max
        if lo > hi:
            raise CaseValidationError(f"bus {b.id}: v_min {lo} exceeds v_max {hi}")
        buses.append(
            dataclasses.replace(
                b,
                p_demand=b.p_demand / base,
                q_demand=b.q_demand / base,
                g_shunt=b.g_shunt / base,
                b_shunt=b.b_shunt / base,
                v_ang_init=math.radians(b.v_ang_init),
                v_min=lo,
                v_max=hi,
            )
        )
    branches = tuple(
        dataclasses.replace(
            br,
            tap=br.tap if br.tap != 0 else 1.0,
            shift=math.radians(br.shift),
        )
        for br in raw.branches
        if br.status is Status.ON
    )

    per_bus: dict[int, GenRecord] = {}
    for g in raw.gens:
        if g.status is not Status.ON:
            continue
        g = dataclasses.replace(
            g,
            p_set=g.p_set / base,
            q_init=g.q_init / base,
            q_max=g.q_max / base,
            q_min=g.q_min / base,
        )
        prev = per_bus.get(g.bus)
        if prev is None:
            per_bus[g.bus] = g
            continue
        if abs(prev.v_set - g.v_set) > 1e-6:
            raise CaseValidationError(
                f"conflicting generator voltage setpoints at bus {g.bus}: {prev.v_set} vs {g.v_set}"
            )
        per_bus[g.bus] = dataclasses.replace(
            prev,
            p_set=prev.p_set + g.p_set,
            q_init=prev.q_init + g.q_init,
            q_max=prev.q_max + g.q_max,
            q_min=prev.q_min + g.q_min,
        )
    order = {b.id: k for k, b in enumerate(raw.buses)}
    gens = tuple(sorted(per_bus.values(), key=lambda g: order[g.bus]))
    return NetworkCase(name=raw.name, base_mva=base, buses=tuple(buses), branches=branches, gens=gens)


def load_case(
    source: str | Path,
    fmt: str | None = None,
    v_min: float = DEFAULT_V_MIN,
    v_max: float = DEFAULT_V_MAX,
) -> NetworkCase:
    """Load a case from a path or a stock case name such as ``"case30"``."""
    path = Path(source)
    if not path.exists() and str(source).removesuffix(".m") in STOCK_CASES:
        path = stock_case_path(str(source))
    if fmt is None:
        fmt = "json" if path.suffix.lower() == ".json" else "matpower"
    if fmt == "json":
        return read_case_json(path)
    if fmt == "matpower":
        return to_per_unit(read_matpower(path), v_min=v_min, v_max=v_max)
    raise ValueError(f"unknown case format {fmt!r}")


def scale_load(case: NetworkCase, factor: float) -> NetworkCase:
    """Multiply every bus demand (P and Q) by ``factor``."""
    if not math.isfinite(factor) or factor < 0:
        raise ValueError(f"load factor must be finite and non-negative, got {factor}")
    buses = tuple(
        dataclasses.replace(b, p_demand=b.p_demand * factor, q_demand=b.q_demand * factor)
        for b in case.buses
    )
    return dataclasses.replace(case, buses=buses)


def with_voltage_bounds(case: NetworkCase, v_min: float | None, v_max: float | None) -> NetworkCase:
    """Override voltage bounds on every bus (``None`` keeps the existing value)."""
    if v_min is None and v_max is None:
        return case
    buses = []
    for b in case.buses:
        lo = b.v_min if v_min is None else v_min
        hi = b.v_max if v_max is None else v_max
        if not 0 < lo <= hi:
            raise ValueError(f"invalid voltage bounds [{lo}, {hi}]")
        buses.append(dataclasses.replace(b, v_min=lo, v_max=hi))
    return dataclasses.replace(case, buses=tuple(buses))


# --------------------------------------------------------------------------
# Canonical JSON
# --------------------------------------------------------------------------


def _record_to_dict(record) -> dict:
    out = {}
    for f in dataclasses.fields(record):
        value = getattr(record, f.name)
        out[f.name] = value.value if isinstance(value, enum.Enum) else value
    return out


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [_record_to_dict(b) for b in case.buses],
        "branches": [_record_to_dict(br) for br in case.branches],
        "gens": [_record_to_dict(g) for g in case.gens],
    }


def case_from_dict(data: dict) -> NetworkCase:
    try:
        buses = tuple(BusRecord(**{**b, "btype": BusType(b["btype"])}) for b in data["buses"])
        branches = tuple(
            BranchRecord(**{**br, "status": Status(br.get("status", "on"))}) for br in data["branches"]
        )
        gens = tuple(GenRecord(**{**g, "status": Status(g.get("status", "on"))}) for g in data["gens"])
        case = NetworkCase(
            name=data.get("name", ""),
            base_mva=float(data["base_mva"]),
            buses=buses,
            branches=branches,
            gens=gens,
        )
    except (KeyError, TypeError) as exc:
        raise CaseStructureError(f"invalid case JSON: {exc}") from exc
    validate_raw(RawCase(case.base_mva, case.buses, case.gens, case.branches, case.name))
    return case


def dumps_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=1)


def loads_case(text: str) -> NetworkCase:
    return case_from_dict(json.loads(text))


def write_case_json(case: NetworkCase, path: str | Path) -> None:
    Path(path).write_text(dumps_case(case))


def read_case_json(path: str | Path) -> NetworkCase:
    return loads_case(Path(path).read_text())
