"""Case-file readers.

Two formats are accepted:

* IEEE Common Data Format (CDF). Bus names occupy columns 6-17; everything
  after column 17 is read as whitespace-separated fields, so slightly
  misaligned files still parse. Loads, generation and shunts are converted to
  per-unit on the title-line MVA base.
* A line-oriented format for hand-written toy cases, values already in p.u.::

      # comment
      name two-bus
      bus <id> <slack|pv|pq> [load_p] [load_q] [gen_p] [v_set] [shunt_g] [shunt_b]
      branch <from_id> <to_id> <r> <x> [b_charging] [tap]
      measure <kind> <bus_id | branch_number> [from|to]

  `measure` lines are optional; without them the default plan is used.
  Branch numbers in `measure` lines are 1-based in file order.
"""

from __future__ import annotations

from importlib import resources
from typing import Dict, List, Optional, Tuple

from .errors import CaseFormatError
from .grid import (
    Branch,
    Bus,
    BusKind,
    MeasurementKind,
    MeasurementType,
    NetworkModel,
)
from .log import get_logger

logger = get_logger("casefile")

_CDF_BUS_KINDS = {0: BusKind.PQ, 1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def load_case(text: str) -> NetworkModel:
    """Parse case text (CDF or the simplified format) into a validated model."""

    if not isinstance(text, str) or not text.strip():
        raise CaseFormatError("empty case text")
    if any(line.upper().startswith("BUS DATA FOLLOWS") for line in text.splitlines()):
        model = _parse_cdf(text)
    else:
        model = _parse_simple(text)
    logger.debug(
        "casefile.load name=%s buses=%d branches=%d measurements=%d",
        model.name,
        model.n_bus,
        model.n_branch,
        model.n_measurements,
    )
    return model


def load_bundled_case(name: str = "ieee30") -> NetworkModel:
    resource = resources.files("fdia_dae").joinpath("cases", f"{name}.cdf")
    if not resource.is_file():
        raise CaseFormatError(f"no bundled case named {name!r}")
    return load_case(resource.read_text(encoding="utf-8"))


def _parse_cdf(text: str) -> NetworkModel:
    lines = text.splitlines()
    title = lines[0] if lines else ""
    base_mva = _cdf_base_mva(title)
    name = title[44:].strip() or "cdf-case"

    bus_rows: List[Tuple[int, str]] = []
    branch_rows: List[Tuple[int, str]] = []
    section: Optional[str] = None
    for lineno, raw in enumerate(lines, start=1):
        upper = raw.strip().upper()
        if upper.startswith("BUS DATA FOLLOWS"):
            section = "bus"
            continue
        if upper.startswith("BRANCH DATA FOLLOWS"):
            section = "branch"
            continue
        if upper.startswith("-9"):
            section = None
            continue
        if section == "bus" and raw.strip():
            bus_rows.append((lineno, raw))
        elif section == "branch" and raw.strip():
            branch_rows.append((lineno, raw))

    if not bus_rows:
        raise CaseFormatError("no BUS DATA section found")

    buses: List[Bus] = []
    index_of: Dict[int, int] = {}
    for lineno, raw in bus_rows:
        bus = _cdf_bus(lineno, raw, base_mva)
        if bus.id in index_of:
            raise CaseFormatError(f"duplicate bus {bus.id}", lineno)
        index_of[bus.id] = len(buses)
        buses.append(bus)

    branches: List[Branch] = []
    for lineno, raw in branch_rows:
        fields = raw.split()
        if len(fields) < 9:
            raise CaseFormatError("branch record has too few fields", lineno)
        try:
            f_id, t_id = int(fields[0]), int(fields[1])
            r, x, b = float(fields[6]), float(fields[7]), float(fields[8])
            ratio = float(fields[14]) if len(fields) > 14 else 0.0
        except ValueError as exc:
            raise CaseFormatError(f"bad branch field: {exc}", lineno) from exc
        branches.append(
            Branch(
                from_bus=_lookup(index_of, f_id, lineno),
                to_bus=_lookup(index_of, t_id, lineno),
                r=r,
                x=x,
                b_charging=b,
                tap_ratio=ratio if ratio != 0.0 else 1.0,
            )
        )

    return _build(buses, branches, None, name)


def _cdf_base_mva(title: str) -> float:
    try:
        return float(title[31:37])
    except ValueError:
        return 100.0


def _cdf_bus(lineno: int, raw: str, base_mva: float) -> Bus:
    try:
        bus_id = int(raw[0:4])
    except ValueError as exc:
        raise CaseFormatError(f"bad bus number {raw[0:4]!r}", lineno) from exc
    fields = raw[17:].split()
    if len(fields) < 15:
        raise CaseFormatError("bus record has too few fields", lineno)
    try:
        kind_code = int(fields[2])
        v_final = float(fields[3])
        load_p, load_q = float(fields[5]), float(fields[6])
        gen_p = float(fields[7])
        v_desired = float(fields[10])
        shunt_g, shunt_b = float(fields[13]), float(fields[14])
    except ValueError as exc:
        raise CaseFormatError(f"bad bus field: {exc}", lineno) from exc
    if kind_code not in _CDF_BUS_KINDS:
        raise CaseFormatError(f"unknown bus type {kind_code}", lineno)
    return Bus(
        id=bus_id,
        kind=_CDF_BUS_KINDS[kind_code],
        base_load_p=load_p / base_mva,
        base_load_q=load_q / base_mva,
        gen_p=gen_p / base_mva,
        voltage_setpoint=v_desired if v_desired > 0 else (v_final or 1.0),
        shunt_g=shunt_g,
        shunt_b=shunt_b,
        name=raw[5:17].strip(),
    )


def _parse_simple(text: str) -> NetworkModel:
    name = "case"
    buses: List[Bus] = []
    index_of: Dict[int, int] = {}
    branch_lines: List[Tuple[int, List[str]]] = []
    measure_lines: List[Tuple[int, List[str]]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *fields = line.split()
        keyword = keyword.lower()
        if keyword == "name":
            name = " ".join(fields) or name
        elif keyword == "bus":
            bus = _simple_bus(lineno, fields)
            if bus.id in index_of:
                raise CaseFormatError(f"duplicate bus {bus.id}", lineno)
            index_of[bus.id] = len(buses)
            buses.append(bus)
        elif keyword == "branch":
            branch_lines.append((lineno, fields))
        elif keyword == "measure":
            measure_lines.append((lineno, fields))
        else:
            raise CaseFormatError(f"unknown record {keyword!r}", lineno)

    if not buses:
        raise CaseFormatError("case defines no buses")

    branches = [_simple_branch(lineno, fields, index_of) for lineno, fields in branch_lines]
    plan = None
    if measure_lines:
        plan = [
            _simple_measure(lineno, fields, index_of, len(branches))
            for lineno, fields in measure_lines
        ]
    return _build(buses, branches, plan, name)


def _floats(lineno: int, fields: List[str], what: str) -> List[float]:
    try:
        return [float(v) for v in fields]
    except ValueError as exc:
        raise CaseFormatError(f"bad {what} field: {exc}", lineno) from exc


def _simple_bus(lineno: int, fields: List[str]) -> Bus:
    if len(fields) < 2:
        raise CaseFormatError("bus record needs an id and a kind", lineno)
    try:
        bus_id = int(fields[0])
        kind = BusKind(fields[1].lower())
    except ValueError as exc:
        raise CaseFormatError(f"bad bus record: {exc}", lineno) from exc
    values = _floats(lineno, fields[2:], "bus")
    if len(values) > 6:
        raise CaseFormatError("bus record has too many fields", lineno)
    defaults = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
    values = values + defaults[len(values) :]
    return Bus(
        id=bus_id,
        kind=kind,
        base_load_p=values[0],
        base_load_q=values[1],
        gen_p=values[2],
        voltage_setpoint=values[3],
        shunt_g=values[4],
        shunt_b=values[5],
    )


def _simple_branch(lineno: int, fields: List[str], index_of: Dict[int, int]) -> Branch:
    if not 4 <= len(fields) <= 6:
        raise CaseFormatError("branch record needs from, to, r, x [b] [tap]", lineno)
    try:
        f_id, t_id = int(fields[0]), int(fields[1])
    except ValueError as exc:
        raise CaseFormatError(f"bad branch endpoint: {exc}", lineno) from exc
    values = _floats(lineno, fields[2:], "branch")
    b = values[2] if len(values) > 2 else 0.0
    tap = values[3] if len(values) > 3 else 1.0
    return Branch(
        from_bus=_lookup(index_of, f_id, lineno),
        to_bus=_lookup(index_of, t_id, lineno),
        r=values[0],
        x=values[1],
        b_charging=b,
        tap_ratio=tap,
    )


def _simple_measure(
    lineno: int, fields: List[str], index_of: Dict[int, int], n_branch: int
) -> MeasurementKind:
    if len(fields) not in (2, 3):
        raise CaseFormatError("measure record needs a kind and a location", lineno)
    try:
        kind = MeasurementType(fields[0].lower())
        where = int(fields[1])
    except ValueError as exc:
        raise CaseFormatError(f"bad measure record: {exc}", lineno) from exc
    if kind in (MeasurementType.P_FLOW, MeasurementType.Q_FLOW):
        if not 1 <= where <= n_branch:
            raise CaseFormatError(f"branch number {where} out of range", lineno)
        direction = fields[2].lower() if len(fields) == 3 else "from"
        if direction not in ("from", "to"):
            raise CaseFormatError(f"bad flow direction {direction!r}", lineno)
        return MeasurementKind(kind, where - 1, direction)
    return MeasurementKind(kind, _lookup(index_of, where, lineno))


def _lookup(index_of: Dict[int, int], bus_id: int, lineno: int) -> int:
    if bus_id not in index_of:
        raise CaseFormatError(f"unknown bus {bus_id}", lineno)
    return index_of[bus_id]


def _build(
    buses: List[Bus],
    branches: List[Branch],
    plan: Optional[List[MeasurementKind]],
    name: str,
) -> NetworkModel:
    return NetworkModel(buses, branches, plan, name=name)
