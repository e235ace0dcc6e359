"""JSON case documents mirroring the PYPOWER/MATPOWER ``ppc`` tables.

A case is one JSON object ``{"version", "baseMVA", "bus", "gen", "branch"}``
whose arrays keep MATPOWER column order, so converting to a ``ppc`` dict is
``{k: numpy.array(v) for k, v in doc.items()}``. Powers in the tables are MW
and MVAr, angles degrees, everything else per-unit.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    CaseSyntaxError,
    CountMismatch,
    DimensionMismatch,
    GenOnMissingBus,
    ManifestMissing,
    NoSlack,
    SchemaError,
    UnsupportedElement,
)
from .network import Branch, Bus, BusType, GridState, Network

# bus columns
BUS_I, BUS_TYPE, PD, QD, GS, BS, BUS_AREA, VM, VA, BASE_KV, ZONE, VMAX, VMIN = range(13)
# gen columns
GEN_BUS, PG, QG, QMAX, QMIN, VG, MBASE, GEN_STATUS, PMAX, PMIN = range(10)
# branch columns
(F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, RATE_B, RATE_C,
 TAP, SHIFT, BR_STATUS, ANGMIN, ANGMAX) = range(13)

MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 13}
TABLES = ("bus", "gen", "branch")
VERSION = "2"


@dataclass(eq=True)
class CaseDocument:
    version: str
    base_mva: float
    bus: list[list[float]]
    gen: list[list[float]] = field(default_factory=list)
    branch: list[list[float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def table(self, name: str) -> np.ndarray:
        rows = getattr(self, name)
        if not rows:
            return np.zeros((0, MIN_COLUMNS[name]))
        return np.array(rows, dtype=float)


def format_number(x: float) -> str:
    """Shortest round-trip decimal, positional below 1e16."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite number {x}")
    if abs(x) < 1e16:
        return np.format_float_positional(x, unique=True, trim="-")
    return repr(x)


def _row(values) -> str:
    return "[" + ", ".join(format_number(v) for v in values) + "]"


def serialize_case(doc: CaseDocument) -> str:
    parts = [
        "{",
        f'  "version": {json.dumps(str(doc.version))},',
        f'  "baseMVA": {format_number(doc.base_mva)},',
    ]
    for i, name in enumerate(TABLES):
        rows = getattr(doc, name)
        last = i == len(TABLES) - 1 and not doc.extra
        comma = "" if last else ","
        if not rows:
            parts.append(f'  "{name}": []{comma}')
            continue
        parts.append(f'  "{name}": [')
        parts.append(",\n".join("    " + _row(r) for r in rows))
        parts.append(f"  ]{comma}")
    extra = sorted(doc.extra.items())
    for i, (key, value) in enumerate(extra):
        comma = "" if i == len(extra) - 1 else ","
        parts.append(f"  {json.dumps(key)}: {json.dumps(value, sort_keys=True)}{comma}")
    parts.append("}")
    return "\n".join(parts) + "\n"


def _reject_constant(name):
    raise SchemaError("document", None, f"non-finite number {name}")


def parse_case(text: str | bytes) -> CaseDocument:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        obj = json.loads(
            text, parse_int=float, parse_float=float, parse_constant=_reject_constant
        )
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.lineno, exc.colno, exc.msg) from None
    if not isinstance(obj, dict):
        raise SchemaError("document", None, "top level must be an object")
    for key in ("version", "baseMVA", *TABLES):
        if key not in obj:
            raise SchemaError(key, None, "missing")
    version = obj["version"]
    if isinstance(version, float):
        version = format_number(version)
    if not isinstance(version, str):
        raise SchemaError("version", None, "must be a string")
    base = obj["baseMVA"]
    if not isinstance(base, float) or not base > 0:
        raise SchemaError("baseMVA", None, "must be a positive number")

    tables = {}
    for name in TABLES:
        rows = obj[name]
        if not isinstance(rows, list):
            raise SchemaError(name, None, "must be an array of rows")
        width = None
        for r, row in enumerate(rows):
            if not isinstance(row, list) or not all(type(v) is float for v in row):
                raise SchemaError(name, r, "row must be an array of numbers")
            if len(row) < MIN_COLUMNS[name]:
                raise SchemaError(name, r, f"needs at least {MIN_COLUMNS[name]} columns, got {len(row)}")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise SchemaError(name, r, f"has {len(row)} columns, expected {width}")
        tables[name] = rows

    for r, row in enumerate(tables["bus"]):
        if row[BUS_TYPE] not in (1.0, 2.0, 3.0):
            raise SchemaError("bus", r, f"invalid BUS_TYPE {format_number(row[BUS_TYPE])}")
        if row[BUS_I] != int(row[BUS_I]):
            raise SchemaError("bus", r, "BUS_I must be an integer")
    extra = {k: v for k, v in obj.items() if k not in ("version", "baseMVA", *TABLES)}
    return CaseDocument(version, base, tables["bus"], tables["gen"], tables["branch"], extra)


def canonical(text: str | bytes) -> str:
    return serialize_case(parse_case(text))


def to_network(doc: CaseDocument) -> Network:
    base = doc.base_mva
    ids = [int(row[BUS_I]) for row in doc.bus]
    pos = {i: k for k, i in enumerate(ids)}
    pg = np.zeros(len(ids))
    qg = np.zeros(len(ids))
    vg: dict[int, float] = {}
    for row in doc.gen:
        bus = int(row[GEN_BUS])
        if bus not in pos:
            raise GenOnMissingBus(bus)
        if row[GEN_STATUS] > 0:
            pg[pos[bus]] += row[PG]
            qg[pos[bus]] += row[QG]
            vg.setdefault(bus, row[VG])

    buses = []
    for k, row in enumerate(doc.bus):
        if row[GS] != 0 or row[BS] != 0:
            raise UnsupportedElement(f"bus {ids[k]} has a shunt (GS/BS)")
        btype = BusType(int(row[BUS_TYPE]))
        vm = row[VM]
        if btype != BusType.PQ and ids[k] in vg:
            vm = vg[ids[k]]
        buses.append(Bus(
            id=ids[k],
            bus_type=btype,
            p=(pg[k] - row[PD]) / base,
            q=(qg[k] - row[QD]) / base,
            vm=vm,
            va=math.radians(row[VA]),
            base_kv=row[BASE_KV],
        ))
    if not any(b.bus_type == BusType.SLACK for b in buses):
        raise NoSlack()

    branches = []
    for r, row in enumerate(doc.branch):
        if row[BR_STATUS] == 0:
            continue
        if row[SHIFT] != 0:
            raise UnsupportedElement(f"branch {r} has a phase shift")
        branches.append(Branch(
            from_bus=int(row[F_BUS]),
            to_bus=int(row[T_BUS]),
            r=row[BR_R],
            x=row[BR_X],
            b_charging=row[BR_B],
            tap=row[TAP] if row[TAP] != 0 else 1.0,
        ))
    return Network(base, tuple(buses), tuple(branches), source=doc)


def document_from_network(net: Network) -> CaseDocument:
    """Synthesize a case document: loads on PQ buses, one generator per PV/slack bus."""
    base = net.base_mva
    bus, gen = [], []
    for b in net.buses:
        if b.bus_type == BusType.PQ:
            pd, qd = -b.p * base, -b.q * base
        else:
            pd = qd = 0.0
            gen.append([float(b.id), b.p * base, b.q * base, 9999.0, -9999.0,
                        b.vm, base, 1.0, 9999.0, -9999.0])
        bus.append([float(b.id), float(int(b.bus_type)), pd + 0.0, qd + 0.0, 0.0, 0.0, 1.0,
                    b.vm, math.degrees(b.va), b.base_kv, 1.0, 1.1, 0.9])
    branch = [
        [float(br.from_bus), float(br.to_bus), br.r, br.x, br.b_charging, 0.0, 0.0, 0.0,
         br.tap, 0.0, 1.0 if br.in_service else 0.0, -360.0, 360.0]
        for br in net.branches
    ]
    return CaseDocument(VERSION, base, bus, gen, branch)


def from_solution(net: Network, state: GridState) -> CaseDocument:
    """Write a state's voltages and generator outputs into a case document."""
    if state.n_bus != net.n_bus:
        raise DimensionMismatch(f"state has {state.n_bus} buses, network {net.n_bus}")
    template = net.source if net.source is not None else document_from_network(net)
    base = template.base_mva
    bus = [list(r) for r in template.bus]
    gen = [list(r) for r in template.gen]
    row_of = {int(r[BUS_I]): k for k, r in enumerate(bus)}

    for i, b in enumerate(net.buses):
        row = bus[row_of[b.id]]
        row[VM] = float(state.vm[i])
        row[VA] = math.degrees(float(state.va[i]))
        if b.bus_type == BusType.PQ:
            continue
        on_bus = [g for g in gen if int(g[GEN_BUS]) == b.id and g[GEN_STATUS] > 0]
        if not on_bus:
            on_bus = [[float(b.id), 0.0, 0.0, 9999.0, -9999.0, 1.0, base, 1.0, 9999.0, -9999.0]
                      + [0.0] * (len(gen[0]) - 10 if gen else 0)]
            gen.append(on_bus[0])
        first, rest = on_bus[0], on_bus[1:]
        q_total = float(state.q[i]) * base + row[QD]
        first[QG] = q_total - math.fsum(g[QG] for g in rest)
        if b.bus_type == BusType.SLACK:
            p_total = float(state.p[i]) * base + row[PD]
            first[PG] = p_total - math.fsum(g[PG] for g in rest)
        for g in on_bus:
            g[VG] = float(state.vm[i])
    branch = [list(r) for r in template.branch]
    return CaseDocument(template.version, base, bus, gen, branch, dict(template.extra))


def state_from_case(doc: CaseDocument, net: Network | None = None) -> GridState:
    """All four bus variables as stored in a (typically solved) document."""
    solved = to_network(doc)
    if net is not None and [b.id for b in net.buses] != [b.id for b in solved.buses]:
        raise DimensionMismatch("state document buses do not match the network")
    return GridState.from_array(solved.values, solved.known_mask)


def read_case(path: str | os.PathLike) -> CaseDocument:
    return parse_case(Path(path).read_bytes())


def write_case(path: str | os.PathLike, doc: CaseDocument) -> None:
    Path(path).write_bytes(serialize_case(doc).encode("utf-8"))


# --- datasets -------------------------------------------------------------

SPLITS = ("train", "test", "validation")


@dataclass
class DatasetManifest:
    name: str
    case_count: int
    split: dict[str, int]
    seed: int
    generator_params: dict = field(default_factory=dict)
    solved: bool = False

    def __post_init__(self):
        if sum(self.split.get(s, 0) for s in SPLITS) != self.case_count:
            raise SchemaError("manifest", None, "split counts must sum to case_count")

    def split_range(self, name: str) -> range:
        """Cases are ordered train, test, validation."""
        start = 0
        for s in SPLITS:
            n = self.split.get(s, 0)
            if s == name:
                return range(start, start + n)
            start += n
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


@dataclass
class CaseRecord:
    index: int
    name: str
    case: CaseDocument
    solution: CaseDocument | None


def case_filename(index: int) -> str:
    return f"{index:06d}.json"


def split_counts(count: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, int]:
    train = int(round(count * fractions[0]))
    test = int(round(count * fractions[1]))
    train = min(train, count)
    test = min(test, count - train)
    return {"train": train, "test": test, "validation": count - train - test}


def write_dataset(out_dir, manifest: DatasetManifest, records) -> None:
    """Write ``(case, solution_or_None)`` pairs in order, then the manifest."""
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    n = 0
    for i, (case, solution) in enumerate(records):
        write_case(out / "cases" / case_filename(i), case)
        if solution is not None:
            (out / "solutions").mkdir(exist_ok=True)
            write_case(out / "solutions" / case_filename(i), solution)
        n += 1
    if n != manifest.case_count:
        raise CountMismatch(manifest.case_count, n)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise ManifestMissing(f"no manifest.json in {path}")
    return DatasetManifest(**json.loads(mpath.read_text(encoding="utf-8")))


def read_dataset(path, split: str | None = None) -> tuple[DatasetManifest, Iterator[CaseRecord]]:
    root = Path(path)
    manifest = read_manifest(root)
    case_dir = root / "cases"
    names = sorted(p.name for p in case_dir.glob("*.json")) if case_dir.is_dir() else []
    if len(names) != manifest.case_count:
        raise CountMismatch(manifest.case_count, len(names))
    wanted = range(len(names)) if split is None else manifest.split_range(split)

    def stream() -> Iterator[CaseRecord]:
        for i in wanted:
            name = names[i]
            sol_path = root / "solutions" / name
            yield CaseRecord(
                index=i,
                name=name,
                case=read_case(case_dir / name),
                solution=read_case(sol_path) if sol_path.is_file() else None,
            )

    return manifest, stream()
