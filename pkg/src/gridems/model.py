"""Static grid data model: case parsing, validation and network topology.

A case is a versioned JSON document (schema_version 1) holding buses,
branches, generators, loads and interface definitions on a common MVA base.
Angles are stored in degrees in-file and converted to radians on parse.
GridCase instances are immutable after parsing; topology changes (outages,
islanding studies) are expressed through derived indices, never by mutating
the case.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

SCHEMA_VERSION = 1


class CaseError(Exception):
    """Base class for case-document problems."""


class CaseSyntaxError(CaseError):
    """Document is not valid JSON or misses required structure."""


class CaseSemanticError(CaseError):
    """Document parses but violates a model invariant."""


class BusType(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float
    type: BusType
    v_mag: float = 1.0
    v_ang: float = 0.0  # radians
    v_min: float = 0.9
    v_max: float = 1.1
    area: int = 1


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    status: bool = True
    s_max: float = 9999.0
    s_max_emergency: float | None = None  # defaults to 1.15 * s_max

    @property
    def emergency_rating(self) -> float:
        if self.s_max_emergency is not None:
            return self.s_max_emergency
        return 1.15 * self.s_max


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    ramp_rate: float
    cost_curve: tuple[tuple[float, float], ...]  # (breakpoint MW, $/MWh)
    reserve_cost: float = 0.0
    status: bool = True
    p: float = 0.0  # scheduled output, MW


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p: float
    q: float = 0.0
    sheddable: bool = True


@dataclass(frozen=True)
class InterfaceDef:
    id: int
    branches: tuple[tuple[int, int], ...]  # (branch id, direction sign)
    limit_mw: float


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    interfaces: tuple[InterfaceDef, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_bus_index", {b.id: i for i, b in enumerate(self.buses)})
        object.__setattr__(self, "_branch_index", {b.id: i for i, b in enumerate(self.branches)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def bus_pos(self, bus_id: int) -> int:
        return self._bus_index[bus_id]

    def branch_pos(self, branch_id: int) -> int:
        return self._branch_index[branch_id]

    def branch(self, branch_id: int) -> Branch:
        return self.branches[self._branch_index[branch_id]]

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self._bus_index[bus_id]]

    def gens_at(self, bus_id: int) -> list[Generator]:
        return [g for g in self.generators if g.bus == bus_id and g.status]

    def loads_at(self, bus_id: int) -> list[Load]:
        return [d for d in self.loads if d.bus == bus_id]

    def with_branch_out(self, branch_id: int) -> "GridCase":
        """Derived case with one branch switched out (case itself untouched)."""
        branches = tuple(
            replace(b, status=False) if b.id == branch_id else b for b in self.branches
        )
        return replace(self, branches=branches)

    def with_dispatch(self, p_by_gen: dict[int, float]) -> "GridCase":
        """Derived case with new generator scheduled outputs (MW)."""
        gens = tuple(
            replace(g, p=p_by_gen.get(g.id, g.p)) for g in self.generators
        )
        return replace(self, generators=gens)

    def with_loads(self, p_by_load: dict[int, float]) -> "GridCase":
        """Derived case with new load MW values (constant power factor)."""
        loads = []
        for d in self.loads:
            if d.id in p_by_load:
                p_new = p_by_load[d.id]
                q_new = d.q * (p_new / d.p) if d.p != 0.0 else d.q
                loads.append(replace(d, p=p_new, q=q_new))
            else:
                loads.append(d)
        return replace(self, loads=tuple(loads))


# ---------------------------------------------------------------------------
# parsing

_REQUIRED_TOP = ("schema_version", "base_mva", "buses", "branches", "generators", "loads")


def _get(record: dict, key: str, where: str, optional=False, default=None):
    if key not in record:
        if optional:
            return default
        raise CaseSyntaxError(f"{where}: missing field '{key}'")
    return record[key]


def parse_case(text: str) -> GridCase:
    """Parse and validate a case document. Raises CaseSyntaxError /
    CaseSemanticError with the offending element named."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise CaseSyntaxError("top level must be an object")
    for key in _REQUIRED_TOP:
        if key not in doc:
            raise CaseSyntaxError(f"missing top-level key '{key}'")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise CaseSyntaxError(f"unsupported schema_version {doc['schema_version']!r}")

    buses = []
    for rec in doc["buses"]:
        where = f"bus {rec.get('id', '?')}"
        btype = _get(rec, "type", where)
        try:
            btype = BusType(btype)
        except ValueError:
            raise CaseSemanticError(f"{where}: unknown bus type {btype!r}")
        buses.append(Bus(
            id=int(_get(rec, "id", where)),
            base_kv=float(_get(rec, "base_kv", where)),
            type=btype,
            v_mag=float(_get(rec, "v_mag", where, optional=True, default=1.0)),
            v_ang=math.radians(float(_get(rec, "v_ang", where, optional=True, default=0.0))),
            v_min=float(_get(rec, "v_min", where, optional=True, default=0.9)),
            v_max=float(_get(rec, "v_max", where, optional=True, default=1.1)),
            area=int(_get(rec, "area", where, optional=True, default=1)),
        ))

    branches = []
    for rec in doc["branches"]:
        where = f"branch {rec.get('id', '?')}"
        s_max = float(_get(rec, "s_max", where))
        branches.append(Branch(
            id=int(_get(rec, "id", where)),
            from_bus=int(_get(rec, "from_bus", where)),
            to_bus=int(_get(rec, "to_bus", where)),
            r=float(_get(rec, "r", where)),
            x=float(_get(rec, "x", where)),
            b_charging=float(_get(rec, "b_charging", where, optional=True, default=0.0)),
            tap_ratio=float(_get(rec, "tap_ratio", where, optional=True, default=1.0)),
            status=bool(_get(rec, "status", where, optional=True, default=True)),
            s_max=s_max,
            s_max_emergency=(
                float(rec["s_max_emergency"]) if rec.get("s_max_emergency") is not None else None
            ),
        ))

    generators = []
    for rec in doc["generators"]:
        where = f"generator {rec.get('id', '?')}"
        curve = tuple(
            (float(p), float(c)) for p, c in _get(rec, "cost_curve", where)
        )
        generators.append(Generator(
            id=int(_get(rec, "id", where)),
            bus=int(_get(rec, "bus", where)),
            p_min=float(_get(rec, "p_min", where)),
            p_max=float(_get(rec, "p_max", where)),
            q_min=float(_get(rec, "q_min", where)),
            q_max=float(_get(rec, "q_max", where)),
            ramp_rate=float(_get(rec, "ramp_rate", where)),
            cost_curve=curve,
            reserve_cost=float(_get(rec, "reserve_cost", where, optional=True, default=0.0)),
            status=bool(_get(rec, "status", where, optional=True, default=True)),
            p=float(_get(rec, "p", where, optional=True, default=0.0)),
        ))

    loads = []
    for rec in doc["loads"]:
        where = f"load {rec.get('id', '?')}"
        loads.append(Load(
            id=int(_get(rec, "id", where)),
            bus=int(_get(rec, "bus", where)),
            p=float(_get(rec, "p", where)),
            q=float(_get(rec, "q", where, optional=True, default=0.0)),
            sheddable=bool(_get(rec, "sheddable", where, optional=True, default=True)),
        ))

    interfaces = []
    for rec in doc.get("interfaces", []):
        where = f"interface {rec.get('id', '?')}"
        interfaces.append(InterfaceDef(
            id=int(_get(rec, "id", where)),
            branches=tuple((int(b), int(s)) for b, s in _get(rec, "branches", where)),
            limit_mw=float(_get(rec, "limit_mw", where)),
        ))

    case = GridCase(
        base_mva=float(doc["base_mva"]),
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        interfaces=tuple(interfaces),
    )
    validate_case(case)
    return case


def validate_case(case: GridCase) -> None:
    bus_ids = [b.id for b in case.buses]
    if len(set(bus_ids)) != len(bus_ids):
        raise CaseSemanticError("duplicate bus ids")
    bus_set = set(bus_ids)
    branch_ids = [b.id for b in case.branches]
    if len(set(branch_ids)) != len(branch_ids):
        raise CaseSemanticError("duplicate branch ids")
    if case.base_mva <= 0:
        raise CaseSemanticError("base_mva must be positive")

    for b in case.buses:
        if not b.v_min < b.v_max:
            raise CaseSemanticError(f"bus {b.id}: v_min must be below v_max")

    for br in case.branches:
        for end, name in ((br.from_bus, "from_bus"), (br.to_bus, "to_bus")):
            if end not in bus_set:
                raise CaseSemanticError(f"branch {br.id}: {name} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseSemanticError(f"branch {br.id}: from_bus equals to_bus")
        if br.x == 0:
            raise CaseSemanticError(f"branch {br.id}: zero reactance")
        if br.s_max <= 0:
            raise CaseSemanticError(f"branch {br.id}: s_max must be positive")
        if br.emergency_rating < br.s_max:
            raise CaseSemanticError(f"branch {br.id}: emergency rating below normal rating")

    for g in case.generators:
        if g.bus not in bus_set:
            raise CaseSemanticError(f"generator {g.id}: references unknown bus {g.bus}")
        if g.p_min > g.p_max:
            raise CaseSemanticError(f"generator {g.id}: p_min above p_max")
        if g.q_min > g.q_max:
            raise CaseSemanticError(f"generator {g.id}: q_min above q_max")
        if not g.cost_curve:
            raise CaseSemanticError(f"generator {g.id}: empty cost curve")
        costs = [c for _, c in g.cost_curve]
        if any(c2 < c1 for c1, c2 in zip(costs, costs[1:])):
            raise CaseSemanticError(f"generator {g.id}: cost curve not convex (marginal costs decrease)")

    for d in case.loads:
        if d.bus not in bus_set:
            raise CaseSemanticError(f"load {d.id}: references unknown bus {d.bus}")

    branch_set = set(branch_ids)
    for itf in case.interfaces:
        if not itf.branches:
            raise CaseSemanticError(f"interface {itf.id}: empty branch list")
        if itf.limit_mw <= 0:
            raise CaseSemanticError(f"interface {itf.id}: limit_mw must be positive")
        for bid, sign in itf.branches:
            if bid not in branch_set:
                raise CaseSemanticError(f"interface {itf.id}: references unknown branch {bid}")
            if sign not in (-1, 1):
                raise CaseSemanticError(f"interface {itf.id}: direction sign must be +1 or -1")

    if not any(g.status for g in case.generators):
        raise CaseSemanticError("no in-service generator")


def load_case(path) -> GridCase:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_case(fh.read())


# ---------------------------------------------------------------------------
# topology

@dataclass(frozen=True)
class LinkNetIndex:
    """Adjacency over in-service branches plus island labeling.

    adjacency maps bus id -> list of (branch id, far-end bus id); island
    labels partition all buses (a bus with no live branch is its own island).
    """
    adjacency: dict[int, tuple[tuple[int, int], ...]]
    island_of: dict[int, int]
    n_islands: int

    def island_buses(self, island: int) -> list[int]:
        return [b for b, lab in self.island_of.items() if lab == island]

    def degree(self, bus_id: int) -> int:
        return len(self.adjacency[bus_id])


def build_linknet(case: GridCase) -> LinkNetIndex:
    adj: dict[int, list[tuple[int, int]]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if not br.status:
            continue
        adj[br.from_bus].append((br.id, br.to_bus))
        adj[br.to_bus].append((br.id, br.from_bus))

    island_of: dict[int, int] = {}
    label = 0
    for bus in case.buses:
        if bus.id in island_of:
            continue
        stack = [bus.id]
        island_of[bus.id] = label
        while stack:
            b = stack.pop()
            for _, far in adj[b]:
                if far not in island_of:
                    island_of[far] = label
                    stack.append(far)
        label += 1

    return LinkNetIndex(
        adjacency={b: tuple(v) for b, v in adj.items()},
        island_of=island_of,
        n_islands=label,
    )


def find_radial_branches(idx: LinkNetIndex) -> set[int]:
    """Bridges of the live-branch graph: branches whose outage splits an island.

    Iterative Tarjan bridge search; parallel branches between the same bus
    pair are never bridges (each survives the other's removal).
    """
    disc: dict[int, int] = {}
    low: dict[int, int] = {}
    bridges: set[int] = set()
    counter = 0

    for root in idx.adjacency:
        if root in disc:
            continue
        # stack entries: (bus, incoming branch id, child iterator)
        disc[root] = low[root] = counter
        counter += 1
        stack = [(root, None, iter(idx.adjacency[root]))]
        while stack:
            bus, in_branch, children = stack[-1]
            advanced = False
            for br_id, far in children:
                if br_id == in_branch:
                    continue
                if far not in disc:
                    disc[far] = low[far] = counter
                    counter += 1
                    stack.append((far, br_id, iter(idx.adjacency[far])))
                    advanced = True
                    break
                low[bus] = min(low[bus], disc[far])
            if not advanced:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[bus])
                    if low[bus] > disc[parent]:
                        bridges.add(in_branch)

    # parallel branches cannot be bridges
    pair_count: dict[tuple[int, int], list[int]] = {}
    for bus, nbrs in idx.adjacency.items():
        for br_id, far in nbrs:
            key = (min(bus, far), max(bus, far))
            pair_count.setdefault(key, [])
            if br_id not in pair_count[key]:
                pair_count[key].append(br_id)
    for key, ids in pair_count.items():
        if len(ids) > 1:
            bridges.difference_update(ids)
    return bridges


class DeadIslandError(CaseError):
    """Island has no in-service generator and cannot be solved."""


def select_reference_bus(idx: LinkNetIndex, case: GridCase, island: int) -> int:
    """Reference bus for an island: generator bus maximizing total p_max,
    ties broken by node degree, then by lowest id."""
    capability: dict[int, float] = {}
    for g in case.generators:
        if g.status and idx.island_of.get(g.bus) == island:
            capability[g.bus] = capability.get(g.bus, 0.0) + g.p_max
    if not capability:
        raise DeadIslandError(f"island {island} has no in-service generator")
    return min(capability, key=lambda b: (-capability[b], -idx.degree(b), b))
