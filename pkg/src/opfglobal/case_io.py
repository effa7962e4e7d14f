"""Network case ingestion: MATPOWER ``.m`` files and a native JSON schema.

Every quantity in a :class:`NetworkCase` is stored in per-unit on
``base_mva``. Generator costs keep only the linear coefficient and are
expressed per unit of active power (``$/MWh * base_mva``), so that the
objective ``sum(cost_linear * p_gen_pu)`` is in the original currency/hour.
"""

from __future__ import annotations

import cmath
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InconsistentCase, MalformedCase

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS = 0, 1, 2, 3, 4, 5
VMAX, VMIN = 11, 12
GEN_BUS, QMAX, QMIN, GEN_STATUS, PMAX, PMIN = 0, 3, 4, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10
ISOLATED_BUS = 4


@dataclass(frozen=True)
class BusRecord:
    id: int
    v_min: float
    v_max: float
    p_load: float = 0.0
    q_load: float = 0.0
    # fixed shunt admittance to ground (Gs + jBs) / base_mva
    shunt: complex = 0j


@dataclass(frozen=True)
class GenRecord:
    bus_id: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_linear: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    series_admittance: complex
    shunt_charging: complex = 0j  # total line charging, split half per end
    tap_ratio: complex = 1 + 0j


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[BusRecord, ...]
    generators: tuple[GenRecord, ...]
    branches: tuple[BranchRecord, ...]
    base_mva: float = 100.0
    name: str = field(default="case", compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        """Map external bus id to its position in :attr:`buses`."""
        return {b.id: k for k, b in enumerate(self.buses)}

    def generator_at(self) -> dict[int, GenRecord]:
        return {g.bus_id: g for g in self.generators}


def validate(case: NetworkCase) -> NetworkCase:
    """Check the structural invariants of ``case`` and return it unchanged."""
    if not case.buses:
        raise InconsistentCase("case has no buses")
    if not (case.base_mva > 0 and math.isfinite(case.base_mva)):
        raise InconsistentCase(f"base_mva must be positive, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise InconsistentCase("duplicate bus ids")
    known = set(ids)
    for b in case.buses:
        if not (0 <= b.v_min <= b.v_max):
            raise InconsistentCase(
                f"bus {b.id}: voltage bounds must satisfy 0 <= v_min <= v_max "
                f"(got {b.v_min}, {b.v_max})")
    for g in case.generators:
        if g.bus_id not in known:
            raise InconsistentCase(f"generator references unknown bus {g.bus_id}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise InconsistentCase(f"generator at bus {g.bus_id}: inverted bounds")
    for br in case.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise InconsistentCase(
                f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        if br.from_bus == br.to_bus:
            raise InconsistentCase(f"branch loops on bus {br.from_bus}")
        if not cmath.isfinite(br.series_admittance):
            raise InconsistentCase(
                f"branch {br.from_bus}-{br.to_bus}: non-finite series admittance")
        if br.tap_ratio == 0:
            raise InconsistentCase(f"branch {br.from_bus}-{br.to_bus}: zero tap")
    return case


def aggregate_generators(gens: Iterable[GenRecord]) -> tuple[GenRecord, ...]:
    """Merge generators sharing a bus: bounds add up, cheapest linear cost wins."""
    merged: dict[int, GenRecord] = {}
    for g in gens:
        prev = merged.get(g.bus_id)
        if prev is None:
            merged[g.bus_id] = g
            continue
        merged[g.bus_id] = GenRecord(
            bus_id=g.bus_id,
            p_min=prev.p_min + g.p_min,
            p_max=prev.p_max + g.p_max,
            q_min=prev.q_min + g.q_min,
            q_max=prev.q_max + g.q_max,
            cost_linear=min(prev.cost_linear, g.cost_linear),
        )
    return tuple(merged.values())


# ---------------------------------------------------------------------------
# MATPOWER

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eEinfINFaN]+)\s*;")
_NAME_RE = re.compile(r"^\s*function\s+mpc\s*=\s*(\w+)", re.M)


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_table(name: str, body: str) -> np.ndarray:
    rows = []
    body = body.replace("...", " ")
    for chunk in re.split(r"[;\n]", body):
        chunk = chunk.replace(",", " ").strip()
        if not chunk:
            continue
        try:
            rows.append([float(tok) for tok in chunk.split()])
        except ValueError as exc:
            raise MalformedCase(f"mpc.{name}: cannot parse row {chunk!r}") from exc
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MalformedCase(f"mpc.{name}: ragged table")
    return np.array(rows, dtype=float)


def read_matpower_tables(text: str) -> dict[str, object]:
    """Extract the numeric tables and scalars of a MATPOWER version-2 case."""
    clean = _strip_comments(text)
    out: dict[str, object] = {}
    for m in _SCALAR_RE.finditer(clean):
        try:
            out[m.group(1)] = float(m.group(2))
        except ValueError as exc:
            raise MalformedCase(f"mpc.{m.group(1)}: bad scalar") from exc
    for m in _TABLE_RE.finditer(clean):
        out[m.group(1)] = _parse_table(m.group(1), m.group(2))
    name = _NAME_RE.search(clean)
    out["name"] = name.group(1) if name else "case"
    return out


def _linear_cost(row: np.ndarray) -> tuple[float, bool]:
    """Linear coefficient of a polynomial gencost row and whether other terms were dropped."""
    model = int(row[0])
    if model != 2:
        raise MalformedCase("only polynomial (model 2) generator costs are supported")
    ncost = int(row[3])
    coeffs = row[4:4 + ncost]
    if len(coeffs) < ncost:
        raise MalformedCase("gencost row shorter than its NCOST field")
    if ncost == 0:
        return 0.0, False
    linear = float(coeffs[-2]) if ncost >= 2 else 0.0
    others = np.delete(coeffs, ncost - 2) if ncost >= 2 else coeffs
    return linear, bool(np.any(others != 0))


def parse_matpower(text: str) -> NetworkCase:
    """Parse the text of a MATPOWER case file into a validated NetworkCase."""
    tables = read_matpower_tables(text)
    for key in ("baseMVA", "bus", "gen", "branch", "gencost"):
        if key not in tables:
            raise MalformedCase(f"missing mpc.{key}")
    base = float(tables["baseMVA"])
    bus, gen, branch, gencost = (tables[k] for k in ("bus", "gen", "branch", "gencost"))
    if bus.size == 0:
        raise InconsistentCase("case has no buses")
    if bus.shape[1] < 13 or (gen.size and gen.shape[1] < 10) \
            or (branch.size and branch.shape[1] < 11):
        raise MalformedCase("table has too few columns")
    if gen.size and gencost.shape[0] < gen.shape[0]:
        raise MalformedCase("fewer gencost rows than generators")

    buses = []
    isolated = set()
    for row in bus:
        if int(row[BUS_TYPE]) == ISOLATED_BUS:
            isolated.add(int(row[BUS_I]))
            continue
        buses.append(BusRecord(
            id=int(row[BUS_I]),
            v_min=float(row[VMIN]),
            v_max=float(row[VMAX]),
            p_load=float(row[PD] / base),
            q_load=float(row[QD] / base),
            shunt=complex(row[GS], row[BS]) / base,
        ))

    gens = []
    dropped_terms = False
    for k, row in enumerate(gen):
        if row[GEN_STATUS] <= 0 or int(row[GEN_BUS]) in isolated:
            continue
        c1, extra = _linear_cost(gencost[k])
        dropped_terms |= extra
        gens.append(GenRecord(
            bus_id=int(row[GEN_BUS]),
            p_min=float(row[PMIN] / base),
            p_max=float(row[PMAX] / base),
            q_min=float(row[QMIN] / base),
            q_max=float(row[QMAX] / base),
            cost_linear=float(c1 * base),
        ))
    if dropped_terms:
        warnings.warn("constant and quadratic generator cost terms ignored",
                      stacklevel=2)

    branches = []
    for row in branch:
        if row[BR_STATUS] <= 0:
            continue
        f, t = int(row[F_BUS]), int(row[T_BUS])
        if f in isolated or t in isolated:
            continue
        z = complex(row[BR_R], row[BR_X])
        if z == 0:
            raise InconsistentCase(f"branch {f}-{t} has zero impedance")
        ratio = row[TAP] if row[TAP] != 0 else 1.0
        tap = ratio * cmath.exp(1j * math.radians(row[SHIFT]))
        branches.append(BranchRecord(
            from_bus=f, to_bus=t, series_admittance=1 / z,
            shunt_charging=complex(0.0, row[BR_B]), tap_ratio=tap))

    case = NetworkCase(
        buses=tuple(buses),
        generators=aggregate_generators(gens),
        branches=tuple(branches),
        base_mva=base,
        name=str(tables["name"]),
    )
    return validate(case)


# ---------------------------------------------------------------------------
# native JSON

def _cplx(v, what: str) -> complex:
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    raise MalformedCase(f"{what}: expected a number or a [re, im] pair")


def parse_native(text: str) -> NetworkCase:
    """Parse the native JSON schema (see :func:`to_native`)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCase(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedCase("top level must be an object")
    try:
        buses = tuple(
            BusRecord(id=int(b["id"]), v_min=float(b["v_min"]), v_max=float(b["v_max"]),
                      p_load=float(b.get("p_load", 0.0)), q_load=float(b.get("q_load", 0.0)),
                      shunt=_cplx(b.get("shunt", 0.0), "shunt"))
            for b in doc["buses"])
        gens = [
            GenRecord(bus_id=int(g["bus_id"]), p_min=float(g["p_min"]), p_max=float(g["p_max"]),
                      q_min=float(g["q_min"]), q_max=float(g["q_max"]),
                      cost_linear=float(g.get("cost_linear", 0.0)))
            for g in doc.get("generators", [])]
        branches = tuple(
            BranchRecord(from_bus=int(br["from_bus"]), to_bus=int(br["to_bus"]),
                         series_admittance=_cplx(br["series_admittance"], "series_admittance"),
                         shunt_charging=_cplx(br.get("shunt_charging", 0.0), "shunt_charging"),
                         tap_ratio=_cplx(br.get("tap_ratio", 1.0), "tap_ratio"))
            for br in doc.get("branches", []))
        base = float(doc["base_mva"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCase(f"native case missing or bad field: {exc}") from exc
    case = NetworkCase(buses=buses, generators=aggregate_generators(gens),
                       branches=branches, base_mva=base, name=str(doc.get("name", "case")))
    return validate(case)


def to_native(case: NetworkCase) -> str:
    """Serialize ``case`` to the native JSON schema (exact float round-trip)."""
    def pair(z: complex) -> list[float]:
        return [z.real, z.imag]

    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [dict(id=b.id, v_min=b.v_min, v_max=b.v_max, p_load=b.p_load,
                       q_load=b.q_load, shunt=pair(b.shunt)) for b in case.buses],
        "generators": [dict(bus_id=g.bus_id, p_min=g.p_min, p_max=g.p_max, q_min=g.q_min,
                            q_max=g.q_max, cost_linear=g.cost_linear)
                       for g in case.generators],
        "branches": [dict(from_bus=br.from_bus, to_bus=br.to_bus,
                          series_admittance=pair(br.series_admittance),
                          shunt_charging=pair(br.shunt_charging),
                          tap_ratio=pair(br.tap_ratio)) for br in case.branches],
    }
    return json.dumps(doc, indent=1)


def load_case(path: str | Path, fmt: str | None = None) -> NetworkCase:
    """Read a case file, guessing the format from the suffix when ``fmt`` is None."""
    path = Path(path)
    text = path.read_text()
    if fmt is None:
        fmt = "native" if path.suffix.lower() == ".json" else "matpower"
    if fmt == "matpower":
        case = parse_matpower(text)
    elif fmt == "native":
        case = parse_native(text)
    else:
        raise ValueError(f"unknown case format {fmt!r}")
    if case.name == "case":
        case = NetworkCase(case.buses, case.generators, case.branches,
                           case.base_mva, name=path.stem)
    return case


# ---------------------------------------------------------------------------

def build_bus_admittance(case: NetworkCase) -> np.ndarray:
    """Dense complex bus admittance matrix, rows/columns in bus-table order.

    Standard pi-model with the tap on the from side:
    ``Yff = (ys + jb/2)/|t|^2``, ``Yft = -ys/conj(t)``, ``Ytf = -ys/t``,
    ``Ytt = ys + jb/2``.
    """
    idx = case.bus_index()
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys, tap = br.series_admittance, br.tap_ratio
        ytt = ys + br.shunt_charging / 2
        Y[f, f] += ytt / (tap * tap.conjugate())
        Y[f, t] += -ys / tap.conjugate()
        Y[t, f] += -ys / tap
        Y[t, t] += ytt
    for k, b in enumerate(case.buses):
        Y[k, k] += b.shunt
    return Y
