"""Regularized DC optimal power flow as a graph-structured QP.

Per bus ``i`` the primal block is ``(theta_i, P_q for q at i, s_i)`` where
``s_i`` is the optional artificial storage injection. Equality rows are the
power balance (plus ``theta_i = theta_ref`` at reference buses); inequality
rows are generator bounds and branch angle-difference limits, the latter
attached to the lower-indexed endpoint. All quantities inside the QP are in
per unit on ``baseMVA``; :class:`PowerCase` keeps MATPOWER's MW units.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import NodeDims, NodeGraph
from .model import BlockQP, PrimalDualPoint

log = logging.getLogger(__name__)


class CaseParseError(ValueError):
    pass


class MissingTableError(CaseParseError):
    pass


class InconsistentReferenceError(ValueError):
    pass


@dataclass
class Bus:
    id: int
    P_load: float  # MW
    is_ref: bool = False
    theta_ref: float = 0.0  # rad


@dataclass
class Generator:
    bus: int
    c1: float  # $/MW
    c2: float  # $/MW^2
    Pmin: float  # MW
    Pmax: float  # MW


@dataclass
class Branch:
    f: int
    t: int
    B: float  # p.u. susceptance
    angmin: float = -math.inf  # rad, bound on theta_f - theta_t
    angmax: float = math.inf


@dataclass
class PowerCase:
    baseMVA: float
    buses: list[Bus]
    generators: list[Generator]
    branches: list[Branch]
    name: str = ""

    def validate(self) -> None:
        ids = {b.id for b in self.buses}
        if len(ids) != len(self.buses):
            raise CaseParseError("duplicate bus ids")
        if not any(b.is_ref for b in self.buses):
            raise InconsistentReferenceError("case has no reference bus")
        for g in self.generators:
            if g.bus not in ids:
                raise CaseParseError(f"generator at unknown bus {g.bus}")
            if g.Pmin > g.Pmax:
                raise CaseParseError(f"generator at bus {g.bus} has Pmin > Pmax")
        for br in self.branches:
            if br.f not in ids or br.t not in ids:
                raise CaseParseError(f"branch {br.f}-{br.t} references an unknown bus")
            if not math.isfinite(br.B):
                raise CaseParseError(f"branch {br.f}-{br.t} has non-finite susceptance")

    @property
    def total_load(self) -> float:
        return sum(b.P_load for b in self.buses)


# -- parsing ------------------------------------------------------------------

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)")


def _table_rows(text: str, name: str, required: bool = True):
    for m in _TABLE_RE.finditer(text):
        if m.group(1) != name:
            continue
        body_start = m.start(2)
        line0 = text.count("\n", 0, body_start) + 1
        rows = []
        for off, raw in enumerate(m.group(2).split("\n")):
            line = raw.split("%", 1)[0]
            for chunk in line.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                try:
                    vals = [float(v) for v in chunk.replace(",", " ").split()]
                except ValueError as exc:
                    raise CaseParseError(f"{name} table, line {line0 + off}: cannot parse {chunk!r}") from exc
                rows.append((line0 + off, vals))
        return rows
    if required:
        raise MissingTableError(f"missing mpc.{name} table")
    return None


def parse_case(text: str, name: str = "") -> PowerCase:
    """Read MATPOWER ``.m`` case text (baseMVA, bus, gen, branch, gencost)."""
    m = _SCALAR_RE.search(text)
    if not m:
        raise MissingTableError("missing mpc.baseMVA")
    base = float(m.group(1))
    bus_rows = _table_rows(text, "bus")
    gen_rows = _table_rows(text, "gen")
    br_rows = _table_rows(text, "branch")
    cost_rows = _table_rows(text, "gencost")

    buses = []
    for k, (line, r) in enumerate(bus_rows, 1):
        if len(r) < 9:
            raise CaseParseError(f"bus row {k} (line {line}): expected at least 9 columns")
        if len(r) > 4 and (r[4] != 0 or r[5] != 0):
            log.warning("bus %d: shunt terms ignored", int(r[0]))
        buses.append(Bus(int(r[0]), r[2], int(r[1]) == 3, math.radians(r[8])))

    if len(cost_rows) < len(gen_rows):
        raise CaseParseError(f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")
    gens = []
    for k, ((line, r), (cline, c)) in enumerate(zip(gen_rows, cost_rows), 1):
        if len(r) < 10:
            raise CaseParseError(f"gen row {k} (line {line}): expected at least 10 columns")
        if len(c) < 4:
            raise CaseParseError(f"gencost row {k} (line {cline}): expected at least 4 columns")
        model, ncost = int(c[0]), int(c[3])
        if model != 2:
            raise CaseParseError(f"gencost row {k} (line {cline}): only polynomial costs (model 2) are supported")
        if not 1 <= ncost <= 3:
            raise CaseParseError(f"gencost row {k} (line {cline}): polynomial degree above 2 is not supported")
        if len(c) != 4 + ncost:
            raise CaseParseError(f"gencost row {k} (line {cline}): expected {4 + ncost} columns, got {len(c)}")
        coef = list(c[4:])[::-1] + [0.0] * 3  # c0, c1, c2
        if len(r) > 7 and r[7] <= 0:
            continue
        gens.append(Generator(int(r[0]), coef[1], coef[2], r[9], r[8]))

    branches = []
    for k, (line, r) in enumerate(br_rows, 1):
        if len(r) < 4:
            raise CaseParseError(f"branch row {k} (line {line}): expected at least 4 columns")
        if len(r) > 10 and r[10] <= 0:
            continue
        x = r[3]
        tap = r[8] if len(r) > 8 and r[8] != 0 else 1.0
        if len(r) > 9 and r[9] != 0:
            log.warning("branch row %d: phase shift ignored", k)
        if x == 0:
            log.warning("branch row %d: zero reactance, branch skipped", k)
            continue
        angmin, angmax = -math.inf, math.inf
        if len(r) > 12 and not (r[11] == 0 and r[12] == 0):
            if r[11] > -360:
                angmin = math.radians(r[11])
            if r[12] < 360:
                angmax = math.radians(r[12])
        branches.append(Branch(int(r[0]), int(r[1]), 1.0 / (x * tap), angmin, angmax))

    case = PowerCase(base, buses, gens, branches, name)
    case.validate()
    return case


def load_case(path) -> PowerCase:
    from pathlib import Path

    p = Path(path)
    return parse_case(p.read_text(), p.stem)


def case_to_text(case: PowerCase) -> str:
    """MATPOWER text for a case (branch reactance written as 1/B)."""
    out = [f"function mpc = {case.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {case.baseMVA!r};", "mpc.bus = ["]
    for b in case.buses:
        out.append(f"\t{b.id}\t{3 if b.is_ref else 1}\t{b.P_load!r}\t0\t0\t0\t1\t1\t{math.degrees(b.theta_ref)!r}\t230\t1\t1.1\t0.9;")
    out += ["];", "mpc.gen = ["]
    for g in case.generators:
        out.append(f"\t{g.bus}\t0\t0\t0\t0\t1\t100\t1\t{g.Pmax!r}\t{g.Pmin!r};")
    out += ["];", "mpc.branch = ["]
    for br in case.branches:
        amin = math.degrees(br.angmin) if math.isfinite(br.angmin) else -360
        amax = math.degrees(br.angmax) if math.isfinite(br.angmax) else 360
        out.append(f"\t{br.f}\t{br.t}\t0\t{1.0 / br.B!r}\t0\t0\t0\t0\t0\t0\t1\t{amin!r}\t{amax!r};")
    out += ["];", "mpc.gencost = ["]
    for g in case.generators:
        out.append(f"\t2\t0\t0\t3\t{g.c2!r}\t{g.c1!r}\t0;")
    out += ["];", ""]
    return "\n".join(out)


# -- QP construction ------------------------------------------------------------


@dataclass
class OpfOptions:
    gamma: float = 1e5
    storage_cost: float = 1e4  # $/MW^2, i.e. same units as c2
    storage_enabled: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


@dataclass
class OpfModel:
    """A built OPF QP with the index maps needed to read results back."""

    case: PowerCase
    options: OpfOptions
    graph: NodeGraph
    bqp: BlockQP
    bus_index: dict[int, int]
    gen_slot: list[tuple[int, int]]  # (node, offset inside x_node) per generator
    storage: bool
    edges: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    def __iter__(self):
        yield self.graph
        yield self.bqp

    def theta(self, z: PrimalDualPoint) -> np.ndarray:
        return np.array([z.x(i)[0] for i in range(self.graph.n_nodes)])

    def dispatch_mw(self, z: PrimalDualPoint) -> np.ndarray:
        return np.array([z.x(i)[k] for i, k in self.gen_slot]) * self.case.baseMVA

    def storage_mw(self, z: PrimalDualPoint) -> np.ndarray:
        if not self.storage:
            return np.zeros(self.graph.n_nodes)
        return np.array([z.x(i)[-1] for i in range(self.graph.n_nodes)]) * self.case.baseMVA

    def balance_duals(self, z: PrimalDualPoint) -> np.ndarray:
        return np.array([z.lamE(i)[0] for i in range(self.graph.n_nodes)])

    def objective_dollars(self, z: PrimalDualPoint) -> float:
        """Generation cost + angle regularization (+ storage), straight from (theta, P, s)."""
        P = self.dispatch_mw(z)
        th = self.theta(z)
        cost = sum(g.c1 * p + g.c2 * p * p for g, p in zip(self.case.generators, P))
        cost += 0.5 * self.options.gamma * sum((th[i] - th[j]) ** 2 for i, j, *_ in self.edges)
        if self.storage:
            s = self.storage_mw(z)
            cost += 0.5 * self.options.storage_cost * float(s @ s)
        return float(cost)


def _aggregate_branches(case: PowerCase, index: dict[int, int]):
    agg: dict[tuple[int, int], list] = {}
    for br in case.branches:
        i, j = index[br.f], index[br.t]
        if i == j:
            continue
        lo, hi = br.angmin, br.angmax
        if i > j:  # orient as theta_i - theta_j with i < j
            i, j, lo, hi = j, i, -hi, -lo
        if br.B == 0:
            log.warning("zero susceptance on branch %d-%d", br.f, br.t)
        a = agg.setdefault((i, j), [0.0, -math.inf, math.inf])
        a[0] += br.B
        a[1] = max(a[1], lo)
        a[2] = min(a[2], hi)
    return [(i, j, B, lo, hi) for (i, j), (B, lo, hi) in sorted(agg.items())]


def build_qp(case: PowerCase, opts: OpfOptions | None = None) -> OpfModel:
    """Assemble the regularized DC OPF as a BlockQP over the bus graph."""
    opts = opts or OpfOptions()
    case.validate()
    base = case.baseMVA
    index = {b.id: k for k, b in enumerate(case.buses)}
    n = len(case.buses)
    edges = _aggregate_branches(case, index)
    nbr: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for i, j, B, _, _ in edges:
        nbr[i].append((j, B))
        nbr[j].append((i, B))

    gens_at: list[list[int]] = [[] for _ in range(n)]
    for q, g in enumerate(case.generators):
        gens_at[index[g.bus]].append(q)
    gen_slot = [None] * len(case.generators)
    for i in range(n):
        for k, q in enumerate(gens_at[i]):
            gen_slot[q] = (i, 1 + k)

    store = opts.storage_enabled
    ang_rows: list[list[tuple[int, float, float]]] = [[] for _ in range(n)]  # (j, sign, rhs)
    for i, j, _, lo, hi in edges:
        if math.isfinite(lo):
            ang_rows[i].append((j, 1.0, lo))
        if math.isfinite(hi):
            ang_rows[i].append((j, -1.0, -hi))

    dims = []
    for i, b in enumerate(case.buses):
        r = 1 + len(gens_at[i]) + (1 if store else 0)
        mE = 1 + (1 if b.is_ref else 0)
        mI = 2 * len(gens_at[i]) + len(ang_rows[i])
        dims.append(NodeDims(r, mE, mI))
    graph = NodeGraph(n, [(i, j) for i, j, *_ in edges], dims, [b.id for b in case.buses])

    Q, AE, AI, f, gE, gI = {}, {}, {}, {}, {}, {}
    for i, b in enumerate(case.buses):
        d = dims[i]
        Qii = np.zeros((d.r, d.r))
        Qii[0, 0] = opts.gamma * len(nbr[i])
        fi = np.zeros(d.r)
        for k, q in enumerate(gens_at[i]):
            g = case.generators[q]
            Qii[1 + k, 1 + k] = 2.0 * g.c2 * base * base
            fi[1 + k] = -g.c1 * base
        if store:
            Qii[-1, -1] = opts.storage_cost * base * base
        Q[(i, i)] = Qii
        f[i] = fi

        Aii = np.zeros((d.mE, d.r))
        Aii[0, 0] = -sum(B for _, B in nbr[i])
        Aii[0, 1: 1 + len(gens_at[i])] = 1.0
        if store:
            Aii[0, -1] = 1.0
        ge = [b.P_load / base]
        if b.is_ref:
            Aii[1, 0] = 1.0
            ge.append(b.theta_ref)
        AE[(i, i)] = Aii
        gE[i] = np.array(ge)
        for j, B in nbr[i]:
            blk = np.zeros((d.mE, dims[j].r))
            blk[0, 0] = B
            AE[(i, j)] = blk
            if i < j:
                qb = np.zeros((d.r, dims[j].r))
                qb[0, 0] = -opts.gamma
                Q[(i, j)] = qb

        Iii = np.zeros((d.mI, d.r))
        gi = np.zeros(d.mI)
        row = 0
        for k, q in enumerate(gens_at[i]):
            g = case.generators[q]
            Iii[row, 1 + k], gi[row] = 1.0, g.Pmin / base
            Iii[row + 1, 1 + k], gi[row + 1] = -1.0, -g.Pmax / base
            row += 2
        off: dict[int, np.ndarray] = {}
        for j, sign, rhs in ang_rows[i]:
            Iii[row, 0] = sign
            blk = off.setdefault(j, np.zeros((d.mI, dims[j].r)))
            blk[row, 0] = -sign
            gi[row] = rhs
            row += 1
        if d.mI:
            AI[(i, i)] = Iii
        for j, blk in off.items():
            AI[(i, j)] = blk
        gI[i] = gi

    bqp = BlockQP(graph, Q, AE, AI, f, gE, gI)
    return OpfModel(case, opts, graph, bqp, index, gen_slot, store, edges)


def add_storage(model: OpfModel, opts: OpfOptions | None = None) -> OpfModel:
    """Rebuild with one unbounded storage injection per bus.

    The storage variable enters the bus balance with coefficient 1 and the
    objective with ``storage_cost/2 * s^2``, so every balance row can be met
    whatever the neighbouring angles are.
    """
    opts = replace(opts or model.options, storage_enabled=True)
    return build_qp(model.case, opts)


# -- synthetic grids ----------------------------------------------------------------


def synthetic_case(n_bus: int = 150, seed: int = 0, name: str | None = None, angle_limit_deg: float | None = 60.0) -> PowerCase:
    """Seeded meshed transmission-like grid.

    Buses are random points in the unit square joined by a minimum spanning
    tree plus short extra links (about 1.4 branches per bus). About a quarter
    of the buses host generators whose capacity is 1.6x the total load.
    Every branch gets the angle-difference limit ``angle_limit_deg`` (none
    when ``None``).
    """
    rng = np.random.default_rng(seed)
    pts = rng.random((n_bus, 2))
    D = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    # Prim's MST
    in_tree = np.zeros(n_bus, dtype=bool)
    in_tree[0] = True
    best = D[0].copy()
    parent = np.zeros(n_bus, dtype=int)
    links = set()
    for _ in range(n_bus - 1):
        cand = np.where(in_tree, np.inf, best)
        v = int(np.argmin(cand))
        links.add((min(v, parent[v]), max(v, parent[v])))
        in_tree[v] = True
        upd = D[v] < best
        best = np.where(upd, D[v], best)
        parent = np.where(upd, v, parent)
    extra = int(0.4 * n_bus)
    order = np.argsort(D, axis=1)
    while extra > 0:
        i = int(rng.integers(n_bus))
        j = int(order[i, int(rng.integers(2, 5))])
        e = (min(i, j), max(i, j))
        if e not in links:
            links.add(e)
            extra -= 1

    loads = np.where(rng.random(n_bus) < 0.6, rng.uniform(10, 120, n_bus), 0.0)
    buses = [Bus(k + 1, round(float(loads[k]), 2), k == 0, 0.0) for k in range(n_bus)]
    n_gen = max(1, n_bus // 4)
    gen_buses = sorted(set(rng.choice(n_bus, n_gen, replace=False).tolist()) | {0})
    cap = 1.6 * loads.sum() / len(gen_buses)
    gens = []
    for k in gen_buses:
        pmax = round(float(cap * rng.uniform(0.6, 1.4)), 2)
        gens.append(Generator(k + 1, round(float(rng.uniform(10, 40)), 3), round(float(rng.uniform(0.002, 0.05)), 4), 0.0, pmax))
    branches = []
    for i, j in sorted(links):
        x = round(float(0.02 + 0.3 * D[i, j] + rng.uniform(0, 0.02)), 4)
        lim = math.radians(angle_limit_deg) if angle_limit_deg is not None else math.inf
        branches.append(Branch(i + 1, j + 1, 1.0 / x, -lim, lim))
    return PowerCase(100.0, buses, gens, branches, name or f"synthetic{n_bus}_s{seed}")
