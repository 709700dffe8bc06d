"""Overlapping Schwarz iteration with Jacobi (snapshot) updates.

One outer step, for every subdomain k against the same snapshot ``z``:

1. build the data of P_{W_k}: ``d_{W_k} - H_{-W_k} z_{N_V(W_k)}``;
2. solve it, keep the part on V_k;
3. scatter the V_k pieces into the next iterate.

Convergence is monitored through the mismatch between each subproblem's
solution on the neighbours of V_k and the assembled iterate there.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .graph import OverlapPartition, coupled_complement, overlap_size
from .kernel import SolverConfig, SolveReport, Status, solve
from .model import (
    BlockQP,
    CompactQP,
    Layout,
    PrimalDualPoint,
    assemble,
    coupling_block,
    coupling_matrix,
)

log = logging.getLogger(__name__)


class SchwarzStatus(str, Enum):
    CONVERGED = "converged"
    MAX_OUTER = "max-outer"
    DIVERGED = "diverged"


class SubdomainInfeasibleError(RuntimeError):
    def __init__(self, k: int, status: Status):
        super().__init__(f"subproblem on subdomain {k} returned status {status.value}")
        self.k = k
        self.status = status


class CoverageError(ValueError):
    pass


@dataclass
class SchwarzConfig:
    omega: int = 1
    K: int = 4
    tol_pr: float = 1e-2
    tol_du: float = 1e2
    max_outer: int = 1000
    subsolver: SolverConfig = field(default_factory=SolverConfig)
    parallelism: int = 1
    warm_start: bool = True
    divergence_norm: float = 1e12
    divergence_patience: int = 50

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.tol_pr <= 0 or self.tol_du <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer < 0 or self.parallelism < 1:
            raise ValueError("max_outer must be >= 0 and parallelism >= 1")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["subsolver"] = asdict(self.subsolver)
        return d


@dataclass
class SubdomainRecord:
    k: int
    solve_time: float
    iterations: int
    status: str
    method: str


@dataclass
class IterRecord:
    iter: int
    objective: float
    eps_pr: float
    eps_du: float
    max_subsolve_time_s: float
    total_time_s: float
    subdomains: list[SubdomainRecord] = field(default_factory=list)


CSV_COLUMNS = ("iter", "objective", "eps_pr", "eps_du", "max_subsolve_time_s", "total_time_s")


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


@dataclass
class SchwarzTrace:
    records: list[IterRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path=None, timings: bool = True) -> str:
        """CSV text (written to ``path`` when given).

        ``timings=False`` leaves the two timing columns empty so that the
        file is a pure function of the inputs.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            t1 = _fmt(r.max_subsolve_time_s) if timings else ""
            t2 = _fmt(r.total_time_s) if timings else ""
            w.writerow([r.iter, _fmt(r.objective), _fmt(r.eps_pr), _fmt(r.eps_du), t1, t2])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None, timings: bool = True) -> str:
        rows = []
        for r in self.records:
            d = asdict(r)
            if not timings:
                d["max_subsolve_time_s"] = d["total_time_s"] = None
                for s in d["subdomains"]:
                    s["solve_time"] = None
            for key in ("eps_pr", "eps_du"):
                if isinstance(d[key], float) and math.isnan(d[key]):
                    d[key] = None
            rows.append(d)
        text = json.dumps({"iterations": self.iterations, "records": rows}, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass
class SchwarzResult:
    point: PrimalDualPoint
    trace: SchwarzTrace
    status: SchwarzStatus
    history: list[PrimalDualPoint] | None = None
    # per iteration, the subdomain solutions on W_k (kept with the history)
    subdomain_history: list[list[PrimalDualPoint]] | None = None

    def __iter__(self):
        yield self.point
        yield self.trace
        yield self.status


class _Subdomain:
    """Precomputed pieces of one expanded subdomain."""

    def __init__(self, bqp: BlockQP, LV: Layout, V, k: int, Vk, Wk):
        self.k = k
        self.qp: CompactQP = assemble(bqp, Wk)
        LW, LB, H = coupling_matrix(bqp, V, Wk)
        self.LW = LW
        self.H = H
        self.d0 = self.qp.stacked_data()
        self.bnd_idx = LB.gather(LV)
        LVk = Layout.of(bqp.graph, Vk)
        self.own_in_W = LVk.gather(LW)
        self.own_in_V = LVk.gather(LV)
        nbr = coupled_complement(bqp.graph, V, Vk)
        self.nbr = nbr
        inside = [j for j in nbr if j in LW.pos]
        self.nbr_covered = len(inside) == len(nbr)
        LN = Layout.of(bqp.graph, inside)
        self.nbr_in_W = LN.gather(LW)
        self.nbr_in_V = LN.gather(LV)
        self.nbr_primal = LN.primal_mask
        LA = Layout.of(bqp.graph, nbr)
        self.nbr_all_in_V = LA.gather(LV)
        self.nbr_all_primal = LA.primal_mask

    def data(self, z: np.ndarray) -> np.ndarray:
        if self.H.shape[1] == 0:
            return self.d0
        return self.d0 - self.H @ z[self.bnd_idx]

    def solve(self, z: np.ndarray, cfg: SolverConfig, warm: PrimalDualPoint | None) -> SolveReport:
        return solve(self.qp.with_stacked_data(self.data(z)), cfg, warm)


def residual_E(bqp: BlockQP, V, part: OverlapPartition, z_prev: PrimalDualPoint, subdomain_solutions: Sequence[PrimalDualPoint]):
    """E_k = (solution of subproblem k) - (assembled iterate) on N_V(V_k).

    ``z_prev`` is the assembled iterate produced from ``subdomain_solutions``.
    Returns one PrimalDualPoint per subdomain (empty when N_V(V_k) is empty).
    """
    out = []
    for k, (Vk, sol) in enumerate(zip(part.original, subdomain_solutions)):
        nbr = coupled_complement(bqp.graph, V, Vk)
        missing = [j for j in nbr if j not in sol.layout.pos]
        if missing:
            raise CoverageError(f"subdomain {k} solution does not cover neighbours {missing}")
        LN = Layout.of(bqp.graph, nbr)
        out.append(PrimalDualPoint(LN, sol.vec[LN.gather(sol.layout)] - z_prev.vec[LN.gather(z_prev.layout)]))
    return out


def errors_from_E(E: Sequence[PrimalDualPoint]) -> tuple[float, float]:
    """(eps_pr, eps_du): max over k of the sup-norm of the primal / dual entries of E_k."""
    pr = du = 0.0
    for e in E:
        m = e.layout.primal_mask
        if np.any(m):
            pr = max(pr, float(np.max(np.abs(e.vec[m]))))
        if np.any(~m):
            du = max(du, float(np.max(np.abs(e.vec[~m]))))
    return pr, du


def coupling_strength(bqp: BlockQP, V, U) -> float:
    """Sum of spectral norms of the blocks H_ij, i in U, j in N_V(U)."""
    Uset = set(U)
    bnd = set(coupled_complement(bqp.graph, V, U))
    total = 0.0
    for i in sorted(Uset):
        for j in bqp.graph.adj[i]:
            if j in bnd:
                total += float(np.linalg.norm(coupling_block(bqp, i, j), 2))
    return total


def rate_bound(bqp: BlockQP, V, part: OverlapPartition, sigma_lo: float, sigma_hi: float, omega: float | None = None) -> float:
    """Contraction factor R * Gamma * rho**ceil((omega - 1) / 2).

    R is the largest coupling strength over the realized expanded
    subdomains and ``omega`` defaults to the realized overlap size.
    """
    if not (sigma_lo > 0 and sigma_hi >= sigma_lo):
        raise ValueError("need 0 < sigma_lo <= sigma_hi")
    R = max((coupling_strength(bqp, V, Wk) for Wk in part.expanded), default=0.0)
    if R == 0.0:
        return 0.0
    if omega is None:
        omega = overlap_size(bqp.graph, V, part)
    if math.isinf(omega):
        return 0.0
    Gamma = sigma_hi / sigma_lo**2
    rho = (sigma_hi**2 - sigma_lo**2) / (sigma_hi**2 + sigma_lo**2)
    p = max(0, math.ceil((omega - 1) / 2))
    return R * Gamma * rho**p


def schwarz_solve(
    bqp: BlockQP,
    V,
    part: OverlapPartition,
    cfg: SchwarzConfig,
    z0: PrimalDualPoint | None = None,
    callback: Callable[[int, PrimalDualPoint, IterRecord], None] | None = None,
    keep_history: bool = False,
) -> SchwarzResult:
    """Run the Jacobi Schwarz iteration from ``z0`` (zero by default).

    Stops when ``eps_pr < tol_pr`` and ``eps_du < tol_du``. Results do not
    depend on ``cfg.parallelism``: every subproblem reads the same snapshot
    and results are reduced in subdomain order. ``keep_history`` keeps
    every iterate along with the subdomain solutions that produced it.
    """
    t_start = time.perf_counter()
    V = tuple(sorted(V))
    part.validate(V)
    if part.omega == 0 and part.K > 1:
        log.warning("omega = 0: no overlap, outside the convergence guarantee")
    LV = Layout.of(bqp.graph, V)
    z = z0.copy() if z0 is not None else PrimalDualPoint(LV)
    if z.layout != LV:
        raise ValueError("z0 must live on V")
    full = assemble(bqp, V)
    subs = [_Subdomain(bqp, LV, V, k, Vk, Wk) for k, (Vk, Wk) in enumerate(zip(part.original, part.expanded))]

    trace = SchwarzTrace([IterRecord(0, full.objective(z.compact()[0]), math.nan, math.nan, 0.0, time.perf_counter() - t_start)])
    history = [z.copy()] if keep_history else None
    sub_history = [] if keep_history else None
    warm: list[PrimalDualPoint | None] = [None] * len(subs)
    status = SchwarzStatus.MAX_OUTER
    best = (math.inf, z.copy())
    grow = 0
    prev_pr = math.inf
    pool = ThreadPoolExecutor(cfg.parallelism) if cfg.parallelism > 1 and len(subs) > 1 else None
    try:
        for ell in range(1, cfg.max_outer + 1):
            snap = z.vec.copy()

            def work(k, snap=snap):
                return subs[k].solve(snap, cfg.subsolver, warm[k] if cfg.warm_start else None)

            reports = list(pool.map(work, range(len(subs)))) if pool else [work(k) for k in range(len(subs))]

            new = np.empty_like(snap)
            recs = []
            for s, rep in zip(subs, reports):
                if rep.status in (Status.INFEASIBLE, Status.UNBOUNDED):
                    raise SubdomainInfeasibleError(s.k, rep.status)
                new[s.own_in_V] = rep.point.vec[s.own_in_W]
                warm[s.k] = rep.point
                recs.append(SubdomainRecord(s.k, rep.wall_time, rep.iterations, rep.status.value, rep.method))

            eps_pr = eps_du = 0.0
            for s, rep in zip(subs, reports):
                if s.nbr_covered:
                    e = rep.point.vec[s.nbr_in_W] - new[s.nbr_in_V]
                    m = s.nbr_primal
                else:  # omega = 0: neighbours lie outside W_k, use the iterate change there
                    e = new[s.nbr_all_in_V] - snap[s.nbr_all_in_V]
                    m = s.nbr_all_primal
                eps_pr = max(eps_pr, float(np.max(np.abs(e[m]), initial=0.0)))
                eps_du = max(eps_du, float(np.max(np.abs(e[~m]), initial=0.0)))

            z = PrimalDualPoint(LV, new)
            rec = IterRecord(
                ell,
                full.objective(z.compact()[0]),
                eps_pr,
                eps_du,
                max((r.solve_time for r in recs), default=0.0),
                time.perf_counter() - t_start,
                recs,
            )
            trace.records.append(rec)
            if keep_history:
                history.append(z.copy())
                sub_history.append([rep.point for rep in reports])
            if callback is not None:
                callback(ell, z, rec)

            score = max(eps_pr / cfg.tol_pr, eps_du / cfg.tol_du)
            if score < best[0]:
                best = (score, z.copy())
            if eps_pr < cfg.tol_pr and eps_du < cfg.tol_du:
                status = SchwarzStatus.CONVERGED
                break
            grow = grow + 1 if eps_pr > prev_pr else 0
            prev_pr = eps_pr
            if not np.all(np.isfinite(new)) or np.max(np.abs(new), initial=0.0) > cfg.divergence_norm or grow >= cfg.divergence_patience:
                status = SchwarzStatus.DIVERGED
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if status is SchwarzStatus.MAX_OUTER and cfg.max_outer > 0:
        z = best[1]
    return SchwarzResult(z, trace, status, history, sub_history)
