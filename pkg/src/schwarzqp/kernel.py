"""Convex QP kernel for :class:`~schwarzqp.model.CompactQP` instances.

The solver returns crisp primal-dual points: an interior-point phase
identifies the active inequality set, then an active-set phase refactors the
equality-constrained KKT system on that working set and repairs it until the
full KKT conditions hold. A warm start supplies the working set directly and
usually skips the interior-point phase.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import CompactQP, KKTResidual, PrimalDualPoint, compact_residual


class SingularKKTError(np.linalg.LinAlgError):
    """The saddle-point system is singular (LICQ or SOSC fails on the working set)."""


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max-iter"


@dataclass
class SolverConfig:
    tol_kkt: float = 1e-9
    max_iter: int = 200
    regularization_floor: float = 1e-12
    polish_rounds: int = 30

    def __post_init__(self):
        if not self.tol_kkt > 0:
            raise ValueError("tol_kkt must be positive")


@dataclass
class SolveReport:
    point: PrimalDualPoint
    status: Status
    kkt: KKTResidual
    iterations: int
    wall_time: float
    active: tuple[int, ...] = ()
    method: str = ""
    regularization: float = 0.0
    objective: float = float("nan")
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def to_dict(self, include_point: bool = False) -> dict:
        out = {
            "status": self.status.value,
            "kkt": self.kkt._asdict(),
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "active": list(self.active),
            "method": self.method,
            "regularization": self.regularization,
            "objective": self.objective,
        }
        if include_point:
            out["point"] = self.point.to_dict()
        return out


def _is_sparse(M) -> bool:
    return sp.issparse(M)


RCOND_MIN = 1e-14


def _equilibrate(K, sweeps: int = 4) -> np.ndarray:
    """Symmetric Ruiz scaling vector ``d`` so that ``diag(d) K diag(d)`` has rows of max-norm ~1."""
    d = np.ones(K.shape[0])
    A = abs(K).tocsr() if _is_sparse(K) else np.abs(K)
    for _ in range(sweeps):
        if _is_sparse(A):
            rmax = np.asarray((sp.diags(d) @ A @ sp.diags(d)).max(axis=1).todense()).ravel()
        else:
            rmax = (A * d[:, None] * d[None, :]).max(axis=1, initial=0.0)
        rmax[rmax == 0] = 1.0
        d /= np.sqrt(rmax)
    return d


def _check(Ks, x, rhs) -> None:
    if not np.all(np.isfinite(x)):
        raise SingularKKTError("non-finite solution")
    if rhs.size == 0:
        return
    res = np.max(np.abs(Ks @ x - rhs))
    scale = 1.0 + np.max(np.abs(rhs)) + np.max(np.abs(x))
    if res > 1e-8 * scale:
        raise SingularKKTError("inaccurate factorization")


def _solve_dense_sym(K: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Equilibrated LU solve with one refinement step.

    Badly scaled but nonsingular systems (cost coefficients spanning many
    orders of magnitude) are accepted; singularity is judged on the scaled
    matrix through its reciprocal condition estimate.
    """
    if K.shape[0] == 0:
        return np.zeros(0)
    d = _equilibrate(K)
    Ks = K * d[:, None] * d[None, :]
    rs = rhs * d
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        try:
            lu, piv = la.lu_factor(Ks, check_finite=False)
        except ValueError as exc:
            raise SingularKKTError(str(exc)) from exc
    if not np.all(np.isfinite(lu)) or np.any(np.diag(lu) == 0):
        raise SingularKKTError("singular factor")
    rcond, _ = la.lapack.dgecon(lu, np.abs(Ks).sum(axis=0).max(), norm="1")
    if not rcond > RCOND_MIN:
        raise SingularKKTError(f"singular to working precision (rcond={rcond:.3g})")
    x = la.lu_solve((lu, piv), rs, check_finite=False)
    x += la.lu_solve((lu, piv), rs - Ks @ x, check_finite=False)
    _check(Ks, x, rs)
    return x * d


def _saddle(Q, A, reg_x: float = 0.0, reg_y: float = 0.0):
    n, m = Q.shape[0], A.shape[0]
    if _is_sparse(Q) or _is_sparse(A):
        Qs = sp.csc_matrix(Q) + reg_x * sp.eye(n, format="csc")
        if m == 0:
            return Qs.tocsc()
        As = sp.csc_matrix(A)
        Kyy = -reg_y * sp.eye(m, format="csc") if reg_y else sp.csc_matrix((m, m))
        return sp.bmat([[Qs, As.T], [As, Kyy]], format="csc")
    K = np.zeros((n + m, n + m))
    K[:n, :n] = Q
    if reg_x:
        K[:n, :n] += reg_x * np.eye(n)
    K[:n, n:] = A.T
    K[n:, :n] = A
    if reg_y:
        K[n:, n:] = -reg_y * np.eye(m)
    return K


def _solve_saddle(K, rhs):
    if not _is_sparse(K):
        return _solve_dense_sym(K, rhs)
    d = _equilibrate(K)
    D = sp.diags(d)
    Ks = sp.csc_matrix(D @ K @ D)
    rs = rhs * d
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            lu = spla.splu(Ks)
    except (RuntimeError, spla.MatrixRankWarning) as exc:
        raise SingularKKTError(str(exc)) from exc
    x = lu.solve(rs)
    x += lu.solve(rs - Ks @ x)
    _check(Ks, x, rs)
    return x * d


def solve_equality_kkt(Q, A, f, g) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``[[Q, A'], [A, 0]] [x; lam] = [f; g]``.

    Dense inputs use a symmetric indefinite (Bunch-Kaufman) factorization,
    sparse inputs a sparse LU. Raises :class:`SingularKKTError` when the
    system is singular to working precision.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    n = f.size
    if A is None:
        A = np.zeros((0, n))
    K = _saddle(Q, A)
    sol = _solve_saddle(K, np.concatenate([f, g]))
    return sol[:n], sol[n:]


def _rows(M, idx):
    if _is_sparse(M):
        return sp.csr_matrix(M)[idx]
    return M[idx]


def _vstack(a, b):
    if _is_sparse(a) or _is_sparse(b):
        return sp.vstack([sp.csr_matrix(a), sp.csr_matrix(b)], format="csr")
    return np.vstack([a, b])


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


class _Scales:
    """Magnitudes used to make KKT tolerances relative to the data."""

    def __init__(self, qp: CompactQP, x, lamE, lamI):
        self.dual = 1.0 + max(_inf(qp.f), _inf(qp.Q @ x), _inf(qp.AE.T @ lamE), _inf(qp.AI.T @ lamI))
        self.primal = 1.0 + max(_inf(qp.gE), _inf(qp.gI), _inf(qp.AE @ x), _inf(qp.AI @ x))
        self.lam = 1.0 + max(_inf(lamE), _inf(lamI))


def kkt_satisfied(qp: CompactQP, x, lamE, lamI, tol: float) -> tuple[bool, KKTResidual]:
    """KKT test with residuals measured relative to the data and iterate magnitudes."""
    r = compact_residual(qp, x, lamE, lamI)
    s = _Scales(qp, x, lamE, lamI)
    ok = (
        r.stationarity <= tol * s.dual
        and r.primal_eq <= tol * s.primal
        and r.primal_ineq_violation <= tol * s.primal
        and r.dual_sign_violation <= tol * s.lam
        and r.complementarity <= tol * s.primal * s.lam
    )
    return ok, r


def _solve_working_set(qp: CompactQP, W: np.ndarray):
    n_x, n_e, n_i = qp.shape
    AW = _rows(qp.AI, W)
    A = _vstack(qp.AE, AW)
    g = np.concatenate([qp.gE, qp.gI[W]])
    x, lam = solve_equality_kkt(qp.Q, A, qp.f, g)
    lamI = np.zeros(n_i)
    lamI[W] = -lam[n_e:]
    return x, lam[:n_e], lamI


def _polish(qp: CompactQP, W0, cfg: SolverConfig, rounds: int):
    """Repair a working set until the equality-KKT point is a KKT point.

    A few primal-dual active-set sweeps (all violations at once), then single
    changes by the lowest-index rule: drop the most negative multiplier,
    otherwise add the most violated constraint.
    """
    n_i = qp.shape[2]
    W = np.zeros(n_i, dtype=bool)
    W[np.asarray(W0, dtype=int)] = True
    seen = set()
    used = 0
    for it in range(rounds):
        used = it + 1
        key = W.tobytes()
        single = key in seen or it >= 4
        seen.add(key)
        idx = np.flatnonzero(W)
        try:
            x, lamE, lamI = _solve_working_set(qp, idx)
        except SingularKKTError:
            return None, used
        ok, _ = kkt_satisfied(qp, x, lamE, lamI, cfg.tol_kkt)
        if ok:
            return (x, lamE, lamI, idx), used
        s = _Scales(qp, x, lamE, lamI)
        slack = qp.AI @ x - qp.gI
        viol = (~W) & (slack < -cfg.tol_kkt * s.primal)
        neg = W & (lamI < -cfg.tol_kkt * s.lam)
        if not viol.any() and not neg.any():
            return None, used
        if single:
            if neg.any():
                cand = np.where(neg, lamI, np.inf)
                W[int(np.argmin(cand))] = False
            else:
                cand = np.where(viol, slack, np.inf)
                W[int(np.argmin(cand))] = True
        else:
            W = (W & ~neg) | viol
    return None, used


def _ipm(qp: CompactQP, x0, cfg: SolverConfig, tol: float):
    """Mehrotra predictor-corrector on the slack form ``AI x - s = gI, s >= 0``.

    Multipliers follow ``Q x - f - AE'y - AI'z = 0``; callers map ``lamE = -y``
    and ``lamI = z``. Returns (x, y, z, s, status, iterations, regularization).
    """
    Q, AE, AI, f, gE, gI = qp.Q, qp.AE, qp.AI, qp.f, qp.gE, qp.gI
    n, me, mi = qp.shape
    sparse = qp.is_sparse
    x = np.array(x0, dtype=float) if x0 is not None else np.zeros(n)
    y = np.zeros(me)
    s = np.maximum(np.abs(AI @ x - gI), 1.0)
    z = np.ones(mi)
    scale_d = 1.0 + _inf(f)
    scale_p = 1.0 + max(_inf(gE), _inf(gI))
    big = 1e12
    reg = 0.0
    stall = 0
    status = Status.MAX_ITER
    it = 0
    for it in range(1, cfg.max_iter + 1):
        rd = Q @ x - f - AE.T @ y - AI.T @ z
        rE = AE @ x - gE
        rI = AI @ x - s - gI
        mu = float(s @ z) / mi if mi else 0.0
        pres = max(_inf(rE), _inf(rI))
        dres = _inf(rd)
        if (
            dres <= tol * (scale_d + _inf(Q @ x))
            and pres <= tol * (scale_p + _inf(AI @ x))
            and mu <= tol * (1.0 + abs(float(0.5 * x @ (Q @ x) - f @ x)))
        ):
            status = Status.OPTIMAL
            break
        lam_norm = max(_inf(y), _inf(z))
        if lam_norm > big * scale_d and pres > tol * scale_p:
            status = Status.INFEASIBLE
            break
        if _inf(x) > big * scale_p and pres <= 1e-6 * scale_p * (1 + _inf(x)):
            status = Status.UNBOUNDED
            break
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            D = z / s
        if not np.all(np.isfinite(D)):
            break
        if sparse:
            H = sp.csc_matrix(Q) + sp.csc_matrix(AI).T @ sp.diags(D) @ sp.csc_matrix(AI)
        else:
            H = Q + (AI.T * D) @ AI
        try:
            K = _saddle(H, AE, reg, reg)
            factor = _factor(K)
        except SingularKKTError:
            reg = max(reg * 100, cfg.regularization_floor * (1.0 + _inf(H if not sparse else H.data)))
            try:
                K = _saddle(H, AE, reg, reg)
                factor = _factor(K)
            except SingularKKTError:
                break

        def direction(rc):
            rhs1 = -rd + AI.T @ ((rc - z * rI) / s)
            sol = factor(np.concatenate([rhs1, -rE]))
            dx = sol[:n]
            dy = -sol[n:]
            ds = AI @ dx + rI
            dz = (rc - z * ds) / s
            return dx, dy, ds, dz

        def max_step(v, dv):
            neg = dv < 0
            if not neg.any():
                return 1.0
            with np.errstate(over="ignore", divide="ignore"):
                return min(1.0, float(np.min(-v[neg] / dv[neg])))

        dx, dy, ds, dz = direction(-s * z)
        if mi:
            a_aff = min(max_step(s, ds), max_step(z, dz))
            mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / mi
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, dy, ds, dz = direction(-s * z - ds * dz + sigma * mu)
            alpha = min(1.0, 0.995 * min(max_step(s, ds), max_step(z, dz)))
        else:
            alpha = 1.0
        if not all(np.all(np.isfinite(v)) for v in (dx, dy, ds, dz)):
            break
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz
        stall = stall + 1 if alpha < 1e-10 else 0
        if stall >= 5:
            break
    return x, y, z, s, status, it, reg


def _factor(K):
    """Equilibrated factorization of the interior-point system; returns a solve closure."""
    d = _equilibrate(K)
    if _is_sparse(K):
        D = sp.diags(d)
        Ks = sp.csc_matrix(D @ K @ D)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                lu = spla.splu(Ks)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise SingularKKTError(str(exc)) from exc
        return lambda rhs: lu.solve(rhs * d) * d
    Ks = K * d[:, None] * d[None, :]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu = la.lu_factor(Ks, check_finite=False)
    if not np.all(np.isfinite(lu[0])) or np.any(np.diag(lu[0]) == 0):
        raise SingularKKTError("singular factor")
    rcond, _ = la.lapack.dgecon(lu[0], np.abs(Ks).sum(axis=0).max(), norm="1")
    if not rcond > RCOND_MIN:
        raise SingularKKTError(f"singular to working precision (rcond={rcond:.3g})")
    return lambda rhs: la.lu_solve(lu, rhs * d, check_finite=False) * d


def _report(qp, x, lamE, lamI, status, iters, t0, active, method, reg=0.0, notes=None) -> SolveReport:
    point = PrimalDualPoint.from_compact(qp.layout, x, lamE, lamI)
    return SolveReport(
        point=point,
        status=status,
        kkt=compact_residual(qp, x, lamE, lamI),
        iterations=iters,
        wall_time=time.perf_counter() - t0,
        active=tuple(int(a) for a in active),
        method=method,
        regularization=reg,
        objective=qp.objective(x),
        notes=list(notes or []),
    )


def solve(qp: CompactQP, cfg: SolverConfig | None = None, warm_start: PrimalDualPoint | None = None) -> SolveReport:
    """Solve P_U(d_U) to a KKT point.

    On ``optimal`` the returned point satisfies the KKT conditions to
    ``cfg.tol_kkt`` relative to the data magnitudes. A warm start only
    seeds the working set and the interior-point starting primal point.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    n, me, mi = qp.shape
    if warm_start is not None and warm_start.layout != qp.layout:
        raise ValueError("warm start lives on a different node set")

    if mi == 0:
        try:
            x, lamE = solve_equality_kkt(qp.Q, qp.AE, qp.f, qp.gE)
        except SingularKKTError:
            return _degenerate_equality(qp, cfg, t0)
        lamI = np.zeros(0)
        ok, _ = kkt_satisfied(qp, x, lamE, lamI, cfg.tol_kkt)
        status = Status.OPTIMAL if ok else Status.MAX_ITER
        return _report(qp, x, lamE, lamI, status, 1, t0, (), "direct")

    iters = 0
    x0 = None
    if warm_start is not None:
        wx, _, wlamI = warm_start.compact()
        x0 = wx
        res, used = _polish(qp, np.flatnonzero(wlamI > 0), cfg, cfg.polish_rounds)
        iters += used
        if res is not None:
            x, lamE, lamI, W = res
            return _report(qp, x, lamE, lamI, Status.OPTIMAL, iters, t0, W, "warm-active-set")

    x, y, z, s, status, it, reg = _ipm(qp, x0, cfg, tol=min(1e-10, cfg.tol_kkt))
    iters += it
    lamE, lamI = -y, z
    if status in (Status.INFEASIBLE, Status.UNBOUNDED):
        return _report(qp, x, lamE, lamI, status, iters, t0, (), "ipm", reg)

    W = np.flatnonzero(z > s)
    res, used = _polish(qp, W, cfg, cfg.polish_rounds)
    iters += used
    if res is not None:
        x, lamE, lamI, W = res
        return _report(qp, x, lamE, lamI, Status.OPTIMAL, iters, t0, W, "ipm+active-set", reg)

    notes = ["active-set crossover failed; returning interior-point iterate"]
    lamI = np.maximum(lamI, 0.0)
    ok, _ = kkt_satisfied(qp, x, lamE, lamI, cfg.tol_kkt)
    final = Status.OPTIMAL if ok else Status.MAX_ITER
    return _report(qp, x, lamE, lamI, final, iters, t0, np.flatnonzero(z > s), "ipm", reg, notes)


def _degenerate_equality(qp: CompactQP, cfg: SolverConfig, t0: float) -> SolveReport:
    """Equality-only problem with a singular saddle matrix: classify by least squares."""
    n, me, _ = qp.shape
    Q = qp.Q.toarray() if qp.is_sparse else qp.Q
    AE = qp.AE.toarray() if qp.is_sparse else qp.AE
    K = np.block([[Q, AE.T], [AE, np.zeros((me, me))]])
    rhs = np.concatenate([qp.f, qp.gE])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    x, lamE = sol[:n], sol[n:]
    lamI = np.zeros(0)
    ok, _ = kkt_satisfied(qp, x, lamE, lamI, cfg.tol_kkt)
    if ok:
        return _report(qp, x, lamE, lamI, Status.OPTIMAL, 1, t0, (), "lstsq",
                       notes=["singular KKT matrix; solution is not unique"])
    xe, *_ = np.linalg.lstsq(AE, qp.gE, rcond=None) if me else (np.zeros(n),)
    feasible = _inf(AE @ xe - qp.gE) <= cfg.tol_kkt * (1 + _inf(qp.gE)) if me else True
    status = Status.UNBOUNDED if feasible else Status.INFEASIBLE
    return _report(qp, x, lamE, lamI, status, 1, t0, (), "lstsq")
