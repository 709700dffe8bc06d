"""Sensitivity diagnostics at QP solutions.

Bases are index sets of the node-major stacked vector. They are worked out
on the symmetric KKT matrix ``[[Q, AE', AI'], [AE, 0, 0], [AI, 0, 0]]``, whose
solution vector carries ``-lamI`` in place of ``lamI``. Node-wise norms and
singular values are unaffected by that sign flip.
"""

from __future__ import annotations

import csv
import io
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import UNREACHABLE, bfs_distances, distance_matrix
from .kernel import SolverConfig, SolveReport, solve
from .model import BlockQP, Layout, PrimalDualPoint, assemble, kkt_matrix

ACTIVITY_TOL = 1e-7
MAX_DENSE = 2000


class SingularBasisError(np.linalg.LinAlgError):
    pass


class SizeLimitError(ValueError):
    pass


class BasisChangedWarning(UserWarning):
    pass


class DegeneracyWarning(UserWarning):
    pass


def _flip(layout: Layout, vec: np.ndarray) -> np.ndarray:
    out = vec.copy()
    out[layout.zi] *= -1.0
    return out


@dataclass
class BasisInfo:
    layout: Layout
    index_set: np.ndarray
    H_BB: np.ndarray
    sigma_min: float
    sigma_max: float
    degenerate: bool = False

    @property
    def U(self) -> tuple[int, ...]:
        return self.layout.nodes

    def __len__(self) -> int:
        return len(self.index_set)

    def same_as(self, other: "BasisInfo") -> bool:
        return self.layout == other.layout and np.array_equal(self.index_set, other.index_set)

    def basic_solution(self, d: np.ndarray) -> PrimalDualPoint:
        """Solve ``H_BB z_B = d_B`` with zeros off B (signed convention on return)."""
        L = self.layout
        z = np.zeros(L.n_z)
        if len(self.index_set):
            z[self.index_set] = np.linalg.solve(self.H_BB, d[self.index_set])
        return PrimalDualPoint(L, _flip(L, z))


def _singular_values(M: np.ndarray) -> tuple[float, float]:
    if M.size == 0:
        return math.nan, math.nan
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[-1]), float(s[0])


def extract_basis(bqp: BlockQP, U, report: SolveReport, d: np.ndarray | None = None, tol: float = ACTIVITY_TOL) -> BasisInfo:
    """Basis at an optimal point.

    B holds primal entries with ``|x| > tol``, every equality dual, and the
    dual of every inequality that is active (slack <= tol) or has
    ``|lamI| > tol``. If ``H[B, B]`` is singular, all primal indices are
    added. If it is still singular (dependent active rows), rows whose
    multiplier is zero are admitted greedily while ``H[B, B]`` stays
    nonsingular; :class:`SingularBasisError` means even the nonzero
    entries of z alone give a singular block.
    ``d`` is the stacked data the point solves (defaults to the BlockQP's).
    """
    if not report.ok:
        raise ValueError(f"need an optimal solve, got {report.status.value}")
    qp = assemble(bqp, U)
    L = qp.layout
    if L.n_z > MAX_DENSE:
        raise SizeLimitError(f"{L.n_z} stacked entries exceed the dense limit {MAX_DENSE}")
    if report.point.layout != L:
        raise ValueError("report lives on a different node set")
    if d is not None:
        qp = qp.with_stacked_data(d)
    x, _, lamI = report.point.compact()
    slack = qp.AI @ x - qp.gI
    active = slack <= tol
    big = np.abs(lamI) > tol
    degenerate = bool(np.any(active & ~big))
    if degenerate:
        warnings.warn("active inequality with a near-zero multiplier", DegeneracyWarning, stacklevel=2)
    keep = np.zeros(L.n_z, dtype=bool)
    keep[L.zx[np.abs(x) > tol]] = True
    keep[L.ze] = True
    keep[L.zi[active | big]] = True
    H = kkt_matrix(bqp, L.nodes, signed=False)

    def ok(B):
        smin, smax = _singular_values(H[np.ix_(B, B)])
        return B.size == 0 or smin > 1e-12 * max(smax, 1.0)

    for attempt in range(2):
        B = np.flatnonzero(keep)
        if ok(B):
            return _basis(L, H, B, degenerate)
        keep[L.zx] = True

    # dependent active rows: keep every nonzero entry of z, then add the
    # zero-multiplier active rows one at a time while H[B, B] stays nonsingular
    lamE = report.point.compact()[1]
    keep = np.zeros(L.n_z, dtype=bool)
    keep[L.zx] = True
    keep[L.ze[np.abs(lamE) > tol]] = True
    keep[L.zi[big]] = True
    if not ok(np.flatnonzero(keep)):
        raise SingularBasisError("no nonsingular basis at this point (degenerate solution)")
    optional = np.concatenate([L.ze[np.abs(lamE) <= tol], L.zi[active & ~big]])
    for idx in sorted(optional):
        keep[idx] = True
        if not ok(np.flatnonzero(keep)):
            keep[idx] = False
    return _basis(L, H, np.flatnonzero(keep), True)


def _basis(L: Layout, H: np.ndarray, B: np.ndarray, degenerate: bool) -> BasisInfo:
    H_BB = H[np.ix_(B, B)]
    smin, smax = _singular_values(H_BB)
    return BasisInfo(L, B, H_BB, smin, smax, degenerate)


def gamma_rho(sigma_lo: float, sigma_hi: float) -> tuple[float, float]:
    if not (sigma_lo > 0 and sigma_hi >= sigma_lo):
        raise ValueError("need 0 < sigma_lo <= sigma_hi")
    return sigma_hi / sigma_lo**2, (sigma_hi**2 - sigma_lo**2) / (sigma_hi**2 + sigma_lo**2)


def decay_coefficient(Gamma: float, rho: float, dist) -> np.ndarray:
    """Gamma * rho**ceil((dist - 1) / 2); Gamma for dist <= 1 and 0 for unreachable."""
    dist = np.asarray(dist, dtype=float)
    out = np.zeros_like(dist)
    fin = np.isfinite(dist)
    p = np.maximum(np.ceil((dist[fin] - 1) / 2), 0)
    out[fin] = Gamma * rho**p
    return out


@dataclass
class DecayProfile:
    perturbed_node: int
    nodes: np.ndarray
    distance: np.ndarray
    delta_norm: np.ndarray
    bound: np.ndarray
    d_norm: float
    Gamma: float
    rho: float
    basis_stable: bool
    bases: list[BasisInfo] = field(default_factory=list, repr=False)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("node", "distance", "delta_norm", "bound"))
        for i, dist, dn, b in zip(self.nodes, self.distance, self.delta_norm, self.bound):
            w.writerow((int(i), "inf" if math.isinf(dist) else int(dist), repr(float(dn)), repr(float(b))))
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def envelope(self) -> tuple[np.ndarray, np.ndarray]:
        """Largest delta_norm at each finite distance."""
        fin = np.isfinite(self.distance)
        ds = np.unique(self.distance[fin])
        env = np.array([self.delta_norm[fin & (self.distance == k)].max() for k in ds])
        return ds, env

    def log_fit(self, rel_floor: float = 1e-12) -> tuple[float, float, float]:
        """(slope, intercept, R^2) of log(envelope) against distance.

        Distances whose envelope is below ``rel_floor`` times the largest
        delta are dropped as round-off. Returns NaNs with fewer than 3 points.
        """
        ds, env = self.envelope()
        top = env.max(initial=0.0)
        ok = env > rel_floor * top if top > 0 else np.zeros(len(env), dtype=bool)
        if ok.sum() < 3:
            return math.nan, math.nan, math.nan
        xs, ys = ds[ok], np.log(env[ok])
        A = np.vstack([xs, np.ones_like(xs)]).T
        (slope, icpt), *_ = np.linalg.lstsq(A, ys, rcond=None)
        ss_res = float(np.sum((ys - A @ [slope, icpt]) ** 2))
        ss_tot = float(np.sum((ys - ys.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        return float(slope), float(icpt), r2


_DELTA_RE = re.compile(r"^(f|gE|gI)(\d+)=([-+0-9.eE]+)$")


def parse_delta(text: str, bqp: BlockQP, j: int) -> np.ndarray:
    """Stacked perturbation of d_j from ``"f0=0.5,gI1=-1"``; ``"0"`` means none."""
    d = bqp.graph.dims[j]
    out = np.zeros(d.n)
    text = text.strip()
    if text in ("", "0", "0.0"):
        return out
    offs = {"f": (0, d.r), "gE": (d.r, d.mE), "gI": (d.r + d.mE, d.mI)}
    for part in text.split(","):
        m = _DELTA_RE.match(part.strip())
        if not m:
            raise ValueError(f"cannot parse perturbation {part!r}; expected e.g. f0=0.1")
        name, idx, val = m.group(1), int(m.group(2)), float(m.group(3))
        start, size = offs[name]
        if idx >= size:
            raise ValueError(f"node {j} has no {name}[{idx}]")
        out[start + idx] += val
    return out


def _perturbed(base: np.ndarray, L: Layout, j: int, delta: np.ndarray) -> np.ndarray:
    d = base.copy()
    d[L.zslice(j)] += delta
    return d


def decay_profile(bqp: BlockQP, U, j: int, delta: np.ndarray, cfg: SolverConfig | None = None) -> DecayProfile:
    """Solve P_U at d and at d + delta (on node j) and compare node by node.

    Gamma and rho come from the bases extracted at the two endpoint solutions.
    """
    qp = assemble(bqp, U)
    L = qp.layout
    if j not in L.pos:
        raise ValueError(f"node {j} is not in U")
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (bqp.graph.dims[j].n,):
        raise ValueError(f"perturbation for node {j} must have length {bqp.graph.dims[j].n}")
    d0 = qp.stacked_data()
    d1 = _perturbed(d0, L, j, delta)
    r0 = solve(qp, cfg)
    r1 = solve(qp.with_stacked_data(d1), cfg)
    for r in (r0, r1):
        if not r.ok:
            raise RuntimeError(f"endpoint solve failed with status {r.status.value}")
    b0 = extract_basis(bqp, L.nodes, r0, d0)
    b1 = extract_basis(bqp, L.nodes, r1, d1)
    stable = b0.same_as(b1)
    lo = np.nanmin([b0.sigma_min, b1.sigma_min, np.inf])
    hi = np.nanmax([b0.sigma_max, b1.sigma_max, 0.0])
    if np.isfinite(lo) and lo > 0:
        Gamma, rho = gamma_rho(lo, hi)
    else:  # both bases empty: the solution does not move
        Gamma, rho = 0.0, 0.0
    dist_map = bfs_distances(bqp.graph, L.nodes, [j])
    nodes = np.array(L.nodes)
    dist = np.array([dist_map.get(i, UNREACHABLE) for i in L.nodes], dtype=float)
    dn = (r1.point - r0.point).node_norms()
    d_norm = float(np.linalg.norm(delta))
    bound = decay_coefficient(Gamma, rho, dist) * d_norm
    return DecayProfile(j, nodes, dist, dn, bound, d_norm, Gamma, rho, stable, [b0, b1])


def verify_bound(profile: DecayProfile, atol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """(holds, margin) per node with ``margin = bound - delta_norm``."""
    if not profile.basis_stable:
        warnings.warn("basis changed along the perturbation; bound uses surrogate Gamma, rho", BasisChangedWarning, stacklevel=2)
    margin = profile.bound - profile.delta_norm
    return margin >= -atol, margin


def sampled_sigma_bounds(bqp: BlockQP, U, d0: np.ndarray, d1: np.ndarray, samples: int = 16, cfg: SolverConfig | None = None):
    """Extreme singular values over bases met along ``d0 -> d1``.

    Returns ``(sigma_lo, sigma_hi, bases)`` where ``bases`` lists the distinct
    bases in order of first appearance. These are estimates over visited
    bases only.
    """
    if not 2 <= samples <= 64:
        raise ValueError("samples must lie in [2, 64]")
    qp = assemble(bqp, U)
    seen: list[BasisInfo] = []
    for s in np.linspace(0.0, 1.0, samples):
        d = (1 - s) * d0 + s * d1
        rep = solve(qp.with_stacked_data(d), cfg)
        if not rep.ok:
            continue
        b = extract_basis(bqp, U, rep, d)
        if not any(b.same_as(o) for o in seen):
            seen.append(b)
    lo = min((b.sigma_min for b in seen if len(b)), default=math.nan)
    hi = max((b.sigma_max for b in seen if len(b)), default=math.nan)
    return lo, hi, seen


def structural_zero_violations(bqp: BlockQP, basis: BasisInfo, q: int) -> int:
    """Nonzero entries of ``H_BB**q`` in node blocks (i, j) with distance > q."""
    L = basis.layout
    nodes, D = distance_matrix(bqp.graph, L.nodes)
    pos = {v: k for k, v in enumerate(nodes)}
    owner = np.array([pos[v] for v in L.node_of_z[basis.index_set]], dtype=int)
    far = D[np.ix_(owner, owner)] > q
    P = np.linalg.matrix_power(basis.H_BB, q)
    return int(np.count_nonzero(P[far]))
