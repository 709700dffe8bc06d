"""Block data model for graph-structured QPs.

Every problem on a node subset ``U`` has the form::

    min  1/2 x'Q x - f'x
    s.t. AE x  = gE      (lamE)
         AI x >= gI      (lamI >= 0)

with data blocks ``Q[i, j]``, ``AE[i, j]``, ``AI[i, j]`` nonzero only between
adjacent nodes. The dual convention used throughout the package is::

    Q x + AE' lamE - AI' lamI = f,   lamI >= 0.

Primal-dual vectors are stacked node-major: ``z = (z_i for i in U)`` with
``z_i = (x_i, lamE_i, lamI_i)``. Solvers work in the "compact" ordering
``(x, lamE, lamI)``; :class:`Layout` maps between the two.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import scipy.sparse as sp

from .graph import NodeDims, NodeGraph, coupled_complement

DENSE_LIMIT = 500


class ModelError(ValueError):
    pass


class InconsistentBlockError(ModelError):
    """A data block is missing, misplaced or has the wrong shape."""


class DimensionMismatchError(ModelError):
    pass


class SubsetError(ModelError):
    pass


def _sorted_nodes(U) -> tuple[int, ...]:
    return tuple(sorted({int(u) for u in U}))


class Layout:
    """Index bookkeeping for the stacked vectors of a node subset."""

    def __init__(self, nodes: Iterable[int], dims: Mapping[int, NodeDims] | tuple[NodeDims, ...]):
        self.nodes = _sorted_nodes(nodes)
        self.dims = {i: dims[i] for i in self.nodes}
        self.pos = {i: k for k, i in enumerate(self.nodes)}
        r = np.array([self.dims[i].r for i in self.nodes], dtype=int)
        me = np.array([self.dims[i].mE for i in self.nodes], dtype=int)
        mi = np.array([self.dims[i].mI for i in self.nodes], dtype=int)
        n = r + me + mi
        zoff = np.concatenate([[0], np.cumsum(n)])
        xoff = np.concatenate([[0], np.cumsum(r)])
        eoff = np.concatenate([[0], np.cumsum(me)])
        ioff = np.concatenate([[0], np.cumsum(mi)])
        self.n_x, self.n_e, self.n_i = int(xoff[-1]), int(eoff[-1]), int(ioff[-1])
        self.n_z = int(zoff[-1])
        self.zoff, self.xoff, self.eoff, self.ioff = zoff, xoff, eoff, ioff
        zx, ze, zi = [], [], []
        for k in range(len(self.nodes)):
            base = zoff[k]
            zx.extend(range(base, base + r[k]))
            zi_start = base + r[k]
            ze.extend(range(zi_start, zi_start + me[k]))
            zi.extend(range(zi_start + me[k], zi_start + me[k] + mi[k]))
        self.zx = np.array(zx, dtype=int)
        self.ze = np.array(ze, dtype=int)
        self.zi = np.array(zi, dtype=int)

    @classmethod
    def of(cls, graph: NodeGraph, U) -> "Layout":
        return cls(U, graph.dims)

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.nodes == other.nodes and self.dims == other.dims

    def zslice(self, i: int) -> slice:
        k = self.pos[i]
        return slice(int(self.zoff[k]), int(self.zoff[k + 1]))

    def xslice(self, i: int) -> slice:
        k = self.pos[i]
        return slice(int(self.xoff[k]), int(self.xoff[k + 1]))

    def eslice(self, i: int) -> slice:
        k = self.pos[i]
        return slice(int(self.eoff[k]), int(self.eoff[k + 1]))

    def islice(self, i: int) -> slice:
        k = self.pos[i]
        return slice(int(self.ioff[k]), int(self.ioff[k + 1]))

    @cached_property
    def primal_mask(self) -> np.ndarray:
        m = np.zeros(self.n_z, dtype=bool)
        m[self.zx] = True
        return m

    @cached_property
    def node_of_z(self) -> np.ndarray:
        out = np.empty(self.n_z, dtype=int)
        for k, i in enumerate(self.nodes):
            out[self.zoff[k]:self.zoff[k + 1]] = i
        return out

    def gather(self, other: "Layout") -> np.ndarray:
        """z-indices into ``other`` for every z entry of ``self`` (nodes must be a subset)."""
        idx = np.empty(self.n_z, dtype=int)
        for k, i in enumerate(self.nodes):
            if i not in other.pos:
                raise SubsetError(f"node {i} missing from source layout")
            s = other.zslice(i)
            idx[self.zoff[k]:self.zoff[k + 1]] = np.arange(s.start, s.stop)
        return idx


class PrimalDualPoint:
    """Stacked ``(x_i, lamE_i, lamI_i)`` over an ordered node set."""

    __slots__ = ("layout", "vec")

    def __init__(self, layout: Layout, vec: np.ndarray | None = None):
        self.layout = layout
        if vec is None:
            vec = np.zeros(layout.n_z)
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (layout.n_z,):
            raise DimensionMismatchError(f"vector of length {vec.shape} for layout of size {layout.n_z}")
        self.vec = vec

    @classmethod
    def zeros(cls, graph: NodeGraph, U) -> "PrimalDualPoint":
        return cls(Layout.of(graph, U))

    @classmethod
    def from_compact(cls, layout: Layout, x, lamE, lamI) -> "PrimalDualPoint":
        vec = np.empty(layout.n_z)
        vec[layout.zx] = x
        vec[layout.ze] = lamE
        vec[layout.zi] = lamI
        return cls(layout, vec)

    @property
    def nodes(self) -> tuple[int, ...]:
        return self.layout.nodes

    def compact(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        L = self.layout
        return self.vec[L.zx], self.vec[L.ze], self.vec[L.zi]

    def z(self, i: int) -> np.ndarray:
        return self.vec[self.layout.zslice(i)]

    def x(self, i: int) -> np.ndarray:
        d = self.layout.dims[i]
        return self.z(i)[: d.r]

    def lamE(self, i: int) -> np.ndarray:
        d = self.layout.dims[i]
        return self.z(i)[d.r: d.r + d.mE]

    def lamI(self, i: int) -> np.ndarray:
        d = self.layout.dims[i]
        return self.z(i)[d.r + d.mE:]

    def copy(self) -> "PrimalDualPoint":
        return PrimalDualPoint(self.layout, self.vec.copy())

    def node_norms(self) -> np.ndarray:
        L = self.layout
        sq = np.add.reduceat(self.vec ** 2, L.zoff[:-1]) if L.n_z else np.zeros(0)
        # reduceat misbehaves on empty segments; no node has n_i = 0 since r_i >= 1
        return np.sqrt(sq)

    def max_node_norm(self) -> float:
        """max_i ||z_i||_2 over the nodes of the point."""
        nn = self.node_norms()
        return float(nn.max()) if nn.size else 0.0

    def __sub__(self, other: "PrimalDualPoint") -> "PrimalDualPoint":
        if self.layout != other.layout:
            raise DimensionMismatchError("points live on different node sets")
        return PrimalDualPoint(self.layout, self.vec - other.vec)

    def to_dict(self) -> dict:
        return {
            str(i): {"x": self.x(i).tolist(), "lamE": self.lamE(i).tolist(), "lamI": self.lamI(i).tolist()}
            for i in self.nodes
        }

    @classmethod
    def from_dict(cls, graph: NodeGraph, data: Mapping) -> "PrimalDualPoint":
        layout = Layout.of(graph, [int(k) for k in data])
        p = cls(layout)
        for k, v in data.items():
            i = int(k)
            p.vec[layout.zslice(i)] = np.concatenate([v["x"], v["lamE"], v["lamI"]])
        return p

    def __repr__(self) -> str:
        return f"PrimalDualPoint(nodes={len(self.nodes)}, n={self.layout.n_z})"


def node_max_norm(p: PrimalDualPoint) -> float:
    return p.max_node_norm()


def restrict(z: PrimalDualPoint, target) -> PrimalDualPoint:
    """Keep the node blocks of ``z`` belonging to ``target``; drop the rest."""
    target = _sorted_nodes(target)
    missing = set(target) - set(z.nodes)
    if missing:
        raise SubsetError(f"target nodes {sorted(missing)} are not in the source point")
    layout = Layout(target, z.layout.dims)
    return PrimalDualPoint(layout, z.vec[layout.gather(z.layout)])


def scatter(points: Iterable[PrimalDualPoint], nodes=None) -> PrimalDualPoint:
    """Node-wise union of points on disjoint domains.

    With ``nodes`` given, the union must cover exactly that set.
    """
    points = list(points)
    seen: set[int] = set()
    dims = {}
    for p in points:
        s = set(p.nodes)
        if s & seen:
            raise SubsetError(f"overlapping domains at nodes {sorted(s & seen)}")
        seen |= s
        dims.update(p.layout.dims)
    if nodes is not None and seen != set(int(v) for v in nodes):
        raise SubsetError("scattered points do not cover the requested node set")
    layout = Layout(seen, dims)
    out = PrimalDualPoint(layout)
    for p in points:
        out.vec[p.layout.gather(layout)] = p.vec
    return out


class NodeData(NamedTuple):
    f: np.ndarray
    gE: np.ndarray
    gI: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.f, self.gE, self.gI])


class BlockQP:
    """Per-node and per-edge data blocks of a graph-structured QP.

    Blocks absent from the maps are zero. ``Q`` is stored once per unordered
    pair, the transposed block is produced on demand.
    """

    def __init__(self, graph: NodeGraph, Q: Mapping, AE: Mapping, AI: Mapping, f: Mapping, gE: Mapping, gI: Mapping):
        self.graph = graph
        dims = graph.dims
        self.Q: dict[tuple[int, int], np.ndarray] = {}
        for (i, j), blk in Q.items():
            i, j = int(i), int(j)
            blk = np.atleast_2d(np.asarray(blk, dtype=float))
            self._check_pair(i, j, "Q")
            if blk.shape != (dims[i].r, dims[j].r):
                raise InconsistentBlockError(f"Q[{i},{j}] has shape {blk.shape}, expected {(dims[i].r, dims[j].r)}")
            key, val = ((i, j), blk) if i <= j else ((j, i), blk.T)
            if key in self.Q:
                if not np.allclose(self.Q[key], val, rtol=1e-12, atol=1e-14):
                    raise InconsistentBlockError(f"Q[{i},{j}] != Q[{j},{i}]^T")
                continue
            if i == j and not np.allclose(blk, blk.T, rtol=1e-12, atol=1e-14):
                raise InconsistentBlockError(f"Q[{i},{i}] is not symmetric")
            self.Q[key] = val.copy()
        self.AE = self._read_cons(AE, "AE", lambda d: d.mE)
        self.AI = self._read_cons(AI, "AI", lambda d: d.mI)
        self.f = self._read_vec(f, "f", lambda d: d.r)
        self.gE = self._read_vec(gE, "gE", lambda d: d.mE)
        self.gI = self._read_vec(gI, "gI", lambda d: d.mI)

    def _check_pair(self, i: int, j: int, name: str) -> None:
        n = self.graph.n_nodes
        if not (0 <= i < n and 0 <= j < n):
            raise InconsistentBlockError(f"{name}[{i},{j}] references an unknown node")
        if i != j and not self.graph.has_edge(i, j):
            raise InconsistentBlockError(f"{name}[{i},{j}] placed on a non-edge")

    def _read_cons(self, blocks: Mapping, name: str, rows) -> dict:
        out = {}
        dims = self.graph.dims
        for (i, j), blk in blocks.items():
            i, j = int(i), int(j)
            self._check_pair(i, j, name)
            blk = np.asarray(blk, dtype=float).reshape(rows(dims[i]), dims[j].r)
            out[(i, j)] = blk.copy()
        return out

    def _read_vec(self, vecs: Mapping, name: str, size) -> dict:
        out = {}
        for i in self.graph.nodes:
            v = vecs.get(i)
            n = size(self.graph.dims[i])
            if v is None:
                if n:
                    raise InconsistentBlockError(f"{name}[{i}] missing")
                v = np.zeros(0)
            v = np.asarray(v, dtype=float).reshape(-1)
            if v.shape != (n,):
                raise InconsistentBlockError(f"{name}[{i}] has length {v.size}, expected {n}")
            out[i] = v.copy()
        return out

    # -- block access --

    def q(self, i: int, j: int) -> np.ndarray | None:
        if i <= j:
            return self.Q.get((i, j))
        blk = self.Q.get((j, i))
        return None if blk is None else blk.T

    def ae(self, i: int, j: int) -> np.ndarray | None:
        return self.AE.get((i, j))

    def ai(self, i: int, j: int) -> np.ndarray | None:
        return self.AI.get((i, j))

    def data(self, i: int) -> NodeData:
        return NodeData(self.f[i], self.gE[i], self.gI[i])

    def with_data(self, new: Mapping[int, NodeData]) -> "BlockQP":
        """Copy with some per-node data vectors replaced (blocks shared)."""
        out = object.__new__(BlockQP)
        out.graph, out.Q, out.AE, out.AI = self.graph, self.Q, self.AE, self.AI
        out.f, out.gE, out.gI = dict(self.f), dict(self.gE), dict(self.gI)
        for i, d in new.items():
            d = NodeData(*d)
            dims = self.graph.dims[i]
            if (len(d.f), len(d.gE), len(d.gI)) != (dims.r, dims.mE, dims.mI):
                raise DimensionMismatchError(f"data for node {i} has the wrong size")
            out.f[i] = np.asarray(d.f, dtype=float)
            out.gE[i] = np.asarray(d.gE, dtype=float)
            out.gI[i] = np.asarray(d.gI, dtype=float)
        return out

    def stacked_data(self, U) -> np.ndarray:
        """d_U stacked node-major, aligned with the z layout."""
        return np.concatenate([self.data(i).stacked() for i in _sorted_nodes(U)] or [np.zeros(0)])

    def layout(self, U) -> Layout:
        return Layout.of(self.graph, U)

    def __repr__(self) -> str:
        return f"BlockQP({self.graph!r})"


@dataclass
class CompactQP:
    """Assembled matrices of P_U(d_U) in the compact ``(x, lamE, lamI)`` ordering."""

    layout: Layout
    Q: np.ndarray | sp.spmatrix
    AE: np.ndarray | sp.spmatrix
    AI: np.ndarray | sp.spmatrix
    f: np.ndarray
    gE: np.ndarray
    gI: np.ndarray

    @property
    def U(self) -> tuple[int, ...]:
        return self.layout.nodes

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.Q)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.layout.n_x, self.layout.n_e, self.layout.n_i

    def with_stacked_data(self, d: np.ndarray) -> "CompactQP":
        """Replace (f, gE, gI) from a node-major stacked data vector."""
        L = self.layout
        return CompactQP(L, self.Q, self.AE, self.AI, d[L.zx].copy(), d[L.ze].copy(), d[L.zi].copy())

    def stacked_data(self) -> np.ndarray:
        L = self.layout
        d = np.empty(L.n_z)
        d[L.zx], d[L.ze], d[L.zi] = self.f, self.gE, self.gI
        return d

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) - self.f @ x)


def assemble(bqp: BlockQP, U, sparse: bool | None = None) -> CompactQP:
    """Place blocks (i, j), i, j in U, at their compact offsets.

    Dense below :data:`DENSE_LIMIT` primal variables, CSC above, unless
    ``sparse`` forces a choice.
    """
    graph = bqp.graph
    L = Layout.of(graph, U)
    for i in L.nodes:
        if not 0 <= i < graph.n_nodes:
            raise InconsistentBlockError(f"node {i} is not in the graph")
    if sparse is None:
        sparse = L.n_x > DENSE_LIMIT
    qi, qj, qv = [], [], []
    ei, ej, ev = [], [], []
    ii, ij, iv = [], [], []
    Uset = L.pos
    for i in L.nodes:
        xi = L.xslice(i)
        es, is_ = L.eslice(i), L.islice(i)
        for j in (i,) + graph.adj[i]:
            if j not in Uset:
                continue
            xj = L.xslice(j)
            for blk, rows, (R, C, Vv) in (
                (bqp.q(i, j), xi, (qi, qj, qv)),
                (bqp.ae(i, j), es, (ei, ej, ev)),
                (bqp.ai(i, j), is_, (ii, ij, iv)),
            ):
                if blk is None or blk.size == 0:
                    continue
                r, c = np.nonzero(blk)
                R.append(r + rows.start)
                C.append(c + xj.start)
                Vv.append(blk[r, c])

    def build(R, C, Vv, nrows):
        R = np.concatenate(R) if R else np.zeros(0, dtype=int)
        C = np.concatenate(C) if C else np.zeros(0, dtype=int)
        Vv = np.concatenate(Vv) if Vv else np.zeros(0)
        M = sp.coo_matrix((Vv, (R, C)), shape=(nrows, L.n_x))
        return M.tocsc() if sparse else M.toarray()

    Q = build(qi, qj, qv, L.n_x)
    AE = build(ei, ej, ev, L.n_e)
    AI = build(ii, ij, iv, L.n_i)
    f = np.concatenate([bqp.f[i] for i in L.nodes]) if L.nodes else np.zeros(0)
    gE = np.concatenate([bqp.gE[i] for i in L.nodes]) if L.nodes else np.zeros(0)
    gI = np.concatenate([bqp.gI[i] for i in L.nodes]) if L.nodes else np.zeros(0)
    return CompactQP(L, Q, AE, AI, f, gE, gI)


# -- coupling -----------------------------------------------------------------


def coupling_block(bqp: BlockQP, i: int, j: int, signed: bool = True) -> np.ndarray:
    """H_ij = [[Q_ij, AE_ji', -AI_ji'], [AE_ij, 0, 0], [AI_ij, 0, 0]].

    With ``signed=False`` the inequality-dual column carries ``+AI_ji'``,
    which makes the stacked KKT matrix symmetric (the dual vector then holds
    ``-lamI``).
    """
    di, dj = bqp.graph.dims[i], bqp.graph.dims[j]
    H = np.zeros((di.n, dj.n))
    q = bqp.q(i, j)
    if q is not None:
        H[: di.r, : dj.r] = q
    ae_ji, ai_ji = bqp.ae(j, i), bqp.ai(j, i)
    if ae_ji is not None:
        H[: di.r, dj.r: dj.r + dj.mE] = ae_ji.T
    if ai_ji is not None:
        H[: di.r, dj.r + dj.mE:] = -ai_ji.T if signed else ai_ji.T
    ae_ij, ai_ij = bqp.ae(i, j), bqp.ai(i, j)
    if ae_ij is not None:
        H[di.r: di.r + di.mE, : dj.r] = ae_ij
    if ai_ij is not None:
        H[di.r + di.mE:, : dj.r] = ai_ij
    return H


@dataclass
class CouplingBlocks:
    U: tuple[int, ...]
    boundary: tuple[int, ...]
    blocks: dict[tuple[int, int], np.ndarray]

    def __len__(self) -> int:
        return len(self.blocks)


def coupling(bqp: BlockQP, V, U) -> CouplingBlocks:
    """Blocks H_ij for i in U, j in N_V(U), {i, j} an edge."""
    U = _sorted_nodes(U)
    V = _sorted_nodes(V)
    if not set(U) <= set(V):
        raise SubsetError("U must be a subset of V")
    bnd = tuple(coupled_complement(bqp.graph, V, U))
    bset = set(bnd)
    blocks = {}
    for i in U:
        for j in bqp.graph.adj[i]:
            if j in bset:
                blocks[(i, j)] = coupling_block(bqp, i, j)
    return CouplingBlocks(U, bnd, blocks)


def coupling_matrix(bqp: BlockQP, V, U) -> tuple[Layout, Layout, sp.csr_matrix]:
    """H_{-U} as one sparse matrix: rows in U's z layout, columns in N_V(U)'s."""
    cb = coupling(bqp, V, U)
    LU = Layout.of(bqp.graph, cb.U)
    LB = Layout.of(bqp.graph, cb.boundary)
    R, C, Vv = [], [], []
    for (i, j), H in cb.blocks.items():
        r, c = np.nonzero(H)
        R.append(r + LU.zslice(i).start)
        C.append(c + LB.zslice(j).start)
        Vv.append(H[r, c])
    if R:
        M = sp.coo_matrix((np.concatenate(Vv), (np.concatenate(R), np.concatenate(C))), shape=(LU.n_z, LB.n_z))
    else:
        M = sp.coo_matrix((LU.n_z, LB.n_z))
    return LU, LB, M.tocsr()


def modified_data(bqp: BlockQP, U, z_boundary: PrimalDualPoint, V=None) -> dict[int, NodeData]:
    """Per-node data of the subproblem on ``U`` given neighbour values.

    ``f~_i = f_i - sum_j (Q_ij x_j + AE_ji' lamE_j - AI_ji' lamI_j)``,
    ``gE~_i = gE_i - sum_j AE_ij x_j`` and ``gI~_i = gI_i - sum_j AI_ij x_j``
    over neighbours j of i carried by ``z_boundary``. When ``V`` is given,
    ``z_boundary`` must cover N_V(U).
    """
    U = _sorted_nodes(U)
    Uset = set(U)
    bset = set(z_boundary.nodes)
    if bset & Uset:
        raise SubsetError("boundary point overlaps U")
    if V is not None:
        need = set(coupled_complement(bqp.graph, V, U))
        if not need <= bset:
            raise DimensionMismatchError(f"boundary point misses nodes {sorted(need - bset)}")
    out = {}
    for i in U:
        d = bqp.data(i)
        f, gE, gI = d.f.copy(), d.gE.copy(), d.gI.copy()
        di = bqp.graph.dims[i]
        for j in bqp.graph.adj[i]:
            if j not in bset:
                continue
            zj = z_boundary.z(j)
            if zj.shape != (bqp.graph.dims[j].n,):
                raise DimensionMismatchError(f"boundary block for node {j} has the wrong size")
            t = coupling_block(bqp, i, j) @ zj
            f -= t[: di.r]
            gE -= t[di.r: di.r + di.mE]
            gI -= t[di.r + di.mE:]
        out[i] = NodeData(f, gE, gI)
    return out


def stack_node_data(layout: Layout, data: Mapping[int, NodeData]) -> np.ndarray:
    return np.concatenate([NodeData(*data[i]).stacked() for i in layout.nodes] or [np.zeros(0)])


def kkt_matrix(bqp: BlockQP, U, signed: bool = False) -> np.ndarray:
    """Dense stacked KKT matrix H_U (node-major z ordering).

    ``signed=False`` gives the symmetric form ``[[Q, A'], [A, 0]]``.
    """
    L = Layout.of(bqp.graph, U)
    H = np.zeros((L.n_z, L.n_z))
    for i in L.nodes:
        si = L.zslice(i)
        for j in (i,) + bqp.graph.adj[i]:
            if j in L.pos:
                H[si, L.zslice(j)] = coupling_block(bqp, i, j, signed=signed)
    return H


# -- residuals ----------------------------------------------------------------


class KKTResidual(NamedTuple):
    stationarity: float
    primal_eq: float
    primal_ineq_violation: float
    dual_sign_violation: float
    complementarity: float

    def max(self) -> float:
        return max(self)


def _amax(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def compact_residual(qp: CompactQP, x, lamE, lamI) -> KKTResidual:
    st = qp.Q @ x + qp.AE.T @ lamE - qp.AI.T @ lamI - qp.f
    slack = qp.AI @ x - qp.gI
    return KKTResidual(
        _amax(st),
        _amax(qp.AE @ x - qp.gE),
        float(np.max(np.maximum(-slack, 0.0))) if slack.size else 0.0,
        float(np.max(np.maximum(-lamI, 0.0))) if lamI.size else 0.0,
        _amax(lamI * slack),
    )


def kkt_residual(bqp: BlockQP, U, d: Mapping[int, NodeData] | None, z: PrimalDualPoint) -> KKTResidual:
    """Max-norm KKT residual groups of P_U(d) at ``z``; ``d=None`` uses the BlockQP's own data."""
    qp = assemble(bqp, U)
    if z.layout != qp.layout:
        raise DimensionMismatchError("point and problem live on different node sets")
    if d is not None:
        qp = qp.with_stacked_data(stack_node_data(qp.layout, d))
    return compact_residual(qp, *z.compact())


def objective(bqp: BlockQP, U, z: PrimalDualPoint) -> float:
    qp = assemble(bqp, U)
    return qp.objective(z.compact()[0])


# -- json io ----------------------------------------------------------------

FORMAT_NAME = "schwarzqp.blockqp"
FORMAT_VERSION = 1


def blockqp_to_dict(bqp: BlockQP) -> dict:
    g = bqp.graph

    def blocks(m):
        return [
            {"i": i, "j": j, "data": blk.ravel().tolist()}
            for (i, j), blk in sorted(m.items())
        ]

    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "nodes": [
            {"id": i, "label": str(g.labels[i]), "r": d.r, "mE": d.mE, "mI": d.mI}
            for i, d in enumerate(g.dims)
        ],
        "edges": [list(e) for e in g.edges()],
        "Q": blocks(bqp.Q),
        "AE": blocks(bqp.AE),
        "AI": blocks(bqp.AI),
        "f": {str(i): bqp.f[i].tolist() for i in g.nodes},
        "gE": {str(i): bqp.gE[i].tolist() for i in g.nodes},
        "gI": {str(i): bqp.gI[i].tolist() for i in g.nodes},
    }


def blockqp_from_dict(doc: Mapping) -> BlockQP:
    if doc.get("format") != FORMAT_NAME:
        raise ModelError(f"not a {FORMAT_NAME} document")
    nodes = sorted(doc["nodes"], key=lambda n: n["id"])
    if [n["id"] for n in nodes] != list(range(len(nodes))):
        raise ModelError("node ids must be dense 0..N-1")
    dims = [NodeDims(n["r"], n["mE"], n["mI"]) for n in nodes]
    graph = NodeGraph(len(nodes), [tuple(e) for e in doc["edges"]], dims, [n.get("label", n["id"]) for n in nodes])

    def blocks(entries, rows):
        out = {}
        for e in entries:
            i, j = e["i"], e["j"]
            out[(i, j)] = np.asarray(e["data"], dtype=float).reshape(rows(dims[i]), dims[j].r)
        return out

    vec = lambda m: {int(k): np.asarray(v, dtype=float) for k, v in m.items()}
    return BlockQP(
        graph,
        blocks(doc["Q"], lambda d: d.r),
        blocks(doc["AE"], lambda d: d.mE),
        blocks(doc["AI"], lambda d: d.mI),
        vec(doc["f"]),
        vec(doc["gE"]),
        vec(doc["gI"]),
    )


def save_blockqp(bqp: BlockQP, path) -> None:
    Path(path).write_text(json.dumps(blockqp_to_dict(bqp), allow_nan=False))


def load_blockqp(path) -> BlockQP:
    return blockqp_from_dict(json.loads(Path(path).read_text()))
