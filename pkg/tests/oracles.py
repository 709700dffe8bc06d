"""Independent reference computations used only by the tests.

Nothing here imports the solver, assembly or coupling code it is checked
against; each oracle rebuilds what it needs from raw blocks. The instance
generator at the end only draws test problems.
"""

from __future__ import annotations

import itertools
from collections import deque

import numpy as np

from schwarzqp.graph import NodeDims
from schwarzqp.synthetic import random_graph_qp


def dense_problem(bqp, U):
    """Scatter-add assembly of (Q, AE, AI, f, gE, gI) on sorted U, compact ordering."""
    U = sorted(U)
    dims = bqp.graph.dims
    xo, eo, io = {}, {}, {}
    nx = ne = ni = 0
    for i in U:
        xo[i], eo[i], io[i] = nx, ne, ni
        nx += dims[i].r
        ne += dims[i].mE
        ni += dims[i].mI
    Q = np.zeros((nx, nx))
    AE = np.zeros((ne, nx))
    AI = np.zeros((ni, nx))
    Uset = set(U)
    for (i, j), blk in bqp.Q.items():
        if i in Uset and j in Uset:
            Q[xo[i]:xo[i] + dims[i].r, xo[j]:xo[j] + dims[j].r] += blk
            if i != j:
                Q[xo[j]:xo[j] + dims[j].r, xo[i]:xo[i] + dims[i].r] += blk.T
    for (i, j), blk in bqp.AE.items():
        if i in Uset and j in Uset:
            AE[eo[i]:eo[i] + dims[i].mE, xo[j]:xo[j] + dims[j].r] += blk
    for (i, j), blk in bqp.AI.items():
        if i in Uset and j in Uset:
            AI[io[i]:io[i] + dims[i].mI, xo[j]:xo[j] + dims[j].r] += blk
    f = np.concatenate([bqp.f[i] for i in U])
    gE = np.concatenate([bqp.gE[i] for i in U])
    gI = np.concatenate([bqp.gI[i] for i in U])
    return Q, AE, AI, f, gE, gI


def enumerate_active_sets(Q, AE, AI, f, gE, gI, tol=1e-9):
    """Exhaustive active-set search for min 1/2 x'Qx - f'x, AE x = gE, AI x >= gI.

    Tries every subset S of inequality rows as equalities, keeps solutions
    that are primal feasible with nonnegative inequality multipliers, and
    returns the best (x, lamE, lamI) in the ``Q x + AE' lamE - AI' lamI = f``
    convention. Returns None when no subset qualifies.
    """
    n, me, mi = Q.shape[0], AE.shape[0], AI.shape[0]
    best = None
    for k in range(mi + 1):
        for S in itertools.combinations(range(mi), k):
            S = list(S)
            A = np.vstack([AE, AI[S]])
            g = np.concatenate([gE, gI[S]])
            m = A.shape[0]
            K = np.block([[Q, A.T], [A, np.zeros((m, m))]])
            if np.linalg.matrix_rank(K) < n + m:
                continue
            sol = np.linalg.solve(K, np.concatenate([f, g]))
            x, lam = sol[:n], sol[n:]
            lamI = np.zeros(mi)
            lamI[S] = -lam[me:]
            if np.any(AI @ x - gI < -tol * (1 + np.abs(gI).max(initial=0))):
                continue
            if np.any(lamI < -tol * (1 + np.abs(lamI).max(initial=0))):
                continue
            obj = 0.5 * x @ Q @ x - f @ x
            if best is None or obj < best[0] - 1e-12:
                best = (obj, x, lam[:me], lamI)
    return None if best is None else best[1:]


def bfs_all(adj, U, src):
    """Plain BFS hop counts from ``src`` within the node set ``U``."""
    U = set(U)
    dist = {src: 0}
    dq = deque([src])
    while dq:
        u = dq.popleft()
        for v in adj[u]:
            if v in U and v not in dist:
                dist[v] = dist[u] + 1
                dq.append(v)
    return dist


def floyd_warshall(adj, U):
    U = sorted(U)
    pos = {v: k for k, v in enumerate(U)}
    D = np.full((len(U), len(U)), np.inf)
    np.fill_diagonal(D, 0)
    for v in U:
        for w in adj[v]:
            if w in pos:
                D[pos[v], pos[w]] = 1
    for k in range(len(U)):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    return U, D


def dense_coupling(bqp, V, U):
    """H_{-U} built directly from raw blocks in the signed convention.

    Rows follow z_U node-major, columns z_{N_V(U)} node-major.
    """
    g = bqp.graph
    U = sorted(U)
    Uset, Vset = set(U), set(V)
    bnd = sorted({j for i in U for j in g.adj[i] if j in Vset and j not in Uset})
    dims = g.dims
    ro, co = {}, {}
    n = 0
    for i in U:
        ro[i] = n
        n += dims[i].n
    m = 0
    for j in bnd:
        co[j] = m
        m += dims[j].n
    H = np.zeros((n, m))
    for i in U:
        for j in g.adj[i]:
            if j not in co:
                continue
            di, dj = dims[i], dims[j]
            r0, c0 = ro[i], co[j]
            q = bqp.Q.get((i, j)) if i < j else (bqp.Q[(j, i)].T if (j, i) in bqp.Q else None)
            if q is not None:
                H[r0:r0 + di.r, c0:c0 + dj.r] = q
            if (j, i) in bqp.AE:
                H[r0:r0 + di.r, c0 + dj.r:c0 + dj.r + dj.mE] = bqp.AE[(j, i)].T
            if (j, i) in bqp.AI:
                H[r0:r0 + di.r, c0 + dj.r + dj.mE:c0 + dj.n] = -bqp.AI[(j, i)].T
            if (i, j) in bqp.AE:
                H[r0 + di.r:r0 + di.r + di.mE, c0:c0 + dj.r] = bqp.AE[(i, j)]
            if (i, j) in bqp.AI:
                H[r0 + di.r + di.mE:r0 + di.n, c0:c0 + dj.r] = bqp.AI[(i, j)]
    return bnd, H


def kkt_residual_oracle(Q, AE, AI, f, gE, gI, x, lamE, lamI):
    st = Q @ x + AE.T @ lamE - AI.T @ lamI - f
    sl = AI @ x - gI
    amax = lambda v: float(np.abs(v).max()) if v.size else 0.0
    return (
        amax(st),
        amax(AE @ x - gE),
        float(np.clip(-sl, 0, None).max()) if sl.size else 0.0,
        float(np.clip(-lamI, 0, None).max()) if lamI.size else 0.0,
        amax(lamI * sl),
    )


def licq_holds(AE, AI, gI, x, tol=1e-9):
    """Active constraint rows at ``x`` (equalities plus tight inequalities) are independent."""
    act = np.abs(AI @ x - gI) <= tol * (1 + np.abs(gI).max(initial=0))
    A = np.vstack([AE, AI[act]])
    return A.shape[0] == 0 or np.linalg.matrix_rank(A, tol=1e-8) == A.shape[0]


def licq_qp(graph, rng, max_r=3, cons_coupling=0.3):
    """Random strongly convex graph QP with at most r_i constraint rows per node.

    With generic data the active rows then stay linearly independent, so
    multipliers are unique and primal-dual vectors can be compared.
    """
    dims = []
    for _ in range(graph.n_nodes):
        r = int(rng.integers(1 if max_r < 2 else 2, max_r + 1))
        mE = int(rng.integers(0, 2)) if r > 1 else 0
        dims.append(NodeDims(r, mE, int(rng.integers(0, r - mE + 1))))
    return random_graph_qp(graph, rng, cons_coupling=cons_coupling, dims=dims)
