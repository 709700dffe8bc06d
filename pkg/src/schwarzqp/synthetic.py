"""Seeded generators for graph-structured test QPs."""

from __future__ import annotations

import numpy as np

from .graph import NodeDims, NodeGraph, grid_graph, path_graph, random_graph, ring_graph
from .model import BlockQP


def random_graph_qp(
    graph: NodeGraph,
    rng: np.random.Generator,
    r_choices=(1, 2),
    mE_choices=(0, 1),
    mI_choices=(0, 1, 2),
    coupling: float = 0.5,
    cons_coupling: float = 0.5,
    shift: float = 0.2,
    active_frac: float = 0.4,
    dims=None,
) -> BlockQP:
    """Feasible, strongly convex QP on ``graph``.

    Q is a sum of PSD edge terms ``[[a I, C], [C', a I]]`` with ``a = ||C||``
    plus a positive definite term per node, so it is positive definite with
    graph sparsity. Constraints hold at a random point ``x0``; about
    ``active_frac`` of the inequalities are tight there.
    """
    n = graph.n_nodes
    if dims is None:
        dims = [
            NodeDims(int(rng.choice(r_choices)), int(rng.choice(mE_choices)), int(rng.choice(mI_choices)))
            for _ in range(n)
        ]
    dims = [d if isinstance(d, NodeDims) else NodeDims(*d) for d in dims]
    for i, d in enumerate(dims):
        if d.mE > d.r:
            dims[i] = NodeDims(d.r, d.r, d.mI)
    graph = graph.with_dims(dims)

    Q: dict = {}
    for i in range(n):
        M = rng.normal(size=(dims[i].r, dims[i].r))
        Q[(i, i)] = M @ M.T / dims[i].r + shift * np.eye(dims[i].r)
    for i, j in graph.edges():
        C = coupling * rng.normal(size=(dims[i].r, dims[j].r))
        a = np.linalg.norm(C, 2)
        Q[(i, j)] = C
        Q[(i, i)] = Q[(i, i)] + a * np.eye(dims[i].r)
        Q[(j, j)] = Q[(j, j)] + a * np.eye(dims[j].r)

    AE: dict = {}
    AI: dict = {}
    for i in range(n):
        for j in (i,) + graph.adj[i]:
            scale = 1.0 if i == j else cons_coupling
            if dims[i].mE:
                AE[(i, j)] = scale * rng.normal(size=(dims[i].mE, dims[j].r))
            if dims[i].mI:
                AI[(i, j)] = scale * rng.normal(size=(dims[i].mI, dims[j].r))

    x0 = {i: rng.normal(size=dims[i].r) for i in range(n)}
    f = {i: rng.normal(size=dims[i].r) for i in range(n)}
    gE, gI = {}, {}
    for i in range(n):
        e = np.zeros(dims[i].mE)
        q = np.zeros(dims[i].mI)
        for j in (i,) + graph.adj[i]:
            if (i, j) in AE:
                e += AE[(i, j)] @ x0[j]
            if (i, j) in AI:
                q += AI[(i, j)] @ x0[j]
        slack = np.where(rng.random(dims[i].mI) < active_frac, 0.0, rng.uniform(0.1, 1.0, dims[i].mI))
        gE[i] = e
        gI[i] = q - slack
    return BlockQP(graph, Q, AE, AI, f, gE, gI)


def topology(kind: str, n: int, rng: np.random.Generator | None = None) -> NodeGraph:
    """``path``, ``ring``, ``grid`` (near-square) or ``random`` graph on about ``n`` nodes."""
    if kind == "path":
        return path_graph(n)
    if kind == "ring":
        return ring_graph(n)
    if kind == "grid":
        rows = max(1, int(np.sqrt(n)))
        return grid_graph(rows, max(1, n // rows))
    if kind == "random":
        rng = rng or np.random.default_rng(0)
        return random_graph(n, 2.0 / max(n, 2), rng)
    raise ValueError(f"unknown topology {kind!r}")


def diagonally_dominant_qp(
    graph: NodeGraph,
    rng: np.random.Generator,
    coupling: float = 0.1,
    bounds: bool = False,
) -> BlockQP:
    """Scalar-per-node QP with unit diagonal and off-diagonals of size ``coupling``.

    Eigenvalues of the assembled Q (and of every principal submatrix) lie in
    ``[1 - deg_max * coupling, 1 + deg_max * coupling]``. With ``bounds`` each
    node gets a loose box ``-10 <= x_i <= 10`` that stays inactive for the
    generated linear terms.
    """
    n = graph.n_nodes
    mI = 2 if bounds else 0
    graph = graph.with_dims([NodeDims(1, 0, mI)] * n)
    Q = {(i, i): np.eye(1) for i in range(n)}
    for i, j in graph.edges():
        Q[(i, j)] = np.array([[coupling * rng.choice([-1.0, 1.0])]])
    AI = {(i, i): np.array([[1.0], [-1.0]]) for i in range(n)} if bounds else {}
    f = {i: rng.uniform(-1, 1, 1) for i in range(n)}
    gI = {i: np.array([-10.0, -10.0]) if bounds else np.zeros(0) for i in range(n)}
    gE = {i: np.zeros(0) for i in range(n)}
    return BlockQP(graph, Q, {}, AI, f, gE, gI)
