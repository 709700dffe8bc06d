"""Undirected node graphs, induced-subgraph distances, partitioning and overlap expansion."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Sentinel for "no path inside the induced subgraph". Compares greater than any
# valid hop count, so min/max logic needs no special casing.
UNREACHABLE = float("inf")


class GraphError(ValueError):
    pass


class NodeNotInSubsetError(GraphError):
    pass


class EmptySetError(GraphError):
    pass


class InvalidPartitionError(GraphError):
    pass


@dataclass(frozen=True)
class NodeDims:
    r: int
    mE: int = 0
    mI: int = 0

    @property
    def m(self) -> int:
        return self.mE + self.mI

    @property
    def n(self) -> int:
        return self.r + self.mE + self.mI


class NodeGraph:
    """Undirected simple graph on dense node ids ``0..N-1``.

    Each node carries the sizes of its primal block and its equality and
    inequality constraint blocks. ``labels`` keeps the external ids the
    graph was ingested from (bus numbers, for example).
    """

    def __init__(
        self,
        n_nodes: int,
        edges: Iterable[tuple[int, int]],
        dims: Sequence[NodeDims | tuple[int, int, int]] | None = None,
        labels: Sequence[object] | None = None,
    ):
        if n_nodes < 0:
            raise GraphError("negative node count")
        adj: list[set[int]] = [set() for _ in range(n_nodes)]
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise GraphError(f"edge ({i}, {j}) references unknown node")
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            adj[i].add(j)
            adj[j].add(i)
        self.adj: tuple[tuple[int, ...], ...] = tuple(tuple(sorted(a)) for a in adj)
        if dims is None:
            dims = [NodeDims(1, 0, 0)] * n_nodes
        if len(dims) != n_nodes:
            raise GraphError("dims length does not match node count")
        self.dims: tuple[NodeDims, ...] = tuple(
            d if isinstance(d, NodeDims) else NodeDims(*d) for d in dims
        )
        for i, d in enumerate(self.dims):
            if d.r < 1 or d.mE < 0 or d.mI < 0:
                raise GraphError(f"invalid dims {d} at node {i}")
        self.labels = tuple(labels) if labels is not None else tuple(range(n_nodes))

    @property
    def n_nodes(self) -> int:
        return len(self.adj)

    @property
    def nodes(self) -> range:
        return range(self.n_nodes)

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, a in enumerate(self.adj) for j in a if i < j]

    def has_edge(self, i: int, j: int) -> bool:
        a = self.adj[i]
        k = np.searchsorted(a, j)
        return k < len(a) and a[k] == j

    def degree(self, i: int) -> int:
        return len(self.adj[i])

    def with_dims(self, dims: Sequence[NodeDims | tuple[int, int, int]]) -> "NodeGraph":
        return NodeGraph(self.n_nodes, self.edges(), dims, self.labels)

    def __repr__(self) -> str:
        return f"NodeGraph(n_nodes={self.n_nodes}, n_edges={len(self.edges())})"


# -- constructors -----------------------------------------------------------


def path_graph(n: int, dims=None) -> NodeGraph:
    return NodeGraph(n, [(i, i + 1) for i in range(n - 1)], dims)


def ring_graph(n: int, dims=None) -> NodeGraph:
    edges = [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(0, 1)] if n == 2 else []
    return NodeGraph(n, edges, dims)


def grid_graph(rows: int, cols: int, dims=None) -> NodeGraph:
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return NodeGraph(rows * cols, edges, dims)


def random_graph(n: int, p: float, rng: np.random.Generator, connected: bool = True) -> NodeGraph:
    """Erdos-Renyi graph; with ``connected`` a random spanning tree is added first."""
    edges = set()
    if connected and n > 1:
        order = rng.permutation(n)
        for k in range(1, n):
            a, b = int(order[k]), int(order[rng.integers(0, k)])
            edges.add((min(a, b), max(a, b)))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.add((i, j))
    return NodeGraph(n, sorted(edges))


# -- distances --------------------------------------------------------------


def _as_set(graph: NodeGraph, U) -> frozenset[int]:
    if U is None:
        return frozenset(graph.nodes)
    return frozenset(int(u) for u in U)


def bfs_distances(graph: NodeGraph, U, sources: Iterable[int], limit: float = UNREACHABLE) -> dict[int, int]:
    """Multi-source BFS restricted to the subgraph induced by ``U``.

    Returns hop counts for every node of ``U`` reachable within ``limit``.
    """
    Uset = _as_set(graph, U)
    dist: dict[int, int] = {}
    queue: deque[int] = deque()
    for s in sources:
        if s not in dist:
            dist[s] = 0
            queue.append(s)
    while queue:
        u = queue.popleft()
        du = dist[u]
        if du >= limit:
            continue
        for v in graph.adj[u]:
            if v in Uset and v not in dist:
                dist[v] = du + 1
                queue.append(v)
    return dist


def geodesic_distance(graph: NodeGraph, U, i: int, j: int) -> float:
    """Hop distance between ``i`` and ``j`` using only edges inside ``U``.

    Returns :data:`UNREACHABLE` when no such path exists.
    """
    Uset = _as_set(graph, U)
    for v in (i, j):
        if v not in Uset:
            raise NodeNotInSubsetError(f"node {v} is not in the subset")
    if i == j:
        return 0
    d = bfs_distances(graph, Uset, [i]).get(j)
    return UNREACHABLE if d is None else d


def set_distance(graph: NodeGraph, U, A, B) -> float:
    """min over (a, b) in A x B of the induced-subgraph distance (multi-source BFS)."""
    Uset = _as_set(graph, U)
    A, B = set(A), set(B)
    if not A or not B:
        raise EmptySetError("set_distance needs nonempty node sets")
    if not (A <= Uset and B <= Uset):
        raise NodeNotInSubsetError("A and B must be subsets of U")
    if A & B:
        return 0
    dist = bfs_distances(graph, Uset, sorted(A))
    hits = [dist[b] for b in B if b in dist]
    return min(hits) if hits else UNREACHABLE


def distance_matrix(graph: NodeGraph, U) -> tuple[list[int], np.ndarray]:
    """All-pairs induced distances on ``U`` (sorted node order), ``inf`` when unreachable."""
    nodes = sorted(_as_set(graph, U))
    pos = {v: k for k, v in enumerate(nodes)}
    D = np.full((len(nodes), len(nodes)), np.inf)
    for v in nodes:
        for w, d in bfs_distances(graph, nodes, [v]).items():
            D[pos[v], pos[w]] = d
    return nodes, D


def coupled_complement(graph: NodeGraph, V, U) -> list[int]:
    """Nodes of ``V`` outside ``U`` adjacent to some node of ``U``, sorted."""
    Vset = _as_set(graph, V)
    Uset = _as_set(graph, U)
    out = set()
    for i in Uset:
        for j in graph.adj[i]:
            if j in Vset and j not in Uset:
                out.add(j)
    return sorted(out)


# -- partitions -------------------------------------------------------------


@dataclass
class OverlapPartition:
    original: list[list[int]]
    expanded: list[list[int]]
    omega: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.original)

    def validate(self, nodes: Iterable[int]) -> None:
        nodes = set(nodes)
        seen: set[int] = set()
        for k, Vk in enumerate(self.original):
            if not Vk:
                raise InvalidPartitionError(f"subdomain {k} is empty")
            s = set(Vk)
            if s & seen:
                raise InvalidPartitionError(f"subdomain {k} overlaps an earlier subdomain")
            seen |= s
        if seen != nodes:
            raise InvalidPartitionError("subdomains do not cover the node set")
        if len(self.expanded) != len(self.original):
            raise InvalidPartitionError("expanded/original length mismatch")
        for k, (Vk, Wk) in enumerate(zip(self.original, self.expanded)):
            if not set(Vk) <= set(Wk) <= nodes:
                raise InvalidPartitionError(f"need V_k <= W_k <= V for subdomain {k}")

    def labels(self, n_nodes: int) -> np.ndarray:
        lab = np.full(n_nodes, -1, dtype=int)
        for k, Vk in enumerate(self.original):
            lab[Vk] = k
        return lab


def _farthest_point_seeds(graph: NodeGraph, nodes: list[int], K: int, rng: np.random.Generator) -> list[int]:
    seeds = [nodes[int(rng.integers(len(nodes)))]]
    best = np.full(graph.n_nodes, np.inf)
    while len(seeds) < K:
        d = bfs_distances(graph, nodes, [seeds[-1]])
        for v in nodes:
            best[v] = min(best[v], d.get(v, np.inf))
        # unreachable nodes (other components) are the farthest of all
        cand = [v for v in nodes if v not in seeds]
        far = max(best[v] for v in cand)
        seeds.append(min(v for v in cand if best[v] == far))
    return seeds


def partition(graph: NodeGraph, K: int, seed: int = 0, nodes=None) -> OverlapPartition:
    """Balanced greedy multi-source BFS growth from farthest-point seeds.

    Blocks grow one node at a time, smallest block first, each absorbing the
    unassigned frontier node nearest its seed (lowest id on ties), until
    they reach ``ceil(N / K)`` nodes. Nodes no growing block can reach are
    attached to the smallest adjacent block, or the smallest block overall.
    """
    nodes = sorted(_as_set(graph, nodes))
    N = len(nodes)
    if not 1 <= K <= N:
        raise InvalidPartitionError(f"K must satisfy 1 <= K <= {N}, got {K}")
    rng = np.random.default_rng(seed)
    if K == 1:
        return OverlapPartition([list(nodes)], [list(nodes)], 0)
    if K == N:
        blocks = [[v] for v in nodes]
        return OverlapPartition(blocks, [list(b) for b in blocks], 0)

    seeds = _farthest_point_seeds(graph, nodes, K, rng)
    seed_dist = [bfs_distances(graph, nodes, [s]) for s in seeds]
    owner = {s: k for k, s in enumerate(seeds)}
    blocks = [[s] for s in seeds]
    target = -(-N // K)
    nodeset = set(nodes)
    active = set(range(K))
    while len(owner) < N and active:
        k = min(active, key=lambda b: (len(blocks[b]), b))
        frontier = {v for u in blocks[k] for v in graph.adj[u] if v in nodeset and v not in owner}
        if not frontier or len(blocks[k]) >= target:
            active.discard(k)
            continue
        v = min(frontier, key=lambda w: (seed_dist[k].get(w, np.inf), w))
        owner[v] = k
        blocks[k].append(v)

    # leftovers: unreachable from any non-full block
    pending = [v for v in nodes if v not in owner]
    while pending:
        progress = False
        for v in list(pending):
            nbr = {owner[w] for w in graph.adj[v] if w in owner}
            if nbr:
                k = min(nbr, key=lambda b: (len(blocks[b]), b))
                owner[v] = k
                blocks[k].append(v)
                pending.remove(v)
                progress = True
        if not progress:
            v = pending.pop(0)
            k = min(range(K), key=lambda b: (len(blocks[b]), b))
            owner[v] = k
            blocks[k].append(v)
    _rebalance(graph, nodeset, blocks, owner, seed_dist)
    blocks = [sorted(b) for b in blocks]
    return OverlapPartition(blocks, [list(b) for b in blocks], 0, {"seeds": seeds, "seed": seed})


def _connected_without(graph: NodeGraph, block: list[int], v: int) -> bool:
    rest = set(block) - {v}
    if not rest:
        return False
    start = next(iter(rest))
    return len(bfs_distances(graph, rest, [start])) == len(rest)


def _rebalance(graph: NodeGraph, nodeset: set[int], blocks: list[list[int]], owner: dict[int, int], seed_dist) -> None:
    """Shift nodes along chains of adjacent blocks until sizes differ by at most one.

    Each transfer moves one boundary node per hop from a large block towards
    a small one, so intermediate blocks keep their size. A move never
    disconnects its donor block; among admissible nodes the one farthest
    from the donor's seed goes first. Stops when no chain is admissible.
    """
    K = len(blocks)

    def pick(a: int, c: int):
        cand = [v for v in blocks[a] if any(owner.get(w) == c for w in graph.adj[v])]
        cand.sort(key=lambda v: (-seed_dist[a].get(v, 0), v))
        for v in cand:
            if _connected_without(graph, blocks[a], v):
                return v
        return None

    for _ in range(len(nodeset) * K):
        sizes = [len(b) for b in blocks]
        pairs = sorted(
            ((sizes[a] - sizes[c], a, c) for a in range(K) for c in range(K) if sizes[a] - sizes[c] >= 2),
            key=lambda t: (-t[0], t[1], t[2]),
        )
        done = False
        for _, a, c in pairs:
            # BFS over the block adjacency graph, edges admissible for a move
            prev = {a: None}
            queue = deque([a])
            while queue and c not in prev:
                u = queue.popleft()
                for w in range(K):
                    if w not in prev and pick(u, w) is not None:
                        prev[w] = u
                        queue.append(w)
            if c not in prev:
                continue
            chain = [c]
            while prev[chain[-1]] is not None:
                chain.append(prev[chain[-1]])
            chain.reverse()
            ok = True
            for t in range(len(chain) - 2, -1, -1):
                src, dst = chain[t], chain[t + 1]
                v = pick(src, dst)
                if v is None:
                    ok = False
                    break
                blocks[src].remove(v)
                blocks[dst].append(v)
                owner[v] = dst
            if ok:
                done = True
                break
        if not done:
            return


def expand(graph: NodeGraph, part: OverlapPartition, omega: int, nodes=None) -> OverlapPartition:
    """W_k = {i in V : dist_V(i, V_k) <= omega} for every block."""
    if omega < 0:
        raise InvalidPartitionError("omega must be nonnegative")
    V = sorted(_as_set(graph, nodes) if nodes is not None else {v for b in part.original for v in b})
    part.validate(V)
    expanded = [sorted(bfs_distances(graph, V, Vk, limit=omega)) for Vk in part.original]
    return OverlapPartition([list(b) for b in part.original], expanded, omega, dict(part.meta))


def overlap_size(graph: NodeGraph, V, part: OverlapPartition) -> float:
    """min_k dist_V(V_k, N_V(W_k)) - 1; ``inf`` when every W_k has an empty boundary."""
    vals = []
    for Vk, Wk in zip(part.original, part.expanded):
        bnd = coupled_complement(graph, V, Wk)
        if bnd:
            vals.append(set_distance(graph, V, Vk, bnd) - 1)
    return min(vals) if vals else UNREACHABLE


# -- edge-list io -------------------------------------------------------------


def write_edge_list(graph: NodeGraph, path) -> None:
    lines = [f"nodes {graph.n_nodes}"] + [f"{i} {j}" for i, j in graph.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path, dims=None) -> NodeGraph:
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise GraphError("empty edge-list file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "nodes":
        raise GraphError("edge-list header must be 'nodes N'")
    n = int(head[1])
    edges = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 2:
            raise GraphError(f"line {lineno}: expected 'i j'")
        edges.append((int(parts[0]), int(parts[1])))
    return NodeGraph(n, edges, dims)
