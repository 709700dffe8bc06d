import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_coupling, dense_problem, kkt_residual_oracle
from schwarzqp.graph import NodeDims, NodeGraph, partition, path_graph, random_graph
from schwarzqp.model import (
    BlockQP,
    DimensionMismatchError,
    InconsistentBlockError,
    Layout,
    PrimalDualPoint,
    SubsetError,
    assemble,
    blockqp_from_dict,
    blockqp_to_dict,
    coupling,
    coupling_matrix,
    kkt_matrix,
    kkt_residual,
    load_blockqp,
    modified_data,
    restrict,
    save_blockqp,
    scatter,
    stack_node_data,
)
from schwarzqp.synthetic import random_graph_qp


def _instance(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(3, 12))
    g = random_graph(n, 0.3, rng)
    return random_graph_qp(g, rng)


def _random_point(bqp, U, rng):
    p = PrimalDualPoint(Layout.of(bqp.graph, U))
    p.vec[:] = rng.normal(size=p.vec.size)
    return p


seeds = st.integers(0, 100_000)


# -- BlockQP validation -----------------------------------------------------------


def test_blocks_must_follow_edges_and_shapes():
    g = path_graph(3)
    f = {i: [0.0] for i in range(3)}
    BlockQP(g, {(0, 1): [[1.0]]}, {}, {}, f, {}, {})
    with pytest.raises(InconsistentBlockError, match="edge|adjacent"):
        BlockQP(g, {(0, 2): [[1.0]]}, {}, {}, f, {}, {})
    with pytest.raises(InconsistentBlockError, match="shape"):
        BlockQP(g, {(0, 0): [[1.0, 0.0]]}, {}, {}, f, {}, {})
    with pytest.raises(InconsistentBlockError, match="Q\\[1,0\\]"):
        BlockQP(g, {(0, 1): [[1.0]], (1, 0): [[2.0]]}, {}, {}, f, {}, {})
    with pytest.raises(InconsistentBlockError, match="missing"):
        BlockQP(g, {}, {}, {}, {}, {}, {})


def test_transposed_q_block_is_accepted_once():
    g = path_graph(2, dims=[(2, 0, 0), (1, 0, 0)])
    blk = np.array([[1.0], [2.0]])
    bqp = BlockQP(g, {(0, 1): blk, (1, 0): blk.T}, {}, {}, {0: [0.0, 0.0], 1: [0.0]}, {}, {})
    np.testing.assert_array_equal(bqp.q(1, 0), blk.T)


def test_json_round_trip(tmp_path):
    bqp = _instance(3)
    save_blockqp(bqp, tmp_path / "q.json")
    back = load_blockqp(tmp_path / "q.json")
    assert blockqp_to_dict(back) == blockqp_to_dict(bqp)
    assert blockqp_to_dict(blockqp_from_dict(blockqp_to_dict(bqp))) == blockqp_to_dict(bqp)


# -- assembly ---------------------------------------------------------------------


def test_assemble_single_node():
    g = NodeGraph(1, [])
    qp = assemble(BlockQP(g, {(0, 0): [[2.0]]}, {}, {}, {0: [1.0]}, {}, {}), [0])
    np.testing.assert_array_equal(qp.Q, [[2.0]])
    np.testing.assert_array_equal(qp.f, [1.0])
    assert qp.shape == (1, 0, 0)


def test_assemble_chain_places_offdiagonal():
    g = path_graph(2)
    qp = assemble(BlockQP(g, {(0, 0): [[2.0]], (1, 1): [[3.0]], (0, 1): [[0.5]]}, {}, {}, {0: [0.0], 1: [0.0]}, {}, {}), [0, 1])
    np.testing.assert_array_equal(qp.Q, [[2.0, 0.5], [0.5, 3.0]])


@given(seeds, st.booleans())
@settings(max_examples=30, deadline=None)
def test_assemble_matches_scatter_add(seed, sparse):
    bqp = _instance(seed)
    rng = np.random.default_rng(seed + 1)
    U = sorted(rng.choice(bqp.graph.n_nodes, size=int(rng.integers(1, bqp.graph.n_nodes + 1)), replace=False).tolist())
    qp = assemble(bqp, U, sparse=sparse)
    Q, AE, AI, f, gE, gI = dense_problem(bqp, U)
    dense = lambda M: M.toarray() if hasattr(M, "toarray") else M
    np.testing.assert_array_equal(dense(qp.Q), Q)
    np.testing.assert_array_equal(dense(qp.AE), AE)
    np.testing.assert_array_equal(dense(qp.AI), AI)
    np.testing.assert_array_equal(qp.f, f)
    np.testing.assert_array_equal(qp.gE, gE)
    np.testing.assert_array_equal(qp.gI, gI)


# -- coupling ---------------------------------------------------------------------


def test_coupling_examples():
    g = path_graph(3)
    bqp = BlockQP(g, {(0, 1): [[0.1]], (1, 2): [[0.2]]}, {}, {}, {i: [0.0] for i in range(3)}, {}, {})
    assert len(coupling(bqp, g.nodes, g.nodes)) == 0
    cb = coupling(bqp, g.nodes, [0, 1])
    assert cb.boundary == (2,) and list(cb.blocks) == [(1, 2)]
    with pytest.raises(SubsetError):
        coupling(bqp, [0, 1], [1, 2])


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_coupling_pairs_are_the_edge_cut(seed):
    bqp = _instance(seed)
    g = bqp.graph
    part = partition(g, min(3, g.n_nodes), seed=seed)
    for U in part.original:
        cb = coupling(bqp, g.nodes, U)
        cut = {(i, j) for i, j in g.edges() if (i in U) != (j in U)}
        cut = {(i, j) if i in U else (j, i) for i, j in cut}
        assert set(cb.blocks) == cut


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_coupling_matrix_matches_dense_oracle(seed):
    bqp = _instance(seed)
    g = bqp.graph
    U = partition(g, min(2, g.n_nodes), seed=seed).original[0]
    LU, LB, H = coupling_matrix(bqp, g.nodes, U)
    bnd, H2 = dense_coupling(bqp, g.nodes, U)
    assert list(LB.nodes) == bnd
    np.testing.assert_array_equal(H.toarray(), H2)


# -- modified data ---------------------------------------------------------------


def test_zero_boundary_leaves_data_unchanged():
    bqp = _instance(5)
    U = [0, 1]
    rest = [v for v in bqp.graph.nodes if v not in U]
    d = modified_data(bqp, U, PrimalDualPoint(Layout.of(bqp.graph, rest)))
    for i in U:
        np.testing.assert_array_equal(d[i].stacked(), bqp.data(i).stacked())


def test_modified_data_scalar_example():
    g = path_graph(2, dims=[(1, 1, 0), (1, 1, 0)])
    bqp = BlockQP(
        g,
        {(0, 0): [[1.0]], (1, 1): [[1.0]], (0, 1): [[0.5]]},
        {(0, 0): [[1.0]], (1, 1): [[1.0]], (0, 1): [[0.25]]},
        {},
        {0: [2.0], 1: [0.0]},
        {0: [3.0], 1: [0.0]},
        {},
    )
    zb = PrimalDualPoint(Layout.of(g, [1]))
    zb.vec[:] = [1.0, 0.0]
    d = modified_data(bqp, [0], zb)
    np.testing.assert_allclose(d[0].f, [2.0 - 0.5])
    np.testing.assert_allclose(d[0].gE, [3.0 - 0.25])


def test_modified_data_requires_full_boundary():
    bqp = _instance(7, n=6)
    U = [0]
    nb = list(bqp.graph.adj[0])
    with pytest.raises(DimensionMismatchError):
        modified_data(bqp, U, PrimalDualPoint(Layout.of(bqp.graph, nb[1:])), V=bqp.graph.nodes)


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_modified_data_matches_matrix_form(seed):
    bqp = _instance(seed)
    g = bqp.graph
    rng = np.random.default_rng(seed)
    U = partition(g, min(3, g.n_nodes), seed=seed).original[0]
    bnd, H = dense_coupling(bqp, g.nodes, U)
    zb = _random_point(bqp, bnd, rng)
    d = modified_data(bqp, U, zb, V=g.nodes)
    LU = Layout.of(g, U)
    expect = bqp.stacked_data(U) - H @ zb.vec
    np.testing.assert_allclose(stack_node_data(LU, d), expect, atol=1e-12)


# -- restrict / scatter -------------------------------------------------------------


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_restrict_scatter_round_trip(seed):
    bqp = _instance(seed)
    g = bqp.graph
    rng = np.random.default_rng(seed)
    z = _random_point(bqp, g.nodes, rng)
    assert np.array_equal(restrict(z, g.nodes).vec, z.vec)
    assert restrict(z, []).vec.size == 0
    part = partition(g, min(4, g.n_nodes), seed=seed)
    pieces = [restrict(z, Vk) for Vk in part.original]
    for p in pieces:
        for i in p.nodes:
            np.testing.assert_array_equal(p.z(i), z.z(i))
    back = scatter(pieces, nodes=g.nodes)
    np.testing.assert_array_equal(back.vec, z.vec)


def test_scatter_rejects_overlap_and_gaps():
    bqp = _instance(1, n=5)
    z = PrimalDualPoint(Layout.of(bqp.graph, bqp.graph.nodes))
    with pytest.raises(SubsetError):
        scatter([restrict(z, [0, 1]), restrict(z, [1, 2])])
    with pytest.raises(SubsetError):
        scatter([restrict(z, [0, 1])], nodes=bqp.graph.nodes)
    with pytest.raises(SubsetError):
        restrict(restrict(z, [0]), [1])


def test_point_dict_round_trip():
    bqp = _instance(11)
    z = _random_point(bqp, bqp.graph.nodes, np.random.default_rng(0))
    back = PrimalDualPoint.from_dict(bqp.graph, z.to_dict())
    np.testing.assert_array_equal(back.vec, z.vec)


# -- KKT residual -----------------------------------------------------------------


def test_residual_of_analytic_solution():
    # min 1/2 x^2 - 3x s.t. x >= 5  ->  x = 5, lamI = 2
    g = NodeGraph(1, [], dims=[NodeDims(1, 0, 1)])
    bqp = BlockQP(g, {(0, 0): [[1.0]]}, {}, {(0, 0): [[1.0]]}, {0: [3.0]}, {}, {0: [5.0]})
    z = PrimalDualPoint.from_compact(Layout.of(g, [0]), [5.0], [], [2.0])
    assert kkt_residual(bqp, [0], None, z).max() <= 1e-12


def test_residual_at_zero_is_data_norm():
    bqp = _instance(4)
    z = PrimalDualPoint(Layout.of(bqp.graph, bqp.graph.nodes))
    f = np.concatenate([bqp.f[i] for i in bqp.graph.nodes])
    assert kkt_residual(bqp, bqp.graph.nodes, None, z).stationarity == pytest.approx(np.abs(f).max())


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_residual_matches_oracle(seed):
    bqp = _instance(seed)
    U = list(bqp.graph.nodes)
    z = _random_point(bqp, U, np.random.default_rng(seed))
    res = kkt_residual(bqp, U, None, z)
    ref = kkt_residual_oracle(*dense_problem(bqp, U), *z.compact())
    np.testing.assert_allclose(res, ref, rtol=1e-12, atol=1e-12)


def test_kkt_matrix_symmetric_form():
    bqp = _instance(9)
    H = kkt_matrix(bqp, bqp.graph.nodes)
    np.testing.assert_array_equal(H, H.T)
