import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import linalg

from metriforge.autodiff import tensor as T
from metriforge.autodiff.gradcheck import check_gradients
from metriforge.errors import ContractError, ConvergenceError, DimensionError
from metriforge.graph.system import ScreenedSystem, assemble_dense, field_systems
from metriforge.graph.topology import GraphTopology, grid_topology
from metriforge.solvers.cg import (
    CgConfig,
    Preconditioner,
    cg_solve,
    cg_solve_grad,
    screened_solve,
    solve_k_fields,
)


def two_node_system():
    topology = GraphTopology(n_nodes=2, edges=[[0, 1]])
    return ScreenedSystem(topology=topology, conductance=[1.0], damping=[2.0, 2.0])


def random_topology(n, rng, edge_prob=0.2):
    i, j = np.triu_indices(n, k=1)
    keep = rng.random(len(i)) < edge_prob
    return GraphTopology(n_nodes=n, edges=np.stack([i[keep], j[keep]], axis=1))


def random_system(n, seed):
    rng = np.random.default_rng(seed)
    topology = random_topology(n, rng)
    return ScreenedSystem(
        topology=topology,
        conductance=rng.uniform(0.1, 1.0, topology.n_edges),
        damping=rng.uniform(0.5, 2.0, n),
    )


def test_two_node_solution():
    record = cg_solve(two_node_system(), np.array([1.0, 0.0]))
    assert_allclose(record.solution, [3 / 8, 1 / 8], rtol=1e-12)
    assert record.relative_residual <= 1e-10


def test_zero_source_returns_immediately():
    record = cg_solve(two_node_system(), np.zeros(2))
    assert record.iterations == 0
    assert_array_equal(record.solution, [0.0, 0.0])


@pytest.mark.parametrize("preconditioner", list(Preconditioner))
def test_matches_dense_solve(preconditioner):
    system = random_system(100, 0)
    b = np.random.default_rng(1).normal(size=100)
    cfg = CgConfig(max_iters=105, preconditioner=preconditioner)
    record = cg_solve(system, b, cfg)
    expected = linalg.solve(assemble_dense(system), b, assume_a="pos")
    assert np.linalg.norm(record.solution - expected) / np.linalg.norm(expected) <= 1e-8


@settings(deadline=None, max_examples=200)
@given(st.integers(1, 200), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_solver_oracle(n, n_fields, seed):
    rng = np.random.default_rng(seed)
    topology = random_topology(n, rng, edge_prob=min(1.0, 4.0 / n))
    w = rng.uniform(0.1, 1.0, topology.n_edges)
    damping = rng.uniform(0.5, 2.0, (n, n_fields))
    b = rng.normal(size=(n, n_fields))
    systems = field_systems(topology, w, damping)
    records = solve_k_fields(systems, b, CgConfig(max_iters=n + 5))
    for k, record in enumerate(records):
        assert record.iterations <= n + 5
        expected = linalg.solve(assemble_dense(systems[k]), b[:, k], assume_a="pos")
        error = np.linalg.norm(record.solution - expected) / np.linalg.norm(expected)
        assert error <= 1e-8


def test_non_convergence_carries_residual():
    system = random_system(80, 2)
    b = np.random.default_rng(3).normal(size=80)
    with pytest.raises(ConvergenceError) as excinfo:
        cg_solve(system, b, CgConfig(max_iters=2))
    assert excinfo.value.iterations == 2
    assert excinfo.value.residual > 1e-10


def test_cg_config_rejects_bad_values():
    with pytest.raises(ValueError):
        CgConfig(max_iters=0)
    with pytest.raises(ValueError):
        CgConfig(rel_tol=-1.0)
    with pytest.raises(ValueError):
        CgConfig(tolerance=1e-3)


def test_solve_length_mismatch():
    with pytest.raises(DimensionError):
        cg_solve(two_node_system(), np.ones(3))


def test_zero_upstream_gives_zero_gradients():
    system = two_node_system()
    b = np.array([1.0, 0.0])
    psi = cg_solve(system, b).solution
    grads = cg_solve_grad(system, b, psi, np.zeros(2))
    for grad in grads:
        assert_array_equal(grad, np.zeros_like(grad))


@pytest.mark.parametrize("seed", range(5))
def test_adjoint_matches_dense_inverse(seed):
    system = random_system(40, seed)
    rng = np.random.default_rng(seed)
    b, upstream = rng.normal(size=40), rng.normal(size=40)
    psi = cg_solve(system, b, CgConfig(max_iters=200)).solution
    grads = cg_solve_grad(system, b, psi, upstream, CgConfig(max_iters=200))
    expected = linalg.solve(assemble_dense(system), upstream, assume_a="pos")
    assert_allclose(grads.grad_b, expected, atol=1e-8)


def _solve_loss(topology, cfg):
    def fn(v):
        psi = screened_solve(topology, v["w"], v["lam"], v["b"], cfg)
        return T.tsum(psi * psi)

    return fn


def test_two_node_gradients():
    topology = GraphTopology(n_nodes=2, edges=[[0, 1]])
    inputs = {"w": np.array([1.0]), "lam": np.array([2.0, 2.0]), "b": np.array([1.0, 0.0])}
    rows = check_gradients(_solve_loss(topology, CgConfig()), inputs, tolerance=1e-5)
    assert all(row.passed for row in rows), rows


@pytest.mark.parametrize("seed", range(20))
def test_implicit_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 51))
    topology = random_topology(n, rng, edge_prob=min(1.0, 4.0 / n))
    inputs = {
        "w": rng.uniform(0.2, 2.0, topology.n_edges),
        "lam": rng.uniform(0.2, 2.0, n),
        "b": rng.normal(size=n),
    }
    cfg = CgConfig(max_iters=n + 20, rel_tol=1e-12)
    rows = check_gradients(_solve_loss(topology, cfg), inputs, tolerance=1e-4, max_entries=12)
    assert all(row.passed for row in rows), rows


def test_k_field_gradients():
    topology = grid_topology(3, 3)
    rng = np.random.default_rng(5)
    inputs = {
        "w": rng.uniform(0.2, 2.0, topology.n_edges),
        "lam": rng.uniform(0.2, 2.0, (9, 3)),
        "b": rng.normal(size=(9, 3)),
    }
    rows = check_gradients(_solve_loss(topology, CgConfig(max_iters=50, rel_tol=1e-12)), inputs)
    assert all(row.passed for row in rows), rows


def test_backward_records_adjoint():
    topology = GraphTopology(n_nodes=2, edges=[[0, 1]])
    records = []
    tape = T.Tape()
    b = tape.watch([1.0, 0.0])
    psi = screened_solve(topology, [1.0], [2.0, 2.0], b, records=records)
    tape.backward(T.tsum(psi))
    assert records[0].adjoint is not None
    assert_allclose(tape.gradient(b), records[0].adjoint)


def test_k1_reduces_to_single_solve():
    system = random_system(30, 4)
    b = np.random.default_rng(4).normal(size=30)
    single = cg_solve(system, b)
    (field,) = solve_k_fields([system], b[:, None])
    assert_array_equal(single.solution, field.solution)


def test_identical_fields_give_identical_solutions():
    system = random_system(30, 6)
    b = np.random.default_rng(6).normal(size=30)
    records = solve_k_fields([system] * 3, np.stack([b] * 3, axis=1))
    for record in records[1:]:
        assert_array_equal(record.solution, records[0].solution)


def test_parallel_matches_sequential():
    rng = np.random.default_rng(7)
    topology = random_topology(60, rng)
    w = rng.uniform(0.1, 2.0, topology.n_edges)
    systems = field_systems(topology, w, rng.uniform(0.5, 2.0, (60, 4)))
    b = rng.normal(size=(60, 4))
    cfg = CgConfig(max_iters=200)
    sequential = solve_k_fields(systems, b, cfg, threads=1)
    parallel = solve_k_fields(systems, b, cfg, threads=4)
    for s, p in zip(sequential, parallel):
        assert_array_equal(s.solution, p.solution)


def test_field_error_carries_index():
    rng = np.random.default_rng(8)
    topology = random_topology(50, rng)
    w = rng.uniform(0.1, 2.0, topology.n_edges)
    damping = np.full((50, 2), 1e-6)
    damping[:, 0] = 1e6
    b = rng.normal(size=(50, 2))
    with pytest.raises(ConvergenceError) as excinfo:
        solve_k_fields(field_systems(topology, w, damping), b, CgConfig(max_iters=3))
    assert excinfo.value.field == 1
    assert isinstance(excinfo.value.__cause__, ConvergenceError)


def test_fields_must_share_conductances():
    topology = GraphTopology(n_nodes=2, edges=[[0, 1]])
    a = ScreenedSystem(topology=topology, conductance=[1.0], damping=[1.0, 1.0])
    b = ScreenedSystem(topology=topology, conductance=[2.0], damping=[1.0, 1.0])
    with pytest.raises(ContractError):
        solve_k_fields([a, b], np.ones((2, 2)))
