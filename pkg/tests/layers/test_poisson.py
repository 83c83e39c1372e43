import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_almost_equal, assert_array_equal
from scipy import linalg

from metriforge.autodiff import tensor as T
from metriforge.autodiff.gradcheck import check_gradients
from metriforge.errors import UnsupportedError
from metriforge.graph.system import ScreenedSystem, assemble_dense
from metriforge.graph.topology import GraphTopology, complete_topology, grid_topology
from metriforge.layers.parameters import FeedbackParameters, PoissonLayerParameters, load_layer_config
from metriforge.layers.poisson import (
    LayerHeads,
    RoundState,
    conductances,
    directional_scans,
    dissipation_readout,
    init_layer_params,
    initial_state,
    normalize_fields,
    round_temperature,
    run_round,
    run_rounds,
)
from metriforge.solvers.cg import CgConfig


def small_config(**overrides):
    config = dict(
        fields=2,
        rounds=1,
        classes=3,
        input_dim=2,
        feature_dim=4,
        hidden_widths=[6],
        solver=CgConfig(max_iters=200, rel_tol=1e-12),
    )
    config.update(overrides)
    return PoissonLayerParameters(**config)


def randomize_decoder(params, seed=0):
    rng = np.random.default_rng(seed)
    last = max(int(name.split(".")[1]) for name in params.names() if name.startswith("decoder."))
    name = f"decoder.{last}.w"
    params.set(name, rng.normal(0.0, 0.5, params[name].shape))
    return params


def test_conductances_at_zero_features():
    topology = grid_topology(3, 3)
    w = conductances(np.zeros((9, 4)), np.random.default_rng(0).normal(size=(4, 4)), topology)
    assert_allclose(w.numpy(), np.log(2.0))


def test_antisymmetric_form_vanishes():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=(4, 4))
    topology = grid_topology(2, 3)
    w = conductances(rng.normal(size=(6, 4)), raw - raw.T, topology)
    assert_allclose(w.numpy(), np.log(2.0))


def test_conductance_symmetric_in_endpoints():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(2, 5))
    raw = rng.normal(size=(5, 5))
    topology = GraphTopology(n_nodes=2, edges=[[0, 1]])
    forward = conductances(h, raw, topology).numpy()
    swapped = conductances(h[::-1], raw, topology).numpy()
    assert_array_equal(forward, swapped)
    assert np.all(forward > 0)


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_reversed_node_order_gives_identical_conductances(seed):
    rng = np.random.default_rng(seed)
    n, d = 12, 6
    h, raw = rng.normal(size=(n, d)), rng.normal(size=(d, d))
    topology = complete_topology(n)
    forward = conductances(h, raw, topology).numpy()
    reversed_ = conductances(h[::-1], raw, topology).numpy()
    index = {(int(i), int(j)): k for k, (i, j) in enumerate(topology.edges)}
    mirrored = [reversed_[index[(n - 1 - int(j), n - 1 - int(i))]] for i, j in topology.edges]
    assert_array_equal(forward, mirrored)


def test_scans_of_constant_field_vanish():
    scans = directional_scans(np.full((12, 2), 3.0), grid_topology(3, 4)).numpy()
    assert scans.shape == (12, 16)
    assert_array_equal(scans, 0.0)


def test_east_scan_is_exclusive_prefix():
    psi = np.array([[1.0], [2.0], [4.0]])
    a, b, _ = normalize_fields(psi).numpy()[:, 0]
    east = directional_scans(psi, grid_topology(1, 3)).numpy()[:, 2]
    assert_allclose(east, [0.0, a, a + b], atol=1e-15)


def test_west_scan_mirrors_east():
    rng = np.random.default_rng(3)
    psi = rng.normal(size=(4, 5))
    topology = grid_topology(4, 5)
    field = psi.reshape(20, 1)
    mirrored = psi[:, ::-1].reshape(20, 1)
    west = directional_scans(field, topology).numpy()[:, 3].reshape(4, 5)
    east_of_mirror = directional_scans(mirrored, topology).numpy()[:, 2].reshape(4, 5)
    assert_allclose(west, east_of_mirror[:, ::-1], atol=1e-12)


def test_scans_need_a_grid():
    with pytest.raises(UnsupportedError):
        directional_scans(np.ones((4, 1)), complete_topology(4))


def test_dissipation_two_nodes():
    system = ScreenedSystem(
        topology=GraphTopology(n_nodes=2, edges=[[0, 1]]), conductance=[1.0], damping=[1.0, 1.0]
    )
    assert_array_equal(dissipation_readout(system, np.array([1.0, 0.0])), [1.0, 1.0])
    assert_array_equal(dissipation_readout(system, np.array([2.0, 2.0])), [0.0, 0.0])


def test_dissipation_totals_twice_edge_energy():
    rng = np.random.default_rng(4)
    topology = grid_topology(4, 4, 8)
    w = rng.uniform(0.1, 2.0, topology.n_edges)
    system = ScreenedSystem(topology=topology, conductance=w, damping=np.ones(16))
    psi = rng.normal(size=(16, 3))
    readout = dissipation_readout(system, psi)
    assert np.all(readout >= 0)
    for k in range(3):
        diff = psi[topology.heads, k] - psi[topology.tails, k]
        assert_almost_equal(readout[:, k].sum(), 2 * np.sum(w * diff**2))


@pytest.mark.parametrize(
    "r,rounds,expected",
    [(0, 32, 1.0), (31, 32, 0.2), (16, 32, 0.5871), (0, 1, 1.0)],
)
def test_round_temperature(r, rounds, expected):
    assert_almost_equal(round_temperature(r, rounds), expected, decimal=4)


def test_round_state_requires_simplex_rows():
    with pytest.raises(ValueError):
        RoundState(
            psi=T.Tensor(np.zeros((2, 1))),
            prev_soft_pred=T.Tensor(np.ones((2, 3))),
            round_index=0,
            rounds=1,
            tau=1.0,
        )


def test_cold_start_is_uniform():
    cfg = small_config()
    state = initial_state(9, cfg)
    assert_allclose(state.prev_soft_pred.numpy(), 1.0 / 3)
    assert_array_equal(state.psi.numpy(), 0.0)


def test_untrained_layer_predicts_uniformly():
    cfg = small_config()
    params = init_layer_params(cfg)
    topology = grid_topology(3, 3)
    x = np.random.default_rng(0).normal(size=(9, 2))
    (state,) = run_rounds(LayerHeads(params.constants(), cfg), topology, cfg, x)
    assert_allclose(state.prev_soft_pred.numpy(), 1.0 / 3)


def test_round_is_pure():
    cfg = small_config(rounds=2)
    params = randomize_decoder(init_layer_params(cfg, seed=5))
    topology = grid_topology(3, 4)
    x = np.random.default_rng(1).normal(size=(12, 2))
    first = run_rounds(LayerHeads(params.constants(), cfg), topology, cfg, x)
    second = run_rounds(LayerHeads(params.constants(), cfg), topology, cfg, x)
    for a, b in zip(first, second):
        assert_array_equal(a.logits.numpy(), b.logits.numpy())
        assert_array_equal(a.psi.numpy(), b.psi.numpy())


@pytest.mark.parametrize("seed", range(3))
def test_every_round_is_positive_definite(seed):
    cfg = small_config(rounds=3, objects=2)
    params = randomize_decoder(init_layer_params(cfg, seed=seed), seed)
    topology = grid_topology(4, 4, 8)
    x = np.random.default_rng(seed).normal(size=(16, 2)) * 3
    for state in run_rounds(LayerHeads(params.constants(), cfg), topology, cfg, x):
        for k in range(cfg.fields):
            system = ScreenedSystem(
                topology=topology,
                conductance=state.conductance.numpy(),
                damping=state.damping.numpy()[:, k],
            )
            assert linalg.eigvalsh(assemble_dense(system))[0] > 0


def test_round_index_advances_with_feedback():
    cfg = small_config(rounds=3)
    params = randomize_decoder(init_layer_params(cfg))
    states = run_rounds(
        LayerHeads(params.constants(), cfg), grid_topology(3, 3), cfg, np.ones((9, 2))
    )
    assert [s.round_index for s in states] == [0, 1, 2]
    assert_almost_equal([s.tau for s in states], [1.0, 0.6, 0.2])


def _layer_loss(cfg, topology, x, target):
    def fn(view):
        states = run_rounds(LayerHeads(view, cfg), topology, cfg, x)
        return T.tsum(states[-1].logits * target)

    return fn


@pytest.mark.parametrize(
    "overrides", [{}, {"rounds": 2}, {"objects": 2}, {"lambda_over_n": True}]
)
def test_layer_gradients(overrides):
    cfg = small_config(**overrides)
    params = randomize_decoder(init_layer_params(cfg, seed=3), seed=3)
    topology = grid_topology(3, 3)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(9, 2))
    target = rng.normal(size=(9, 3))
    inputs = dict(params.items())
    rows = check_gradients(
        _layer_loss(cfg, topology, x, target), inputs, tolerance=1e-3, max_entries=4
    )
    assert all(row.passed for row in rows), [row for row in rows if not row.passed]


def test_config_from_json(tmp_path):
    path = tmp_path / "layer.json"
    path.write_text(
        '{"fields": 4, "rounds": 3, "hidden_widths": [8, 8], "objects": 2,'
        ' "feedback": {"tau_start": 1.0, "tau_end": 0.2}}'
    )
    cfg = load_layer_config(path)
    assert cfg.fields == 4
    assert cfg.objects == 2
    assert cfg.feedback.tau_end == 0.2


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        PoissonLayerParameters(depth=3)


@pytest.mark.parametrize(
    "feedback",
    [
        {"tau_start": 1.5},
        {"tau_start": 0.0},
        {"tau_end": 0.1},
        {"tau_end": -0.2},
        {"tau_start": 0.3, "tau_end": 0.8},
    ],
)
def test_feedback_temperatures_are_bounded_and_annealed(feedback):
    with pytest.raises(ValueError):
        FeedbackParameters(**feedback)
    with pytest.raises(ValueError):
        small_config(feedback=feedback)


def test_constant_feedback_temperature_is_allowed():
    cfg = small_config(rounds=3, feedback={"tau_start": 0.5, "tau_end": 0.5})
    params = randomize_decoder(init_layer_params(cfg))
    states = run_rounds(
        LayerHeads(params.constants(), cfg), grid_topology(3, 3), cfg, np.ones((9, 2))
    )
    assert [s.tau for s in states] == [0.5, 0.5, 0.5]


def test_round_state_rejects_temperature_outside_schedule():
    with pytest.raises(ValueError):
        RoundState(
            psi=T.Tensor(np.zeros((2, 1))),
            prev_soft_pred=T.Tensor(np.full((2, 3), 1.0 / 3)),
            round_index=0,
            rounds=1,
            tau=0.05,
        )
