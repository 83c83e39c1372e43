import numpy as np
import pytest
from numpy.testing import assert_array_equal, assert_almost_equal

from metriforge.autodiff import tensor as T
from metriforge.autodiff.checkpoint import (
    MAGIC,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from metriforge.autodiff.gradcheck import check_gradients, numeric_gradient
from metriforge.autodiff.optim import Adam, AdamParameters
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tape
from metriforge.errors import ContractError


def _registry(seed=0):
    params = ModelParams(seed=seed)
    params.normal("encoder.w0", (3, 4), 0.5, group="encoder")
    params.zeros("encoder.b0", (4,), group="encoder")
    params.normal("W_raw", (4, 4), 0.1, group="conductance")
    return params


def test_registry_names_and_groups():
    params = _registry()
    assert params.names() == ["encoder.w0", "encoder.b0", "W_raw"]
    assert params.groups() == {
        "encoder": ["encoder.w0", "encoder.b0"],
        "conductance": ["W_raw"],
    }
    assert params.count() == 12 + 4 + 16


def test_duplicate_name_rejected():
    params = _registry()
    with pytest.raises(ValueError):
        params.zeros("W_raw", (4, 4))


def test_set_checks_shape():
    params = _registry()
    with pytest.raises(ValueError):
        params.set("encoder.b0", np.zeros(3))


def test_seeded_initialization_is_reproducible():
    assert_array_equal(_registry(3)["W_raw"], _registry(3)["W_raw"])
    assert not np.array_equal(_registry(3)["W_raw"], _registry(4)["W_raw"])


def test_collect_fills_gradient_slots():
    params = _registry()
    tape = Tape()
    watched = params.watch(tape)
    loss = T.tsum(watched["W_raw"] * 2.0)
    tape.backward(loss)
    params.collect(tape, watched)
    assert_array_equal(params.grad("W_raw"), np.full((4, 4), 2.0))
    assert_array_equal(params.grad("encoder.w0"), np.zeros((3, 4)))


def test_adam_minimizes_quadratic():
    params = ModelParams()
    params.add("x", [3.0, -2.0])
    optimizer = Adam(AdamParameters(lr=0.1, grad_clip=None))
    for _ in range(300):
        tape = Tape()
        watched = params.watch(tape)
        tape.backward(T.tsum(watched["x"] ** 2))
        params.collect(tape, watched)
        optimizer.step(params)
    assert_almost_equal(params["x"], [0.0, 0.0], decimal=2)


def test_adam_group_learning_rate():
    params = ModelParams()
    params.add("a", [1.0], group="fast")
    params.add("b", [1.0], group="frozen")
    optimizer = Adam(AdamParameters(lr=0.1, group_lr={"frozen": 0.0}))
    params.grad("a")[:] = 1.0
    params.grad("b")[:] = 1.0
    optimizer.step(params)
    assert params["a"][0] < 1.0
    assert params["b"][0] == 1.0


def test_adam_rejects_unknown_keys():
    with pytest.raises(ValueError):
        AdamParameters(learning_rate=0.1)


def test_checkpoint_layout(tmp_path):
    params = _registry()
    payload = dumps(params)
    assert payload[:4] == MAGIC
    restored = loads(payload)
    assert list(restored) == params.names()
    for name, value in params.items():
        assert_array_equal(restored[name], value)

    path = tmp_path / "model.mtpl"
    save_checkpoint(params, path)
    target = _registry(seed=99)
    load_checkpoint(path, target)
    assert_array_equal(target["W_raw"], params["W_raw"])


@pytest.mark.parametrize("payload", [b"XXXX" + bytes(8), MAGIC + b"\x02\x00\x00\x00" + bytes(4)])
def test_checkpoint_rejects_bad_header(payload):
    with pytest.raises(ContractError):
        loads(payload)


def test_checkpoint_name_mismatch(tmp_path):
    path = tmp_path / "model.mtpl"
    save_checkpoint(_registry(), path)
    other = ModelParams()
    other.zeros("something_else", (2,))
    with pytest.raises(ContractError):
        load_checkpoint(path, other)


def test_numeric_gradient_of_cubic():
    fn = lambda v: T.tsum(v["x"] ** 3)  # noqa: E731
    grad = numeric_gradient(fn, {"x": np.array([1.0, -2.0])}, "x")
    assert_almost_equal(grad, [3.0, 12.0], decimal=6)


def test_check_gradients_reports_rows():
    fn = lambda v: T.tsum(T.softplus(v["x"]) * v["y"])  # noqa: E731
    rows = check_gradients(fn, {"x": np.ones(3), "y": np.arange(3.0)}, label="toy.")
    assert [row.parameter for row in rows] == ["toy.x", "toy.y"]
    assert all(row.passed for row in rows)
