import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_almost_equal, assert_array_equal

from metriforge.autodiff import tensor as T
from metriforge.autodiff.gradcheck import check_gradients
from metriforge.errors import DimensionError, DomainError
from metriforge.solvers.scan import (
    AffineChain,
    AffineElem,
    causal_dissipation,
    causal_hierarchy,
    causal_pool,
    causal_solve,
    coefficients,
    cross_field_products,
    scan_chunked,
    scan_grad,
    scan_parallel,
    scan_sequential,
)


def chain_from(alpha, beta):
    alpha, beta = np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float)
    ones = np.ones_like(alpha)
    return AffineChain(alpha=alpha, beta=beta, w=ones, lam=ones, b=beta)


def random_chain(n, seed, fields=None):
    rng = np.random.default_rng(seed)
    shape = (n,) if fields is None else (n, fields)
    return coefficients(
        rng.uniform(0.1, 2.0, shape), rng.uniform(0.1, 2.0, shape), rng.normal(size=shape)
    )


@pytest.mark.parametrize(
    "w,lam,b,alpha,beta",
    [
        (1.0, 1.0, 2.0, 0.5, 1.0),
        (3.7e5, 3.7e5, 0.0, 0.5, 0.0),
        (1.0, 1e6, 1.0, 0.0, 0.0),
    ],
)
def test_coefficients(w, lam, b, alpha, beta):
    chain = coefficients([w], [lam], [b])
    assert_allclose(chain.alpha, [alpha], atol=1e-5)
    assert_allclose(chain.beta, [beta], atol=1e-5)


@pytest.mark.parametrize("w,lam", [([0.0], [1.0]), ([1.0], [-1.0])])
def test_coefficients_domain(w, lam):
    with pytest.raises(DomainError):
        coefficients(w, lam, [1.0])


def test_coefficients_shape_mismatch():
    with pytest.raises(DimensionError):
        coefficients([1.0, 1.0], [1.0], [1.0])


@pytest.mark.parametrize(
    "alpha,beta,psi0,expected",
    [
        ([0.5, 0.5], [1.0, 1.0], 0.0, [1.0, 1.5]),
        ([0.3, 0.9, 0.2], [0.0, 0.0, 0.0], 0.0, [0.0, 0.0, 0.0]),
        ([1.0, 1.0, 1.0, 1.0], [0.0, 1.0, 0.0, 0.0], 0.0, [0.0, 1.0, 1.0, 1.0]),
        ([0.5], [1.0], 2.0, [2.0]),
    ],
)
def test_scan_sequential(alpha, beta, psi0, expected):
    chain = chain_from(alpha, beta)
    assert_allclose(scan_sequential(chain, psi0), expected)
    assert_allclose(scan_parallel(chain, psi0), expected, rtol=1e-15)


def test_affine_composition_is_associative():
    rng = np.random.default_rng(0)
    for _ in range(100):
        e1, e2, e3 = (AffineElem(*rng.normal(size=2)) for _ in range(3))
        x = rng.normal()
        left = e3.compose(e2).compose(e1)(x)
        right = e3.compose(e2.compose(e1))(x)
        assert abs(left - right) <= 1e-14 * max(1.0, abs(left))


@pytest.mark.parametrize("n", [1, 7, 1024, 100_000])
@pytest.mark.parametrize("seed", range(20))
def test_parallel_matches_sequential(n, seed):
    chain = random_chain(n, seed)
    sequential = scan_sequential(chain)
    parallel = scan_parallel(chain)
    deviation = np.max(np.abs(parallel - sequential)) / np.max(np.abs(sequential))
    assert deviation <= 1e-12


@pytest.mark.parametrize("chunk,threads", [(1, 1), (7, 1), (64, 4), (5000, 2)])
def test_chunked_matches_sequential(chunk, threads):
    chain = random_chain(3001, 5, fields=2)
    sequential = scan_sequential(chain, psi0=0.3)
    chunked = scan_chunked(chain, chunk, psi0=0.3, threads=threads)
    assert_allclose(chunked, sequential, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        scan_chunked(chain, 0)


def test_parallel_multi_field():
    chain = random_chain(37, 3, fields=4)
    assert_allclose(scan_parallel(chain, 0.5), scan_sequential(chain, 0.5), rtol=1e-12)


@settings(deadline=None, max_examples=30)
@given(st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_perturbation_never_moves_earlier_positions(n, seed):
    rng = np.random.default_rng(seed)
    w, lam, b = rng.uniform(0.1, 2.0, n), rng.uniform(0.1, 2.0, n), rng.normal(size=n)
    base = scan_parallel(coefficients(w, lam, b))
    j = int(rng.integers(0, n))
    for arr in (w, lam, b):
        perturbed = arr.copy()
        perturbed[j] += 0.5
        args = [perturbed if a is arr else a for a in (w, lam, b)]
        moved = scan_parallel(coefficients(*args))
        assert_array_equal(moved[:j], base[:j])


def test_stability_bound():
    chain = random_chain(5000, 11)
    bound = np.max(np.abs(chain.beta)) / (1 - np.max(chain.alpha))
    assert np.max(np.abs(scan_parallel(chain))) <= bound


def test_scan_grad_zero_upstream():
    chain = random_chain(16, 1)
    psi = scan_parallel(chain)
    for grad in scan_grad(chain, psi, np.zeros(16)):
        assert_array_equal(grad, np.zeros(16))


def test_scan_grad_memoryless_limit():
    rng = np.random.default_rng(2)
    w = np.full(8, 1e-12)
    lam = rng.uniform(0.5, 2.0, 8)
    chain = coefficients(w, lam, rng.normal(size=8))
    upstream = rng.normal(size=8)
    grads = scan_grad(chain, scan_parallel(chain), upstream)
    assert_allclose(grads.grad_b, upstream / (w + lam), rtol=1e-9)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("parallel", [True, False])
def test_causal_solve_gradients(seed, parallel):
    rng = np.random.default_rng(seed)
    inputs = {
        "w": rng.uniform(0.2, 2.0, 64),
        "lam": rng.uniform(0.2, 2.0, 64),
        "b": rng.normal(size=64),
    }
    weights = rng.normal(size=64)

    def fn(v):
        psi = causal_solve(v["w"], v["lam"], v["b"], parallel=parallel)
        return T.tsum(psi * psi * weights)

    rows = check_gradients(fn, inputs, tolerance=1e-5)
    assert all(row.passed for row in rows), rows


def test_causal_pool_unit_chunk():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert_array_equal(causal_pool(x, 1).numpy(), [0.0, 1.0, 2.0, 3.0])


def test_causal_pool_constant():
    pooled = causal_pool(np.full(10, 3.0), 4).numpy()
    assert_array_equal(pooled[:4], 0.0)
    assert_almost_equal(pooled[4:], 3.0)


def test_causal_pool_masks_later_positions():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    base = causal_pool(x, 8).numpy()
    for j in range(40):
        moved = x.copy()
        moved[j] += 1.0
        boundary = (j // 8 + 1) * 8
        assert_array_equal(causal_pool(moved, 8).numpy()[:boundary], base[:boundary])


def test_causal_hierarchy_levels():
    x = np.arange(64.0)
    levels = causal_hierarchy(x, chunks=(4, 4))
    assert len(levels) == 3
    assert_array_equal(levels[1].numpy()[:4], 0.0)
    assert_almost_equal(levels[1].numpy()[4], np.mean(x[:4]))
    # sections pool the chunk level over 16 positions
    assert_array_equal(levels[2].numpy()[:16], 0.0)
    assert_almost_equal(levels[2].numpy()[16], np.mean(levels[1].numpy()[:16]))


def test_causal_dissipation():
    psi = np.array([1.0, 3.0, 3.0])
    w = np.array([2.0, 1.0, 5.0])
    assert_array_equal(causal_dissipation(psi, w).numpy(), [2.0, 4.0, 0.0])


def test_cross_field_products():
    psi = np.array([[1.0, 2.0], [0.0, 3.0]])
    out = cross_field_products(psi).numpy()
    assert out.shape == (2, 2, 2)
    assert_array_equal(out[0], [[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(DimensionError):
        cross_field_products(np.ones(3))
