"""
Causal screened-Poisson chains.

On a path graph where each position only sees its predecessor, the screened
solve collapses to the affine recurrence psi_i = alpha_i psi_{i-1} + beta_i with
alpha = w / (w + lambda) and beta = b / (w + lambda). Affine maps compose
associatively, so the whole chain is a prefix scan.
"""

from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import List, NamedTuple, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import sparse

from metriforge.autodiff import tensor as T
from metriforge.autodiff.tensor import Tensor, TensorLike, as_tensor, custom_grad
from metriforge.errors import DimensionError, DomainError


class AffineElem(NamedTuple):
    """The map x -> a * x + b."""

    a: Union[float, np.ndarray]
    b: Union[float, np.ndarray]

    def compose(self, inner: "AffineElem") -> "AffineElem":
        """self after inner."""
        return AffineElem(self.a * inner.a, self.a * inner.b + self.b)

    def __call__(self, x):
        return self.a * x + self.b


IDENTITY = AffineElem(1.0, 0.0)


class AffineChain(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    alpha: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    lam: np.ndarray
    b: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        shapes = {arr.shape for arr in (self.alpha, self.beta, self.w, self.lam, self.b)}
        if len(shapes) != 1:
            raise DimensionError(f"chain arrays disagree on shape: {sorted(shapes)}")
        if self.alpha.ndim not in (1, 2) or len(self.alpha) == 0:
            raise DimensionError("a chain is a nonempty (N,) or (N, K) array")
        return self

    def __len__(self) -> int:
        return len(self.alpha)

    def elem(self, i: int) -> AffineElem:
        return AffineElem(self.alpha[i], self.beta[i])


def coefficients(w, lam, b) -> AffineChain:
    w, lam, b = (np.asarray(v, dtype=float) for v in (w, lam, b))
    if not (w.shape == lam.shape == b.shape) or w.ndim not in (1, 2) or len(w) == 0:
        raise DimensionError(
            f"w {w.shape}, lambda {lam.shape} and b {b.shape} must share one (N,) or (N, K) shape"
        )
    if np.any(w <= 0):
        raise DomainError("chain conductances must be strictly positive")
    if np.any(lam <= 0):
        raise DomainError("chain damping must be strictly positive")
    total = w + lam
    return AffineChain(alpha=w / total, beta=b / total, w=w, lam=lam, b=b)


def scan_sequential(chain: AffineChain, psi0: float = 0.0) -> np.ndarray:
    psi = np.empty_like(chain.beta)
    prev = np.full_like(chain.beta[0], psi0)
    for i in range(len(chain)):
        prev = chain.alpha[i] * prev + chain.beta[i]
        psi[i] = prev
    return psi


def _prefix_compose(alpha: np.ndarray, beta: np.ndarray):
    """
    Inclusive prefix of affine elements in sequence order, computed with an
    up-sweep/down-sweep over a power-of-two padded copy.
    """
    n = len(alpha)
    size = 1 << max(n - 1, 0).bit_length()
    a = np.ones((size,) + alpha.shape[1:])
    b = np.zeros((size,) + beta.shape[1:])
    a[:n], b[:n] = alpha, beta

    # up-sweep: node k accumulates the block ending at k
    stride = 1
    while stride < size:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        a_r, b_r = a[right], b[right]
        a[right], b[right] = a_r * a[left], a_r * b[left] + b_r
        stride *= 2

    a[size - 1], b[size - 1] = 1.0, 0.0

    # down-sweep: exclusive prefix
    stride = size // 2
    while stride >= 1:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        a_l, b_l = a[left].copy(), b[left].copy()
        a_r, b_r = a[right].copy(), b[right].copy()
        a[left], b[left] = a_r, b_r
        a[right], b[right] = a_l * a_r, a_l * b_r + b_l
        stride //= 2

    excl_a, excl_b = a[:n], b[:n]
    return alpha * excl_a, alpha * excl_b + beta


def scan_parallel(chain: AffineChain, psi0: float = 0.0) -> np.ndarray:
    prefix_a, prefix_b = _prefix_compose(chain.alpha, chain.beta)
    return prefix_a * psi0 + prefix_b


def scan_chunked(
    chain: AffineChain, chunk: int, psi0: float = 0.0, threads: int = 1
) -> np.ndarray:
    """
    Scan each block of ``chunk`` positions independently, then thread the
    carry through the block prefixes in order.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    bounds = [(start, min(start + chunk, len(chain))) for start in range(0, len(chain), chunk)]

    def block(span):
        start, stop = span
        return _prefix_compose(chain.alpha[start:stop], chain.beta[start:stop])

    if threads <= 1 or len(bounds) == 1:
        prefixes = [block(span) for span in bounds]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(bounds))) as pool:
            prefixes = list(pool.map(block, bounds))

    psi = np.empty_like(chain.beta)
    carry = np.full_like(chain.beta[0], psi0)
    for (start, stop), (prefix_a, prefix_b) in zip(bounds, prefixes):
        psi[start:stop] = prefix_a * carry + prefix_b
        carry = psi[stop - 1]
    return psi


class ScanGradients(NamedTuple):
    grad_w: np.ndarray
    grad_lambda: np.ndarray
    grad_b: np.ndarray


def scan_grad(
    chain: AffineChain, psi: np.ndarray, upstream: np.ndarray, psi0: float = 0.0
) -> ScanGradients:
    """Reverse adjoint v_i = alpha_{i+1} v_{i+1} + g_i, then the chain rule through alpha, beta."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != chain.alpha.shape:
        raise DimensionError(f"upstream {upstream.shape} does not match chain {chain.alpha.shape}")

    next_alpha = np.concatenate([chain.alpha[1:], np.zeros_like(chain.alpha[:1])])
    prefix_a, prefix_b = _prefix_compose(next_alpha[::-1], upstream[::-1])
    adjoint = prefix_b[::-1]
    previous = np.concatenate([np.full_like(psi[:1], psi0), psi[:-1]])

    grad_alpha = adjoint * previous
    grad_beta = adjoint
    total = chain.w + chain.lam
    total_sq = total**2
    return ScanGradients(
        grad_w=grad_alpha * chain.lam / total_sq - grad_beta * chain.b / total_sq,
        grad_lambda=-grad_alpha * chain.w / total_sq - grad_beta * chain.b / total_sq,
        grad_b=grad_beta / total,
    )


def causal_solve(
    w: TensorLike,
    lam: TensorLike,
    b: TensorLike,
    psi0: float = 0.0,
    parallel: bool = True,
) -> Tensor:
    w, lam, b = as_tensor(w), as_tensor(lam), as_tensor(b)
    chain = coefficients(w.data, lam.data, b.data)
    psi = scan_parallel(chain, psi0) if parallel else scan_sequential(chain, psi0)

    def backward(g):
        return scan_grad(chain, psi, g, psi0)

    return custom_grad(psi.astype(b.dtype), [w, lam, b], backward)


@lru_cache(maxsize=32)
def _pool_operator(n: int, chunk: int) -> sparse.csr_matrix:
    positions = np.arange(chunk, n)
    start = (positions // chunk - 1) * chunk
    rows = np.repeat(positions, chunk)
    cols = (start[:, None] + np.arange(chunk)).reshape(-1)
    values = np.full(len(rows), 1.0 / chunk)
    return sparse.csr_matrix((values, (rows, cols)), shape=(n, n))


def causal_pool(x: TensorLike, chunk: int) -> Tensor:
    """
    Position i receives the mean of the last completed chunk before its own;
    the first chunk receives zeros.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    x = as_tensor(x)
    return T.sparse_apply(_pool_operator(len(x), chunk), x)


def causal_hierarchy(x: TensorLike, chunks: Sequence[int] = (16, 16)) -> List[Tensor]:
    """Token level followed by one pooled level per chunk size (cumulative widths)."""
    levels = [as_tensor(x)]
    width = 1
    for chunk in chunks:
        width *= chunk
        levels.append(causal_pool(levels[-1], width))
    return levels


def causal_dissipation(psi: TensorLike, w: TensorLike, psi0: float = 0.0) -> Tensor:
    """D_i = w_i (psi_i - psi_{i-1})^2 with psi_{-1} = psi0."""
    psi, w = as_tensor(psi), as_tensor(w)
    first = Tensor(np.full_like(psi.data[:1], psi0))
    previous = T.concat([first, psi[:-1]], axis=0)
    return w * (psi - previous) ** 2


def cross_field_products(psi: TensorLike) -> Tensor:
    """Per-position outer products psi_i psi_i^T, shape (N, K, K)."""
    psi = as_tensor(psi)
    if psi.ndim != 2:
        raise DimensionError(f"expected (N, K) fields, got {psi.shape}")
    n, k = psi.shape
    return psi.reshape(n, k, 1) * psi.reshape(n, 1, k)


class ScanParameters(BaseModel):
    model_config = ConfigDict(extra="forbid")

    psi0: float = 0.0


class SequentialScan:
    params_class = ScanParameters

    def __init__(self, params: ScanParameters):
        self.params = params

    def run(self, chain: AffineChain) -> np.ndarray:
        return scan_sequential(chain, self.params.psi0)


class ParallelScan:
    params_class = ScanParameters

    def __init__(self, params: ScanParameters):
        self.params = params

    def run(self, chain: AffineChain) -> np.ndarray:
        return scan_parallel(chain, self.params.psi0)
