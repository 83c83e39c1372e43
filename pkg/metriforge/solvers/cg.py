import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from metriforge.autodiff.tensor import Tensor, TensorLike, as_tensor, custom_grad
from metriforge.errors import (
    ContractError,
    ConvergenceError,
    DimensionError,
    MetriforgeError,
    NumericError,
)
from metriforge.graph.system import ScreenedSystem, field_systems, laplacian_apply
from metriforge.graph.topology import GraphTopology, same_topology

log = logging.getLogger(__name__)


class Preconditioner(Enum):
    NONE = "NONE"
    JACOBI = "JACOBI"


class CgConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_iters: int = Field(60, ge=1)
    rel_tol: float = Field(1e-10, gt=0)
    abs_tol_floor: float = Field(1e-30, gt=0)
    preconditioner: Preconditioner = Preconditioner.NONE


class SolveRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    solution: np.ndarray
    iterations: int
    relative_residual: float
    adjoint: Optional[np.ndarray] = None


class SolveGradients(NamedTuple):
    grad_b: np.ndarray
    grad_w: np.ndarray
    grad_lambda: np.ndarray


def _relative_residual(system: ScreenedSystem, x: np.ndarray, b: np.ndarray, scale: float):
    return float(np.linalg.norm(b - laplacian_apply(system, x))) / scale


def cg_solve(
    system: ScreenedSystem, b: np.ndarray, cfg: Optional[CgConfig] = None
) -> SolveRecord:
    """
    Solve (L_W + diag(damping)) psi = b from a zero initial guess.

    The recursive residual decides when to stop, the true residual confirms it.
    If the two disagree the iteration restarts from the true residual.
    """
    cfg = cfg or CgConfig()
    b = np.asarray(b, dtype=float)
    if b.shape != (system.n_nodes,):
        raise DimensionError(f"b must have shape ({system.n_nodes},), got {b.shape}")

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return SolveRecord(
            solution=np.zeros_like(b), iterations=0, relative_residual=0.0
        )
    scale = max(b_norm, cfg.abs_tol_floor)
    threshold = cfg.rel_tol * scale

    if cfg.preconditioner == Preconditioner.JACOBI:
        inv_diag = 1.0 / system.diagonal()
    else:
        inv_diag = None

    def precondition(r):
        return r if inv_diag is None else inv_diag * r

    x = np.zeros_like(b)
    r = b.copy()
    z = precondition(r)
    p = z.copy()
    rz = float(np.dot(r, z))

    for iteration in range(1, cfg.max_iters + 1):
        ap = laplacian_apply(system, p)
        curvature = float(np.dot(p, ap))
        if not np.isfinite(curvature) or curvature <= 0:
            raise NumericError(
                f"CG breakdown at iteration {iteration}: p.Ap = {curvature}",
                term="curvature",
            )
        step = rz / curvature
        x += step * p
        r -= step * ap
        r_norm = float(np.linalg.norm(r))
        if not np.isfinite(r_norm):
            raise NumericError(f"non-finite residual at iteration {iteration}", term="residual")

        if r_norm <= threshold:
            true_r = b - laplacian_apply(system, x)
            true_norm = float(np.linalg.norm(true_r))
            if true_norm <= threshold:
                log.debug(
                    "CG converged in %d iterations, residual %.3e",
                    iteration,
                    true_norm / scale,
                )
                return SolveRecord(
                    solution=x, iterations=iteration, relative_residual=true_norm / scale
                )
            log.debug("CG residual drift at iteration %d, restarting", iteration)
            r = true_r
            z = precondition(r)
            p = z.copy()
            rz = float(np.dot(r, z))
            continue

        z = precondition(r)
        rz_next = float(np.dot(r, z))
        p = z + (rz_next / rz) * p
        rz = rz_next

    residual = _relative_residual(system, x, b, scale)
    if residual <= cfg.rel_tol:
        return SolveRecord(
            solution=x, iterations=cfg.max_iters, relative_residual=residual
        )
    log.warning(
        "CG did not converge in %d iterations (residual %.3e)", cfg.max_iters, residual
    )
    raise ConvergenceError(
        f"CG did not converge in {cfg.max_iters} iterations, "
        f"relative residual {residual:.3e}",
        residual=residual,
        iterations=cfg.max_iters,
    )


def cg_solve_grad(
    system: ScreenedSystem,
    b: np.ndarray,
    psi: np.ndarray,
    upstream: np.ndarray,
    cfg: Optional[CgConfig] = None,
    record: Optional[SolveRecord] = None,
) -> SolveGradients:
    """
    Adjoint gradients of a converged solve. With v = A^{-1} g:
    grad_b = v, grad_w_ij = -(v_i - v_j)(psi_i - psi_j), grad_lambda = -v * psi.
    """
    psi = np.asarray(psi, dtype=float)
    adjoint = cg_solve(system, upstream, cfg).solution
    if record is not None:
        record.adjoint = adjoint

    heads, tails = system.topology.heads, system.topology.tails
    grad_w = -(adjoint[heads] - adjoint[tails]) * (psi[heads] - psi[tails])
    return SolveGradients(grad_b=adjoint, grad_w=grad_w, grad_lambda=-adjoint * psi)


def _tag_field(error: MetriforgeError, field: int) -> MetriforgeError:
    message = f"field {field}: {error}"
    if isinstance(error, ConvergenceError):
        return ConvergenceError(message, error.residual, error.iterations, field=field)
    if isinstance(error, NumericError):
        tagged = NumericError(message, term=error.term)
    else:
        tagged = type(error)(message)
    tagged.field = field
    return tagged


def _run_fields(fn, n_fields: int, threads: int) -> list:
    if threads <= 1 or n_fields == 1:
        results = []
        for k in range(n_fields):
            try:
                results.append(fn(k))
            except MetriforgeError as e:
                raise _tag_field(e, k) from e
        return results

    with ThreadPoolExecutor(max_workers=min(threads, n_fields)) as pool:
        futures = [pool.submit(fn, k) for k in range(n_fields)]
        results = []
        for k, future in enumerate(futures):
            try:
                results.append(future.result())
            except MetriforgeError as e:
                raise _tag_field(e, k) from e
        return results


def _check_shared(systems: Sequence[ScreenedSystem]) -> None:
    if not systems:
        raise ContractError("at least one field system is required")
    first = systems[0]
    for system in systems[1:]:
        if not same_topology(system.topology, first.topology):
            raise ContractError("field systems must share one topology")
        if not np.array_equal(system.conductance, first.conductance):
            raise ContractError("field systems must share conductances")


def solve_k_fields(
    systems: Sequence[ScreenedSystem],
    b: np.ndarray,
    cfg: Optional[CgConfig] = None,
    threads: int = 1,
) -> List[SolveRecord]:
    """Independent solves per field; ``b`` has shape (n, K). Result order follows K."""
    _check_shared(systems)
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    if b.shape != (systems[0].n_nodes, len(systems)):
        raise DimensionError(
            f"b must have shape ({systems[0].n_nodes}, {len(systems)}), got {b.shape}"
        )
    return _run_fields(lambda k: cg_solve(systems[k], b[:, k], cfg), len(systems), threads)


def screened_solve(
    topology: GraphTopology,
    conductance: TensorLike,
    damping: TensorLike,
    source: TensorLike,
    cfg: Optional[CgConfig] = None,
    threads: int = 1,
    records: Optional[list] = None,
) -> Tensor:
    """
    Differentiable K-field solve. ``damping`` and ``source`` are (n,) or (n, K);
    conductances are shared across fields so their gradient sums over K.
    """
    w, lam, b = as_tensor(conductance), as_tensor(damping), as_tensor(source)
    if lam.shape != b.shape:
        raise DimensionError(f"damping {lam.shape} and source {b.shape} must match")
    n = topology.n_nodes
    if b.shape[0] != n or b.ndim > 2:
        raise DimensionError(f"source must have shape ({n},) or ({n}, K), got {b.shape}")

    lam_2d = lam.data.reshape(n, -1).astype(float)
    b_2d = b.data.reshape(n, -1).astype(float)
    systems = field_systems(topology, w.data.astype(float), lam_2d)
    solved = solve_k_fields(systems, b_2d, cfg, threads)
    if records is not None:
        records.extend(solved)
    psi = np.stack([rec.solution for rec in solved], axis=1)

    def backward(g):
        g_2d = np.asarray(g, dtype=float).reshape(n, -1)
        grads = _run_fields(
            lambda k: cg_solve_grad(
                systems[k], b_2d[:, k], psi[:, k], g_2d[:, k], cfg, solved[k]
            ),
            len(systems),
            threads,
        )
        grad_w = np.sum([gr.grad_w for gr in grads], axis=0)
        grad_lam = np.stack([gr.grad_lambda for gr in grads], axis=1)
        grad_b = np.stack([gr.grad_b for gr in grads], axis=1)
        return grad_w, grad_lam.reshape(lam.shape), grad_b.reshape(b.shape)

    return custom_grad(psi.reshape(b.shape).astype(b.dtype), [w, lam, b], backward)


class ConjugateGradientSolver:
    params_class = CgConfig

    def __init__(self, params: CgConfig):
        self.params = params

    def solve(self, system: ScreenedSystem, b: np.ndarray) -> SolveRecord:
        return cg_solve(system, b, self.params)

    def gradient(
        self, system: ScreenedSystem, b: np.ndarray, psi: np.ndarray, upstream: np.ndarray
    ) -> SolveGradients:
        return cg_solve_grad(system, b, psi, upstream, self.params)
