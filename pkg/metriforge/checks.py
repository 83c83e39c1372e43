"""
Seeded self-checks behind the ``gradcheck`` and ``oracle`` commands.

Every check compares a fast path against an independent reference (finite
differences, dense factorizations, the sequential scan) and reports one row.
"""

import logging
from typing import Callable, Dict, List

import numpy as np
from pydantic import BaseModel
from scipy import linalg

from metriforge.autodiff import tensor as T
from metriforge.autodiff.gradcheck import GradCheckRow, check_gradients
from metriforge.autodiff.params import ModelParams
from metriforge.domains.maze import generate_maze
from metriforge.domains.maze_model import MazeModelConfig, cell_loss, forward, init_maze_params
from metriforge.dynamics.diagnostics import (
    advection_trajectory,
    dissipation_trajectory,
    drift_convergence_order,
    lambda_max,
    poisson_spectrum,
    structure_diagnostics,
)
from metriforge.dynamics.metriplectic import (
    PoissonTensor,
    StencilLaplacian,
    evolve,
    init_projection_params,
    project_operators,
)
from metriforge.dynamics.readout import (
    GradientField,
    NoetherReadout,
    ReadoutParameters,
    feature_count,
    gradient_kernels,
    shear_parts,
    stress_energy,
)
from metriforge.graph.system import ScreenedSystem, assemble_dense, dirichlet_energy
from metriforge.graph.topology import GraphTopology, grid_topology
from metriforge.layers.poisson import dissipation_readout
from metriforge.solvers.cg import CgConfig, screened_solve, solve_k_fields
from metriforge.solvers.scan import causal_solve, coefficients, scan_parallel, scan_sequential

log = logging.getLogger(__name__)

ORACLE_SOLVER = CgConfig(max_iters=2000, rel_tol=1e-12)


class CheckRow(BaseModel):
    check: str
    value: float
    threshold: float
    passed: bool


class CheckReport(BaseModel):
    seed: int
    rows: List[CheckRow]

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)


def _at_most(check: str, value: float, threshold: float) -> CheckRow:
    passed = bool(value <= threshold)
    if not passed:
        log.warning("%s: %.3e exceeds %.3e", check, value, threshold)
    return CheckRow(check=check, value=float(value), threshold=threshold, passed=passed)


def random_topology(n: int, rng: np.random.Generator) -> GraphTopology:
    """Random sparse graph, occasionally disconnected."""
    i, j = np.triu_indices(n, k=1)
    keep = rng.random(len(i)) < min(1.0, 4.0 / max(n, 1))
    return GraphTopology(n_nodes=n, edges=np.stack([i[keep], j[keep]], axis=1))


def random_system(n: int, rng: np.random.Generator) -> ScreenedSystem:
    topology = random_topology(n, rng)
    return ScreenedSystem(
        topology=topology,
        conductance=rng.uniform(0.1, 2.0, topology.n_edges),
        damping=rng.uniform(0.1, 2.0, n),
    )


def solver_oracle(seed: int, systems: int = 200) -> CheckRow:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(systems):
        n, fields = int(rng.integers(2, 201)), int(rng.integers(1, 5))
        system = random_system(n, rng)
        b = rng.normal(size=(n, fields))
        records = solve_k_fields([system] * fields, b, ORACLE_SOLVER)
        solved = np.stack([rec.solution for rec in records], axis=1)
        dense = linalg.solve(assemble_dense(system), b, assume_a="pos")
        worst = max(worst, np.linalg.norm(solved - dense) / np.linalg.norm(dense))
    return _at_most("solver_oracle", worst, 1e-8)


def dirichlet_minimality(seed: int, systems: int = 50, perturbations: int = 100) -> CheckRow:
    """Smallest energy gap E(psi* + delta) - E(psi*); every gap must be positive."""
    rng = np.random.default_rng(seed)
    smallest_gap = np.inf
    for _ in range(systems):
        n = int(rng.integers(2, 60))
        system = random_system(n, rng)
        b = rng.normal(size=n)
        psi = solve_k_fields([system], b[:, None], ORACLE_SOLVER)[0].solution
        base = dirichlet_energy(system, psi, b)
        for _ in range(perturbations):
            delta = rng.normal(size=n) * rng.choice([1e-3, 1e-1, 1.0])
            smallest_gap = min(smallest_gap, dirichlet_energy(system, psi + delta, b) - base)
    return CheckRow(
        check="dirichlet_minimality",
        value=float(smallest_gap),
        threshold=0.0,
        passed=bool(smallest_gap > 0),
    )


def scan_equivalence(seed: int, sizes=(1, 7, 1024, 100_000), seeds: int = 20) -> List[CheckRow]:
    worst, leaked = 0.0, 0.0
    for offset in range(seeds):
        rng = np.random.default_rng([seed, offset])
        for n in sizes:
            w, lam, b = rng.uniform(0.1, 2.0, n), rng.uniform(0.1, 2.0, n), rng.normal(size=n)
            chain = coefficients(w, lam, b)
            sequential, parallel = scan_sequential(chain), scan_parallel(chain)
            deviation = np.max(np.abs(parallel - sequential))
            worst = max(worst, deviation / max(np.max(np.abs(sequential)), 1e-300))

            bumped_at = int(rng.integers(n))
            bumped = b.copy()
            bumped[bumped_at] += 1.0
            moved = scan_parallel(coefficients(w, lam, bumped))
            leaked = max(leaked, float(np.max(np.abs(moved[:bumped_at] - parallel[:bumped_at]), initial=0.0)))
    return [
        _at_most("scan_equivalence", worst, 1e-12),
        _at_most("scan_causality", leaked, 0.0),
    ]


def metriplectic_structure(seed: int) -> List[CheckRow]:
    rng = np.random.default_rng(seed)
    J = PoissonTensor(rng.normal(size=(4, 4)))
    psi0 = 0.1 * rng.normal(size=(6, 6, 4))
    dt = 0.01
    report = structure_diagnostics(J, advection_trajectory(J, psi0, dt, 10), dt)
    order = drift_convergence_order(J, psi0)

    topology = grid_topology(6, 6)
    system = ScreenedSystem(
        topology=topology,
        conductance=rng.uniform(0.5, 1.5, topology.n_edges),
        damping=rng.uniform(0.1, 0.5, topology.n_nodes),
    )
    states = dissipation_trajectory(system, rng.normal(size=(36, 2)), 1.0 / lambda_max(system), 20)
    dissipative = structure_diagnostics(np.zeros((2, 2)), states, 1.0, system=system)
    return [
        _at_most("drift_identity", report.identity_residual, 1e-12),
        _at_most("convergence_order", abs(order - 2.0), 0.1),
        _at_most("skew_residual", report.skew_residual, 0.0),
        CheckRow(
            check="dissipation_monotone",
            value=float(dissipative.dirichlet_energy[-1] - dissipative.dirichlet_energy[0]),
            threshold=0.0,
            passed=bool(dissipative.dirichlet_monotone),
        ),
    ]


def readout_identities(seed: int) -> List[CheckRow]:
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=(5, 5, 3))
    kx, ky = gradient_kernels(3)
    grad = GradientField.of(psi, kx, ky)
    gx, gy = grad.gx.numpy(), grad.gy.numpy()
    sym, anti = shear_parts(gx, gy)
    reconstruction = np.max(np.abs(sym + anti - gx[..., :, None] * gy[..., None, :]))

    topology = grid_topology(5, 5)
    system = ScreenedSystem(
        topology=topology, conductance=np.ones(topology.n_edges), damping=np.ones(25)
    )
    fx, fy = gradient_kernels(3, "forward_difference")
    forward_grad = GradientField.of(psi, fx, fy)
    energy = stress_energy(forward_grad.gx, forward_grad.gy).E_diag.numpy()
    dissipation = dissipation_readout(system, psi.reshape(25, 3)).reshape(5, 5, 3)
    totals = 2 * energy.sum(axis=(0, 1))
    unification = np.max(np.abs(dissipation.sum(axis=(0, 1)) - totals)) / np.max(np.abs(totals))
    return [
        _at_most("stress_energy_count", abs(feature_count("stress_energy", 32) - 1024), 0.0),
        _at_most("shear_reconstruction", reconstruction, 1e-14),
        _at_most("dissipation_unification", unification, 1e-12),
    ]


def spectrum_checks(seed: int) -> List[CheckRow]:
    rng = np.random.default_rng(seed)
    gaps, casimir_missing = 0.0, 0
    for fields in (3, 4, 5, 7, 8):
        spectrum = poisson_spectrum(rng.normal(size=(fields, fields)))
        gaps = max(gaps, spectrum.max_pair_gap)
        if fields % 2 and spectrum.casimir_dim < 1:
            casimir_missing += 1
    return [
        _at_most("singular_pair_gap", gaps, 1e-10),
        _at_most("odd_casimir_missing", casimir_missing, 0.0),
    ]


def oracle_suite(seed: int, systems: int = 200) -> CheckReport:
    rows = [solver_oracle(seed, systems), dirichlet_minimality(seed, max(1, systems // 4))]
    rows += scan_equivalence(seed)
    rows += metriplectic_structure(seed)
    rows += readout_identities(seed)
    rows += spectrum_checks(seed)
    return CheckReport(seed=seed, rows=rows)


def _solver_gradients(rng: np.random.Generator) -> List[GradCheckRow]:
    n = 20
    topology = random_topology(n, rng)
    cfg = CgConfig(max_iters=200, rel_tol=1e-12)

    def fn(v):
        psi = screened_solve(topology, v["w"], v["lam"], v["b"], cfg)
        return T.tsum(psi * psi)

    inputs = {
        "w": rng.uniform(0.2, 2.0, topology.n_edges),
        "lam": rng.uniform(0.2, 2.0, n),
        "b": rng.normal(size=n),
    }
    return check_gradients(fn, inputs, tolerance=1e-4, label="cg.")


def _scan_gradients(rng: np.random.Generator) -> List[GradCheckRow]:
    n = 64
    target = rng.normal(size=n)

    def fn(v):
        return T.tsum(causal_solve(v["w"], v["lam"], v["b"]) * target)

    inputs = {
        "w": rng.uniform(0.2, 2.0, n),
        "lam": rng.uniform(0.2, 2.0, n),
        "b": rng.normal(size=n),
    }
    return check_gradients(fn, inputs, tolerance=1e-5, label="scan.")


def _dynamics_gradients(rng: np.random.Generator) -> List[GradCheckRow]:
    params = ModelParams(seed=int(rng.integers(2**31)))
    init_projection_params(params, 3, 2)
    target = rng.normal(size=(3, 3, 2))

    def fn(v):
        psi0, coeffs = project_operators(v["h"], v)
        psi = evolve(psi0, coeffs, PoissonTensor(v["J_raw"]), StencilLaplacian(v["stencil"]), 0.1, 3)
        return T.tsum(psi * target)

    inputs = {
        "h": rng.normal(size=(3, 3, 3)),
        "J_raw": rng.normal(size=(2, 2)),
        "stencil": StencilLaplacian.five_point(2).kernel.numpy() * 0.5,
        **dict(params.items()),
    }
    return check_gradients(fn, inputs, tolerance=1e-3, label="dynamics.")


def _readout_gradients(rng: np.random.Generator) -> List[GradCheckRow]:
    kx, ky = gradient_kernels(2)
    readout = NoetherReadout(ReadoutParameters())
    target = rng.normal(size=(4, 4, feature_count("noether", 2)))

    def fn(v):
        return T.tsum(readout.features(v["psi"], v["kx"], v["ky"]) * target)

    inputs = {"psi": rng.normal(size=(4, 4, 2)), "kx": kx, "ky": ky}
    return check_gradients(fn, inputs, tolerance=1e-4, label="readout.")


def _maze_gradients(rng: np.random.Generator) -> List[GradCheckRow]:
    cfg = MazeModelConfig(
        embed_dim=2, hidden_widths=[4], solver=CgConfig(max_iters=2000, rel_tol=1e-12)
    )
    seed = int(rng.integers(2**31))
    params = init_maze_params(cfg, seed)
    params.set("decoder.1.w", rng.normal(size=params["decoder.1.w"].shape))
    maze = generate_maze(5, 5, seed)
    names = params.names()

    def fn(v):
        return cell_loss(forward(maze, {n: v[n] for n in names}, cfg).logits, maze.labels)

    return check_gradients(fn, dict(params.items()), tolerance=1e-3, max_entries=4, label="maze.")


GRADIENT_CHECKS: Dict[str, Callable[[np.random.Generator], List[GradCheckRow]]] = {
    "cg": _solver_gradients,
    "scan": _scan_gradients,
    "dynamics": _dynamics_gradients,
    "readout": _readout_gradients,
    "maze": _maze_gradients,
}


def gradcheck_suite(seed: int = 0) -> List[GradCheckRow]:
    rows = []
    for name, check in GRADIENT_CHECKS.items():
        found = check(np.random.default_rng([seed, len(rows)]))
        failed = [row.parameter for row in found if not row.passed]
        if failed:
            log.warning("%s gradients disagree for %s", name, failed)
        rows.extend(found)
    return rows
