"""
Structure checks for metriplectic trajectories: quadratic-energy drift under
explicit Euler, Dirichlet-energy decay under pure dissipation, and the
singular-value structure of the skew coupling.
"""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy import linalg

from metriforge.autodiff.tensor import Tensor
from metriforge.dynamics.metriplectic import (
    GraphDiffusion,
    OperatorCoeffs,
    PoissonTensor,
    StencilLaplacian,
    trajectory,
)
from metriforge.graph.system import ScreenedSystem, assemble_dense, dirichlet_energy

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
MONOTONE_TOL = 1e-12

ArrayLike = Union[np.ndarray, Tensor]


class DiagnosticsReport(BaseModel):
    quadratic_energy: List[float]
    drift: List[float]
    predicted_drift: List[float]
    cross_term: List[float]
    identity_residual: float
    dirichlet_energy: Optional[List[float]] = None
    dirichlet_monotone: Optional[bool] = None
    singular_values: List[float]
    singular_pairs: List[Tuple[float, float]]
    max_pair_gap: float
    rank: int
    casimir_dim: int
    skew_residual: float

    def rows(self) -> List[dict]:
        """Per-step records: step, E_quad, E_dirichlet, drift, predicted_drift."""
        out = []
        for n, energy in enumerate(self.quadratic_energy):
            last = n == len(self.drift)
            out.append(
                {
                    "step": n,
                    "E_quad": energy,
                    "E_dirichlet": (
                        None if self.dirichlet_energy is None else self.dirichlet_energy[n]
                    ),
                    "drift": None if last else self.drift[n],
                    "predicted_drift": None if last else self.predicted_drift[n],
                }
            )
        return out


class PoissonSpectrum(BaseModel):
    singular_values: List[float]
    pairs: List[Tuple[float, float]]
    max_pair_gap: float
    rank: int
    casimir_dim: int
    skew_residual: float


def _array(value: ArrayLike) -> np.ndarray:
    return value.numpy() if isinstance(value, Tensor) else np.asarray(value, dtype=float)


def _anti(J: Union[PoissonTensor, ArrayLike]) -> np.ndarray:
    if not isinstance(J, PoissonTensor):
        J = PoissonTensor(_array(J))
    return J.anti.numpy()


def poisson_spectrum(J: Union[PoissonTensor, ArrayLike]) -> PoissonSpectrum:
    """Singular values of J_anti come in equal pairs; unpaired ones are Casimirs."""
    anti = _anti(J)
    singular = linalg.svdvals(anti)
    pairs = [(float(singular[i]), float(singular[i + 1])) for i in range(0, len(singular) - 1, 2)]
    rank = int(np.sum(singular > RANK_TOL))
    return PoissonSpectrum(
        singular_values=singular.tolist(),
        pairs=pairs,
        max_pair_gap=max((abs(a - b) for a, b in pairs), default=0.0),
        rank=rank,
        casimir_dim=anti.shape[0] - rank,
        skew_residual=float(np.max(np.abs(anti + anti.T))),
    )


def quadratic_energy(psi: ArrayLike) -> float:
    psi = _array(psi)
    return float(0.5 * np.sum(psi * psi))


def system_energy(system: ScreenedSystem, psi: ArrayLike) -> float:
    psi = _array(psi)
    if psi.ndim == 1:
        psi = psi[:, None]
    zero = np.zeros(system.n_nodes)
    return sum(dirichlet_energy(system, psi[:, k], zero) for k in range(psi.shape[1]))


def structure_diagnostics(
    J: Union[PoissonTensor, ArrayLike],
    states: Sequence[ArrayLike],
    dt: float,
    coeffs: Optional[OperatorCoeffs] = None,
    system: Optional[ScreenedSystem] = None,
) -> DiagnosticsReport:
    """
    ``states`` is a trajectory of at least two fields. Drift predictions use the
    advection gain from ``coeffs`` (1 when absent) and assume pure advection;
    Dirichlet energies are reported only when ``system`` is given.
    """
    if len(states) < 2:
        raise ValueError(f"need at least 2 states, got {len(states)}")
    anti = _anti(J)
    alpha = 1.0 if coeffs is None else coeffs.alpha.numpy()
    fields = [_array(s) for s in states]

    energy = [quadratic_energy(psi) for psi in fields]
    drift, predicted, cross = [], [], []
    for n, psi in enumerate(fields[:-1]):
        advected = alpha * (psi @ anti.T)
        drift.append(energy[n + 1] - energy[n])
        predicted.append(float(0.5 * dt * dt * np.sum(advected * advected)))
        cross.append(float(dt * np.sum(psi * advected)))
    residual = max(abs(d - p - c) for d, p, c in zip(drift, predicted, cross))

    dirichlet, monotone = None, None
    if system is not None:
        dirichlet = [system_energy(system, psi) for psi in fields]
        scale = max(1.0, abs(dirichlet[0]))
        monotone = bool(np.all(np.diff(dirichlet) <= MONOTONE_TOL * scale))
        if not monotone:
            log.warning("Dirichlet energy increased along the trajectory")

    spectrum = poisson_spectrum(J)
    return DiagnosticsReport(
        quadratic_energy=energy,
        drift=drift,
        predicted_drift=predicted,
        cross_term=cross,
        identity_residual=float(residual),
        dirichlet_energy=dirichlet,
        dirichlet_monotone=monotone,
        singular_values=spectrum.singular_values,
        singular_pairs=spectrum.pairs,
        max_pair_gap=spectrum.max_pair_gap,
        rank=spectrum.rank,
        casimir_dim=spectrum.casimir_dim,
        skew_residual=spectrum.skew_residual,
    )


def lambda_max(system: ScreenedSystem) -> float:
    return float(linalg.eigvalsh(assemble_dense(system))[-1])


def dissipation_trajectory(
    system: ScreenedSystem, psi0: ArrayLike, dt: float, steps: int
) -> List[Tensor]:
    """Pure dissipation psi <- psi - dt A psi with A the screened graph operator."""
    psi0 = _array(psi0)
    if psi0.ndim == 1:
        psi0 = psi0[:, None]
    fields = psi0.shape[1]
    diffusion = GraphDiffusion(system.topology, system.conductance, system.damping)
    coeffs = OperatorCoeffs.constant(psi0.shape, sigma=1.0)
    return trajectory(psi0, coeffs, PoissonTensor(np.zeros((fields, fields))), diffusion, dt, steps)


def advection_trajectory(
    J: Union[PoissonTensor, ArrayLike], psi0: ArrayLike, dt: float, steps: int, alpha: float = 1.0
) -> List[Tensor]:
    """Pure advection on an (H, W, K) grid field."""
    if not isinstance(J, PoissonTensor):
        J = PoissonTensor(_array(J))
    psi0 = _array(psi0)
    coeffs = OperatorCoeffs.constant(psi0.shape, alpha=alpha)
    stencil = StencilLaplacian.five_point(psi0.shape[-1])
    return trajectory(psi0, coeffs, J, stencil, dt, steps)


def drift_convergence_order(
    J: Union[PoissonTensor, ArrayLike],
    psi0: ArrayLike,
    dts: Sequence[float] = (0.02, 0.01, 0.005, 0.0025),
    steps: int = 20,
) -> float:
    """Log-log slope of total drift against dt over a fixed number of steps."""
    totals = []
    for dt in dts:
        states = advection_trajectory(J, psi0, dt, steps)
        totals.append(quadratic_energy(states[-1]) - quadratic_energy(states[0]))
    slope = np.polyfit(np.log(dts), np.log(totals), 1)[0]
    log.debug("drift totals %s give slope %.4f", totals, slope)
    return float(slope)
