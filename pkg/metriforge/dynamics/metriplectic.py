"""
Explicit Euler metriplectic field dynamics on grids.

    psi <- psi + dt * (-sigma * stencil(psi) + alpha * (J_anti psi) - gamma * psi + s)

The stencil is a positive semidefinite Laplacian, so the first term diffuses.
J_anti acts per pixel across the field axis and is skew by construction.
"""

from typing import Dict, List, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from metriforge.autodiff import tensor as T
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tensor, TensorLike
from metriforge.errors import DimensionError, NumericError
from metriforge.graph.topology import GraphTopology

LAPLACIAN_5PT = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])
GAMMA_FLOOR = 0.1
SOURCE_BOUND = 5.0
PROJECTIONS = ("psi", "sigma", "alpha", "gamma", "s")


class OperatorCoeffs(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sigma: Tensor
    alpha: Tensor
    gamma: Tensor
    s: Tensor

    @model_validator(mode="after")
    def _check(self):
        shapes = {t.shape for t in (self.sigma, self.alpha, self.gamma, self.s)}
        if len(shapes) != 1:
            raise ValueError(f"coefficient shapes disagree: {sorted(shapes)}")
        if np.any(self.sigma.numpy() < 0):
            raise ValueError("sigma must be nonnegative")
        if np.any(self.gamma.numpy() < 0):
            raise ValueError("gamma must be nonnegative")
        if np.any(np.abs(self.s.numpy()) > SOURCE_BOUND):
            raise ValueError(f"|s| must not exceed {SOURCE_BOUND}")
        return self

    @classmethod
    def constant(cls, shape, sigma=0.0, alpha=0.0, gamma=0.0, s=0.0) -> "OperatorCoeffs":
        return cls(
            sigma=T.Tensor(np.full(shape, sigma, dtype=float)),
            alpha=T.Tensor(np.full(shape, alpha, dtype=float)),
            gamma=T.Tensor(np.full(shape, gamma, dtype=float)),
            s=T.Tensor(np.full(shape, s, dtype=float)),
        )


class PoissonTensor:
    """Skew cross-field coupling built from an unconstrained K x K matrix."""

    def __init__(self, J_raw: TensorLike):
        self.J_raw = T.as_tensor(J_raw)
        if self.J_raw.ndim != 2 or self.J_raw.shape[0] != self.J_raw.shape[1]:
            raise DimensionError(f"J_raw must be square, got {self.J_raw.shape}")

    @property
    def anti(self) -> Tensor:
        return self.J_raw - T.transpose(self.J_raw)

    def apply(self, psi: TensorLike) -> Tensor:
        """(J_anti psi) at every site, with fields on the last axis."""
        return T.as_tensor(psi) @ T.transpose(self.anti)


class SpatialOperator(Protocol):
    def apply(self, psi: TensorLike) -> Tensor:
        ...


class StencilLaplacian:
    def __init__(self, kernel: TensorLike, padding: str = "replicate"):
        self.kernel = T.as_tensor(kernel)
        self.padding = padding

    @classmethod
    def five_point(cls, fields: int, padding: str = "replicate") -> "StencilLaplacian":
        return cls(np.tile(LAPLACIAN_5PT, (fields, 1, 1)), padding)

    def apply(self, psi: TensorLike) -> Tensor:
        return T.depthwise_conv3x3(psi, self.kernel, self.padding)


class GraphDiffusion:
    """(L_W + diag(damping)) applied per field to an (n, K) array."""

    def __init__(self, topology: GraphTopology, conductance: TensorLike, damping=None):
        self.topology = topology
        self.conductance = T.as_tensor(conductance)
        self.damping = None if damping is None else T.as_tensor(damping)

    def apply(self, psi: TensorLike) -> Tensor:
        psi = T.as_tensor(psi)
        heads, tails = self.topology.heads, self.topology.tails
        n = self.topology.n_nodes
        flow = self.conductance.reshape(-1, 1) * (T.gather(psi, heads) - T.gather(psi, tails))
        out = T.scatter_add(flow, heads, n) - T.scatter_add(flow, tails, n)
        if self.damping is not None:
            out = out + self.damping.reshape(-1, 1) * psi
        return out


def init_projection_params(params: ModelParams, in_dim: int, fields: int) -> None:
    """Five 1x1 projections with zero biases."""
    for name in PROJECTIONS:
        params.normal(f"proj.{name}.w", (in_dim, fields), 1.0 / np.sqrt(in_dim), "projection")
        params.zeros(f"proj.{name}.b", (fields,), "projection")


def project_operators(
    h: TensorLike, view: Dict[str, Tensor]
) -> Tuple[Tensor, OperatorCoeffs]:
    """Fresh psi and operator coefficients from per-pixel features (H, W, D)."""
    h = T.as_tensor(h)
    if h.ndim != 3:
        raise DimensionError(f"h must be (H, W, D), got {h.shape}")
    out = {name: h @ view[f"proj.{name}.w"] + view[f"proj.{name}.b"] for name in PROJECTIONS}
    coeffs = OperatorCoeffs(
        sigma=T.softplus(out["sigma"]),
        alpha=out["alpha"],
        gamma=T.softplus(out["gamma"]) + GAMMA_FLOOR,
        s=T.clamp(out["s"], -SOURCE_BOUND, SOURCE_BOUND),
    )
    return out["psi"], coeffs


def _check_finite(value: Tensor, term: str) -> None:
    if not np.all(np.isfinite(value.numpy())):
        raise NumericError(f"non-finite values in the {term} term", term=term)


def euler_step(
    psi: TensorLike,
    coeffs: OperatorCoeffs,
    J: PoissonTensor,
    stencil: SpatialOperator,
    dt: float,
) -> Tensor:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    psi = T.as_tensor(psi)
    terms = (
        ("diffusion", -(coeffs.sigma * stencil.apply(psi))),
        ("advection", coeffs.alpha * J.apply(psi)),
        ("damping", -(coeffs.gamma * psi)),
        ("source", coeffs.s),
    )
    total = None
    for name, value in terms:
        _check_finite(value, name)
        total = value if total is None else total + value
    updated = psi + total * dt
    _check_finite(updated, "update")
    return updated


def evolve(
    psi0: TensorLike,
    coeffs: OperatorCoeffs,
    J: PoissonTensor,
    stencil: SpatialOperator,
    dt: float,
    substeps: int = 1,
) -> Tensor:
    return trajectory(psi0, coeffs, J, stencil, dt, substeps)[-1]


def trajectory(
    psi0: TensorLike,
    coeffs: OperatorCoeffs,
    J: PoissonTensor,
    stencil: SpatialOperator,
    dt: float,
    substeps: int,
) -> List[Tensor]:
    """psi0 followed by the state after each substep."""
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    states = [T.as_tensor(psi0)]
    for step in range(substeps):
        try:
            states.append(euler_step(states[-1], coeffs, J, stencil, dt))
        except NumericError as e:
            error = NumericError(f"substep {step}: {e}", term=e.term)
            error.substep = step
            raise error from e
    return states
