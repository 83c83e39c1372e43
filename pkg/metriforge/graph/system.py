from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from metriforge.errors import DimensionError, ResourceError
from metriforge.graph.topology import GraphTopology

DENSE_NODE_CAP = 2000


class ScreenedSystem(BaseModel):
    """
    The operator A = L_W + diag(damping) on a fixed topology. Positive
    conductances and positive damping make A symmetric positive definite.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    topology: GraphTopology
    conductance: np.ndarray
    damping: np.ndarray

    @field_validator("conductance", "damping", mode="before")
    @classmethod
    def _as_float(cls, value):
        return np.asarray(value, dtype=float).reshape(-1)

    @model_validator(mode="after")
    def _check(self):
        if self.conductance.shape != (self.topology.n_edges,):
            raise DimensionError(
                f"expected {self.topology.n_edges} conductances, "
                f"got {self.conductance.shape[0]}"
            )
        if self.damping.shape != (self.topology.n_nodes,):
            raise DimensionError(
                f"expected {self.topology.n_nodes} damping values, "
                f"got {self.damping.shape[0]}"
            )
        if not np.all(self.conductance > 0):
            raise ValueError("conductances must be strictly positive")
        if not np.all(self.damping > 0):
            raise ValueError("damping must be strictly positive")
        return self

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes

    def diagonal(self) -> np.ndarray:
        diag = self.damping.copy()
        diag += np.bincount(self.topology.heads, self.conductance, self.n_nodes)
        diag += np.bincount(self.topology.tails, self.conductance, self.n_nodes)
        return diag

    def with_damping(self, damping: np.ndarray) -> "ScreenedSystem":
        return ScreenedSystem(
            topology=self.topology, conductance=self.conductance, damping=damping
        )


def field_systems(
    topology: GraphTopology, conductance: np.ndarray, damping: np.ndarray
) -> List[ScreenedSystem]:
    """One system per column of an (n, K) damping matrix, sharing conductances."""
    damping = np.asarray(damping, dtype=float)
    if damping.ndim == 1:
        damping = damping[:, None]
    return [
        ScreenedSystem(topology=topology, conductance=conductance, damping=damping[:, k])
        for k in range(damping.shape[1])
    ]


def laplacian_apply(system: ScreenedSystem, psi: np.ndarray) -> np.ndarray:
    """Matrix-free (L_W + diag(damping)) psi in O(|E|)."""
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (system.n_nodes,):
        raise DimensionError(f"psi must have shape ({system.n_nodes},), got {psi.shape}")
    heads, tails = system.topology.heads, system.topology.tails
    flow = system.conductance * (psi[heads] - psi[tails])
    out = system.damping * psi
    out += np.bincount(heads, flow, system.n_nodes)
    out -= np.bincount(tails, flow, system.n_nodes)
    return out


def assemble_dense(system: ScreenedSystem, cap: int = DENSE_NODE_CAP) -> np.ndarray:
    n = system.n_nodes
    if n > cap:
        raise ResourceError(f"dense assembly of {n} nodes exceeds cap {cap}")
    heads, tails = system.topology.heads, system.topology.tails
    w = system.conductance
    dense = np.diag(system.damping).astype(float)
    np.add.at(dense, (heads, heads), w)
    np.add.at(dense, (tails, tails), w)
    np.add.at(dense, (heads, tails), -w)
    np.add.at(dense, (tails, heads), -w)
    return dense


def dirichlet_energy(system: ScreenedSystem, psi: np.ndarray, b: np.ndarray) -> float:
    """1/2 sum_e w_e (psi_i - psi_j)^2 + 1/2 sum_i lambda_i psi_i^2 - b.psi"""
    psi = np.asarray(psi, dtype=float)
    b = np.asarray(b, dtype=float)
    if psi.shape != (system.n_nodes,) or b.shape != psi.shape:
        raise DimensionError(
            f"psi {psi.shape} and b {b.shape} must both have shape ({system.n_nodes},)"
        )
    diff = psi[system.topology.heads] - psi[system.topology.tails]
    return float(
        0.5 * np.dot(system.conductance, diff**2)
        + 0.5 * np.dot(system.damping, psi**2)
        - np.dot(b, psi)
    )
