"""
Two-level learned multigrid: soft assignment of cells to objects, a screened
solve on the complete object graph, and prolongation back to the cells.
"""

import logging
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import entr

from metriforge.autodiff import tensor as T
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tensor, TensorLike
from metriforge.graph.topology import complete_topology
from metriforge.layers.mlp import init_mlp, mlp
from metriforge.layers.parameters import Activation, PoissonLayerParameters
from metriforge.solvers.cg import CgConfig, screened_solve

log = logging.getLogger(__name__)

MASS_EPS = 1e-8
TAU_FLOOR = 0.05


def restrict(rho: TensorLike, f: TensorLike, normalize: bool = True) -> Tensor:
    """Pool cell features onto objects: rho^T f, optionally divided by object mass."""
    rho, f = T.as_tensor(rho), T.as_tensor(f)
    pooled = T.transpose(rho) @ f
    if not normalize:
        return pooled
    mass = T.tsum(rho, axis=0)
    empty = mass.data <= 0
    if np.any(empty):
        log.warning("%d object(s) received zero assignment mass", int(empty.sum()))
    guard = np.where(empty, MASS_EPS, 0.0)
    return pooled / (mass + guard).reshape(-1, 1)


def prolongate(rho: TensorLike, o: TensorLike) -> Tensor:
    return T.as_tensor(rho) @ T.as_tensor(o)


def init_object_params(
    params: ModelParams, cfg: PoissonLayerParameters, cell_dim: int
) -> None:
    hidden = list(cfg.hidden_widths)
    init_mlp(params, "assign", [cfg.fields + 2, *hidden, cfg.objects], "objects")
    params.zeros("assign.tau_raw", (1,), "objects")
    init_mlp(params, "object_pair", [2 * cell_dim, *hidden, 1], "objects")
    init_mlp(params, "object_damping", [cell_dim, *hidden, cfg.object_fields], "objects")
    init_mlp(params, "object_source", [cell_dim, *hidden, cfg.object_fields], "objects")


def assignment_temperature(view: Dict[str, Tensor]) -> Tensor:
    return T.softplus(view["assign.tau_raw"]) + TAU_FLOOR


def assign(
    view: Dict[str, Tensor],
    psi_normalized: TensorLike,
    positions: np.ndarray,
    activation: Activation = Activation.SILU,
) -> Tensor:
    """rho = softmax(MLP([psi~ | p]) / tau_assign), one simplex row per cell."""
    logits = mlp(view, "assign", T.concat([psi_normalized, positions], axis=1), activation)
    return T.softmax(logits / assignment_temperature(view), axis=1)


def vcycle(
    rho: TensorLike,
    cell_features: TensorLike,
    view: Dict[str, Tensor],
    solver: Optional[CgConfig] = None,
    normalize: bool = True,
    activation: Activation = Activation.SILU,
) -> Tensor:
    """Restrict, solve on the object graph, prolongate. Returns (n, object_fields)."""
    rho = T.as_tensor(rho)
    pooled = restrict(rho, cell_features, normalize)
    topology = complete_topology(rho.shape[1])

    left = T.gather(pooled, topology.heads)
    right = T.gather(pooled, topology.tails)
    pair = T.concat([left + right, left * right], axis=1)
    conductance = T.softplus(mlp(view, "object_pair", pair, activation)).reshape(-1)
    damping = T.softplus(mlp(view, "object_damping", pooled, activation))
    source = mlp(view, "object_source", pooled, activation)

    coarse = screened_solve(topology, conductance, damping, source, solver)
    return prolongate(rho, coarse)


class AssignmentReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    active: int
    n_objects: int
    mean_entropy: float
    zero_mass: int
    cluster_map: np.ndarray


def assignment_diagnostics(rho: np.ndarray) -> AssignmentReport:
    rho = np.asarray(rho, dtype=float)
    return AssignmentReport(
        active=int(np.sum(rho.max(axis=0) > 0.5)),
        n_objects=rho.shape[1],
        mean_entropy=float(entr(rho).sum(axis=1).mean()),
        zero_mass=int(np.sum(rho.sum(axis=0) <= 0)),
        cluster_map=rho.argmax(axis=1),
    )
