"""
Residual metriplectic layer on image features:

    h -> project psi and coefficients -> Euler substeps -> readout -> h + silu(linear)
"""

from typing import Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from metriforge.autodiff import tensor as T
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tensor, TensorLike
from metriforge.dynamics.metriplectic import (
    LAPLACIAN_5PT,
    PoissonTensor,
    StencilLaplacian,
    evolve,
    init_projection_params,
    project_operators,
)
from metriforge.dynamics.readout import (
    READOUTS,
    ReadoutKind,
    ReadoutParameters,
    feature_count,
)


class MetriplecticParameters(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: int = Field(default=8, ge=1)
    fields: int = Field(default=4, ge=1)
    dt: float = Field(default=0.1, gt=0)
    substeps: int = Field(default=1, ge=1)
    readout: ReadoutKind = ReadoutKind.STRESS_ENERGY
    readout_params: ReadoutParameters = ReadoutParameters()


def init_metriplectic_params(cfg: MetriplecticParameters, seed: int = 0) -> ModelParams:
    params = ModelParams(seed=seed)
    k = cfg.fields
    init_projection_params(params, cfg.channels, k)
    params.normal("J_raw", (k, k), 1.0 / np.sqrt(k), "poisson")
    params.add("stencil", np.tile(LAPLACIAN_5PT, (k, 1, 1)), "stencil")
    kx, ky = READOUTS[cfg.readout](cfg.readout_params).kernels(k)
    params.add("grad_x", kx, "readout")
    params.add("grad_y", ky, "readout")
    n_features = feature_count(cfg.readout, k)
    params.normal("out.w", (n_features, cfg.channels), 1.0 / np.sqrt(n_features), "readout")
    params.zeros("out.b", (cfg.channels,), "readout")
    return params


def metriplectic_layer(
    h: TensorLike, view: Dict[str, Tensor], cfg: MetriplecticParameters
) -> Tensor:
    h = T.as_tensor(h)
    psi0, coeffs = project_operators(h, view)
    stencil = StencilLaplacian(view["stencil"], cfg.readout_params.padding)
    psi = evolve(psi0, coeffs, PoissonTensor(view["J_raw"]), stencil, cfg.dt, cfg.substeps)
    readout = READOUTS[cfg.readout](cfg.readout_params)
    features = readout.features(psi, view["grad_x"], view["grad_y"], stencil)
    return h + T.silu(features @ view["out.w"] + view["out.b"])
