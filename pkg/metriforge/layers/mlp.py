from typing import Dict, Sequence

import numpy as np

from metriforge.autodiff import tensor as T
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tensor, TensorLike
from metriforge.layers.parameters import Activation


def init_mlp(
    params: ModelParams,
    prefix: str,
    sizes: Sequence[int],
    group: str,
    zero_last: bool = False,
) -> None:
    """Dense layers ``prefix.{i}.w`` / ``prefix.{i}.b`` with 1/sqrt(fan_in) scale."""
    layers = list(zip(sizes[:-1], sizes[1:]))
    for i, (fan_in, fan_out) in enumerate(layers):
        if zero_last and i == len(layers) - 1:
            params.zeros(f"{prefix}.{i}.w", (fan_in, fan_out), group)
        else:
            params.normal(f"{prefix}.{i}.w", (fan_in, fan_out), 1.0 / np.sqrt(fan_in), group)
        params.zeros(f"{prefix}.{i}.b", (fan_out,), group)


def activate(x: Tensor, activation: Activation) -> Tensor:
    match activation:
        case Activation.SILU:
            return T.silu(x)
        case Activation.RELU:
            return T.relu(x)
    raise ValueError(f"Unknown activation {activation}")


def mlp(
    view: Dict[str, Tensor],
    prefix: str,
    x: TensorLike,
    activation: Activation = Activation.SILU,
) -> Tensor:
    out = T.as_tensor(x)
    i = 0
    while f"{prefix}.{i}.w" in view:
        if i:
            out = activate(out, activation)
        out = out @ view[f"{prefix}.{i}.w"] + view[f"{prefix}.{i}.b"]
        i += 1
    if i == 0:
        raise KeyError(f"no layers registered under '{prefix}'")
    return out
