"""
Conserved-current readouts of evolved fields.

All three kinds take an (H, W, K) field and return per-pixel features with
fields on the last axis. Pairs (a, b) with a < b follow ``np.triu_indices``.
"""

from enum import Enum
from typing import List, Literal, Optional, Protocol, Tuple, Union, runtime_checkable

import numpy as np
from pydantic import BaseModel, ConfigDict

from metriforge.autodiff import tensor as T
from metriforge.autodiff.tensor import Tensor, TensorLike
from metriforge.dynamics.metriplectic import SpatialOperator, StencilLaplacian
from metriforge.errors import DimensionError
from metriforge.utils import parse_enum

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
FORWARD_X = np.array([[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]])


class ReadoutKind(Enum):
    STRESS_ENERGY = "stress_energy"
    CURVATURE = "curvature"
    NOETHER = "noether"


class GradientInit(Enum):
    SOBEL = "sobel"
    FORWARD_DIFFERENCE = "forward_difference"


class ReadoutParameters(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gradient_init: GradientInit = GradientInit.SOBEL
    padding: Literal["replicate", "periodic"] = "replicate"


def pair_count(fields: int) -> int:
    return fields * (fields - 1) // 2


def feature_count(kind: Union[str, ReadoutKind], fields: int) -> int:
    kind = parse_enum(kind, ReadoutKind)
    if fields < 1:
        raise ValueError(f"fields must be >= 1, got {fields}")
    match kind:
        case ReadoutKind.STRESS_ENERGY:
            return fields + 2 * pair_count(fields)
        case ReadoutKind.CURVATURE:
            return fields + pair_count(fields)
        case ReadoutKind.NOETHER:
            return 5 * fields + 3 * pair_count(fields)


def gradient_kernels(
    fields: int, init: Union[str, GradientInit] = GradientInit.SOBEL
) -> Tuple[np.ndarray, np.ndarray]:
    """(K, 3, 3) kernels for d/dx (along columns) and d/dy (along rows)."""
    match parse_enum(init, GradientInit):
        case GradientInit.SOBEL:
            kx = SOBEL_X
        case GradientInit.FORWARD_DIFFERENCE:
            kx = FORWARD_X
    return np.tile(kx, (fields, 1, 1)), np.tile(kx.T, (fields, 1, 1))


class GradientField(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    gx: Tensor
    gy: Tensor

    @classmethod
    def of(
        cls,
        psi: TensorLike,
        kx: TensorLike,
        ky: TensorLike,
        padding: str = "replicate",
    ) -> "GradientField":
        return cls(
            gx=T.depthwise_conv3x3(psi, kx, padding),
            gy=T.depthwise_conv3x3(psi, ky, padding),
        )


def _selectors(fields: int) -> Tuple[np.ndarray, np.ndarray]:
    """One-hot (K, P) matrices picking the first and second member of each pair."""
    first, second = np.triu_indices(fields, k=1)
    eye = np.eye(fields)
    return eye[:, first], eye[:, second]


def _check_grid(*tensors: Tensor) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1 or tensors[0].ndim != 3:
        raise DimensionError(f"expected matching (H, W, K) fields, got {sorted(shapes)}")


class ReadoutFeatures(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    E_diag: Tensor
    E_cross: Tensor
    V: Tensor

    def stack(self) -> Tensor:
        return T.concat([self.E_diag, self.E_cross, self.V], axis=-1)


def stress_energy(gx: TensorLike, gy: TensorLike) -> ReadoutFeatures:
    """Trace (energy density) and antisymmetric shear (vorticity) of d_i psi_a d_j psi_b."""
    gx, gy = T.as_tensor(gx), T.as_tensor(gy)
    _check_grid(gx, gy)
    first, second = _selectors(gx.shape[-1])
    gx_a, gx_b = gx @ first, gx @ second
    gy_a, gy_b = gy @ first, gy @ second
    return ReadoutFeatures(
        E_diag=gx * gx + gy * gy,
        E_cross=gx_a * gx_b + gy_a * gy_b,
        V=gx_a * gy_b - gx_b * gy_a,
    )


def shear_parts(gx: TensorLike, gy: TensorLike) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric and antisymmetric halves of T^{xy}, each (H, W, K, K)."""
    gx, gy = np.asarray(T.as_tensor(gx).numpy()), np.asarray(T.as_tensor(gy).numpy())
    txy = gx[..., :, None] * gy[..., None, :]
    swapped = np.swapaxes(txy, -1, -2)
    return 0.5 * (txy + swapped), 0.5 * (txy - swapped)


def grid_positions(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """x along columns and y along rows, both spanning [-1, 1] with the origin centred."""

    def axis(n):
        return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)

    y, x = np.meshgrid(axis(height), axis(width), indexing="ij")
    return x[..., None], y[..., None]


def noether_currents(
    psi: TensorLike,
    gx: TensorLike,
    gy: TensorLike,
    positions: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tensor:
    """
    Per field: momentum (p_x, p_y), angular momentum, dilation and energy density.
    Per pair: cross energy, vorticity and cross angular momentum
    x (psi_a gy_b - psi_b gy_a) - y (psi_a gx_b - psi_b gx_a).
    """
    psi, gx, gy = T.as_tensor(psi), T.as_tensor(gx), T.as_tensor(gy)
    _check_grid(psi, gx, gy)
    x, y = positions if positions is not None else grid_positions(*psi.shape[:2])
    px, py = psi * gx, psi * gy
    angular = x * py - y * px
    dilation = x * px + y * py
    energy = stress_energy(gx, gy)

    first, second = _selectors(psi.shape[-1])
    psi_a, psi_b = psi @ first, psi @ second
    cross_y = psi_a * (gy @ second) - psi_b * (gy @ first)
    cross_x = psi_a * (gx @ second) - psi_b * (gx @ first)
    cross_angular = x * cross_y - y * cross_x
    return T.concat(
        [px, py, angular, dilation, energy.E_diag, energy.E_cross, energy.V, cross_angular],
        axis=-1,
    )


class CurvatureFeatures(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    diag: Tensor
    anti: Tensor
    cross: Tensor

    def stack(self) -> Tensor:
        return T.concat([self.diag, self.anti], axis=-1)


def field_curvature(psi: TensorLike, stencil: StencilLaplacian) -> CurvatureFeatures:
    """psi_a * lap(psi_b) products; the stencil is PSD so lap = -stencil."""
    psi = T.as_tensor(psi)
    _check_grid(psi)
    lap = -stencil.apply(psi)
    first, second = _selectors(psi.shape[-1])
    psi_a, psi_b = psi @ first, psi @ second
    lap_a, lap_b = lap @ first, lap @ second
    return CurvatureFeatures(
        diag=psi * lap,
        anti=psi_a * lap_b - psi_b * lap_a,
        cross=psi_a * lap_b,
    )


@runtime_checkable
class Readout(Protocol):
    params: ReadoutParameters

    def kernels(self, fields: int) -> Tuple[np.ndarray, np.ndarray]: ...

    def feature_count(self, fields: int) -> int: ...

    def features(
        self,
        psi: TensorLike,
        kx: Optional[TensorLike] = None,
        ky: Optional[TensorLike] = None,
        stencil: Optional[SpatialOperator] = None,
    ) -> Tensor: ...


class FieldReadout:
    """Kernels and gradients shared by every readout kind; each subclass adds ``features``."""

    params_class = ReadoutParameters
    kind: ReadoutKind

    def __init__(self, params: ReadoutParameters):
        self.params = params

    def kernels(self, fields: int) -> Tuple[np.ndarray, np.ndarray]:
        return gradient_kernels(fields, self.params.gradient_init)

    def gradients(self, psi: TensorLike, kx=None, ky=None) -> GradientField:
        psi = T.as_tensor(psi)
        if kx is None or ky is None:
            kx, ky = self.kernels(psi.shape[-1])
        return GradientField.of(psi, kx, ky, self.params.padding)

    def feature_count(self, fields: int) -> int:
        return feature_count(self.kind, fields)


class StressEnergyReadout(FieldReadout, Readout):
    kind = ReadoutKind.STRESS_ENERGY

    def features(self, psi, kx=None, ky=None, stencil=None) -> Tensor:
        grad = self.gradients(psi, kx, ky)
        return stress_energy(grad.gx, grad.gy).stack()


class NoetherReadout(FieldReadout, Readout):
    kind = ReadoutKind.NOETHER

    def features(self, psi, kx=None, ky=None, stencil=None) -> Tensor:
        grad = self.gradients(psi, kx, ky)
        return noether_currents(psi, grad.gx, grad.gy)


class CurvatureReadout(FieldReadout, Readout):
    kind = ReadoutKind.CURVATURE

    def features(self, psi, kx=None, ky=None, stencil=None) -> Tensor:
        psi = T.as_tensor(psi)
        if stencil is None:
            stencil = StencilLaplacian.five_point(psi.shape[-1], self.params.padding)
        return field_curvature(psi, stencil).stack()


READOUTS = {
    ReadoutKind.STRESS_ENERGY: StressEnergyReadout,
    ReadoutKind.CURVATURE: CurvatureReadout,
    ReadoutKind.NOETHER: NoetherReadout,
}


def compute_readout(
    kind: Union[str, ReadoutKind],
    psi: TensorLike,
    kx=None,
    ky=None,
    stencil=None,
    params: Optional[ReadoutParameters] = None,
) -> Tensor:
    readout: Readout = READOUTS[parse_enum(kind, ReadoutKind)](params or ReadoutParameters())
    return readout.features(psi, kx, ky, stencil)


def feature_names(kind: Union[str, ReadoutKind], fields: int) -> List[str]:
    """Column labels in the order the readout emits them."""
    kind = parse_enum(kind, ReadoutKind)
    pairs = [f"{a}_{b}" for a, b in zip(*np.triu_indices(fields, k=1))]
    per_field = [str(k) for k in range(fields)]
    match kind:
        case ReadoutKind.STRESS_ENERGY:
            families = [("E", per_field), ("E", pairs), ("V", pairs)]
        case ReadoutKind.CURVATURE:
            families = [("psi_lap", per_field), ("twist", pairs)]
        case ReadoutKind.NOETHER:
            families = [
                ("p_x", per_field),
                ("p_y", per_field),
                ("L", per_field),
                ("D", per_field),
                ("E", per_field),
                ("E", pairs),
                ("V", pairs),
                ("L", pairs),
            ]
    return [f"{prefix}_{suffix}" for prefix, suffixes in families for suffix in suffixes]
