from enum import Enum
from pathlib import Path
from typing import List, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from metriforge.solvers.cg import CgConfig

TAU_MIN, TAU_MAX = 0.2, 1.0


class Activation(Enum):
    SILU = "SILU"
    RELU = "RELU"


class FeedbackParameters(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau_start: float = Field(1.0, ge=TAU_MIN, le=TAU_MAX)
    tau_end: float = Field(0.2, ge=TAU_MIN, le=TAU_MAX)

    @model_validator(mode="after")
    def _check_annealing(self):
        if self.tau_end > self.tau_start:
            raise ValueError(f"tau_end {self.tau_end} must not exceed tau_start {self.tau_start}")
        return self


class PoissonLayerParameters(BaseModel):
    """Configuration of one recurrent Poisson layer (shared weights across rounds)."""

    model_config = ConfigDict(extra="forbid")

    fields: int = Field(2, ge=1)
    rounds: int = Field(1, ge=1)
    classes: int = Field(5, ge=2)
    input_dim: int = Field(4, ge=1)
    feature_dim: int = Field(16, ge=1)
    hidden_widths: List[int] = [32, 32]
    activation: Activation = Activation.SILU
    objects: int = Field(0, ge=0)
    object_fields: int = Field(2, ge=1)
    feedback: FeedbackParameters = FeedbackParameters()
    normalize_restriction: bool = True
    lambda_over_n: bool = False
    connectivity: Literal[4, 8] = 4
    solver: CgConfig = CgConfig(max_iters=500)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_widths(self):
        if any(width < 1 for width in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        return self

    @property
    def scan_dim(self) -> int:
        return 8 * self.fields

    @property
    def object_dim(self) -> int:
        return self.object_fields if self.objects else 0

    @property
    def rich_dim(self) -> int:
        # h, p, previous psi, its scans, cross-field mean/var, previous objects
        return self.feature_dim + 2 + self.fields + self.scan_dim + 2 + self.object_dim

    @property
    def decoder_dim(self) -> int:
        return 2 * self.fields + self.feature_dim + 2 + self.scan_dim + self.object_dim


def load_layer_config(path: Union[str, Path]) -> PoissonLayerParameters:
    return PoissonLayerParameters.model_validate_json(Path(path).read_text())
