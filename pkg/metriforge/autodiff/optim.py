from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from metriforge.autodiff.params import ModelParams


class AdamParameters(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(3e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: Optional[float] = 1.0
    group_lr: Dict[str, float] = {}


class Adam:
    params_class = AdamParameters

    def __init__(self, params: AdamParameters):
        self.params = params
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, model: ModelParams) -> None:
        beta1, beta2 = self.params.betas
        self.step_count += 1
        scale = 1.0
        clip = self.params.grad_clip
        if clip is not None:
            norm = model.grad_norm()
            if norm > clip:
                scale = clip / norm

        for name in model.names():
            grad = model.grad(name) * scale
            m = self._m.get(name, np.zeros_like(grad))
            v = self._v.get(name, np.zeros_like(grad))
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad**2
            self._m[name], self._v[name] = m, v

            m_hat = m / (1 - beta1**self.step_count)
            v_hat = v / (1 - beta2**self.step_count)
            lr = self.params.group_lr.get(model.group_of(name), self.params.lr)
            model.set(name, model[name] - lr * m_hat / (np.sqrt(v_hat) + self.params.eps))
