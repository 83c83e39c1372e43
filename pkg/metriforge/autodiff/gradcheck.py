from typing import Callable, Dict, List, Optional

import numpy as np
from pydantic import BaseModel

from metriforge.autodiff.tensor import Tape, Tensor

ScalarFn = Callable[[Dict[str, Tensor]], Tensor]


class GradCheckRow(BaseModel):
    parameter: str
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


def tape_gradients(fn: ScalarFn, inputs: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    tape = Tape()
    watched = {name: tape.watch(value) for name, value in inputs.items()}
    loss = fn(watched)
    tape.backward(loss)
    return {name: tape.gradient(t) for name, t in watched.items()}


def _evaluate(fn: ScalarFn, inputs: Dict[str, np.ndarray]) -> float:
    return fn({name: Tensor(value) for name, value in inputs.items()}).item()


def numeric_gradient(
    fn: ScalarFn,
    inputs: Dict[str, np.ndarray],
    name: str,
    step: float = 1e-5,
    entries: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``inputs[name]``."""
    base = inputs[name]
    flat_entries = np.arange(base.size) if entries is None else entries
    grad = np.zeros(base.size)
    for flat in flat_entries:
        values = []
        for sign in (1.0, -1.0):
            perturbed = base.copy().reshape(-1)
            perturbed[flat] += sign * step
            values.append(_evaluate(fn, {**inputs, name: perturbed.reshape(base.shape)}))
        grad[flat] = (values[0] - values[1]) / (2 * step)
    return grad.reshape(base.shape)


def check_gradients(
    fn: ScalarFn,
    inputs: Dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    label: str = "",
) -> List[GradCheckRow]:
    """
    Compare tape gradients with central finite differences, one row per input.
    The relative error is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` over the
    checked entries (a random subset when ``max_entries`` is set).
    """
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = tape_gradients(fn, inputs)
    rng = np.random.default_rng(seed)

    rows = []
    for name, value in inputs.items():
        entries = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            entries = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        numeric = numeric_gradient(fn, inputs, name, step, entries).reshape(-1)[entries]
        tape_grad = analytic[name].reshape(-1)[entries]

        a_norm = float(np.linalg.norm(tape_grad))
        n_norm = float(np.linalg.norm(numeric))
        scale = max(a_norm, n_norm, 1e-7)
        rel = float(np.linalg.norm(tape_grad - numeric)) / scale
        rows.append(
            GradCheckRow(
                parameter=f"{label}{name}",
                analytic=a_norm,
                numeric=n_norm,
                rel_error=rel,
                passed=rel <= tolerance,
            )
        )
    return rows
