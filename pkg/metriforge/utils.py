import os
from enum import Enum
from typing import Optional, Type, TypeVar, Union

import numpy as np


E = TypeVar("E", bound=Enum)

THREADS_ENV = "METRIFORGE_THREADS"


def parse_enum(
    value: Union[str, E], enum_class: Type[E], case_sensitive: bool = False
) -> E:
    if isinstance(value, enum_class):
        return value

    if isinstance(value, str):
        available = [e.name for e in enum_class]
        # CLI spellings use dashes ("stress-energy")
        key = value.replace("-", "_")
        try:
            if case_sensitive:
                return enum_class[key]
            lookup = {k.upper(): v for k, v in enum_class.__members__.items()}
            return lookup[key.upper()]
        except KeyError:
            options = ", ".join(available)
            raise ValueError(
                f"Unknown value '{value}' for {enum_class.__name__}. "
                f"Available options: {options}"
            )

    raise TypeError(
        f"Value must be string or {enum_class.__name__}, got {type(value).__name__}"
    )


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def relative_error(actual, expected, floor: float = 1e-12) -> float:
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    scale = max(float(np.max(np.abs(expected), initial=0.0)), floor)
    return float(np.max(np.abs(actual - expected), initial=0.0) / scale)


def make_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.default_rng(seed)
