from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from metriforge.autodiff.tensor import Tape, Tensor


class ParamEntry:
    __slots__ = ("value", "grad", "group")

    def __init__(self, value: np.ndarray, group: str):
        self.value = value
        self.grad = np.zeros_like(value)
        self.group = group


class ModelParams:
    """Named parameter registry. Each entry lives in exactly one optimizer group."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._entries: Dict[str, ParamEntry] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, entry in self._entries.items():
            yield name, entry.value

    def group_of(self, name: str) -> str:
        return self._entries[name].group

    def groups(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for name, entry in self._entries.items():
            out.setdefault(entry.group, []).append(name)
        return out

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def count(self) -> int:
        return int(sum(e.value.size for e in self._entries.values()))

    def add(self, name: str, value, group: str = "default") -> np.ndarray:
        if name in self._entries:
            raise ValueError(f"Parameter '{name}' already registered")
        value = np.array(value, dtype=self.dtype)
        self._entries[name] = ParamEntry(value, group)
        return value

    def normal(
        self, name: str, shape, scale: float, group: str = "default"
    ) -> np.ndarray:
        return self.add(name, self.rng.normal(0.0, scale, size=shape), group)

    def zeros(self, name: str, shape, group: str = "default") -> np.ndarray:
        return self.add(name, np.zeros(shape), group)

    def set(self, name: str, value) -> None:
        entry = self._entries[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != entry.value.shape:
            raise ValueError(
                f"Parameter '{name}' has shape {entry.value.shape}, got {value.shape}"
            )
        entry.value = value.copy()

    def watch(self, tape: Tape) -> Dict[str, Tensor]:
        return {name: tape.watch(e.value) for name, e in self._entries.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor(e.value) for name, e in self._entries.items()}

    def collect(self, tape: Tape, watched: Dict[str, Tensor]) -> None:
        for name, tensor in watched.items():
            self._entries[name].grad = tape.gradient(tensor)

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            entry.grad = np.zeros_like(entry.value)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(e.grad**2) for e in self._entries.values())))

    def copy(self, seed: Optional[int] = None) -> "ModelParams":
        clone = ModelParams(self.seed if seed is None else seed, self.dtype)
        for name, entry in self._entries.items():
            clone.add(name, entry.value.copy(), entry.group)
        return clone

    def astype(self, dtype) -> "ModelParams":
        clone = ModelParams(self.seed, dtype)
        for name, entry in self._entries.items():
            clone.add(name, entry.value, entry.group)
        return clone
