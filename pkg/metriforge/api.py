from enum import Enum
from typing import Any, ClassVar, Dict, Optional, Type, Union

import numpy as np

from metriforge.autodiff.tensor import TensorLike
from metriforge.domains.maze import Maze, generate_maze
from metriforge.dynamics import readout as field_readout
from metriforge.dynamics.readout import READOUTS, ReadoutKind
from metriforge.graph.system import ScreenedSystem
from metriforge.graph.topology import grid_topology
from metriforge.solvers.cg import ConjugateGradientSolver, SolveRecord
from metriforge.solvers.scan import ParallelScan, SequentialScan, coefficients
from metriforge.utils import parse_enum


class _Facade:
    """
    Enum-keyed front for an engine class that carries a pydantic ``params_class``.

    Subclasses set ``kind_enum`` and ``engines``; configs come in as a dict,
    keyword arguments or both, keywords winning.
    """

    kind_enum: ClassVar[Type[Enum]]
    engines: ClassVar[Dict[Enum, type]]

    def __init__(self, kind: Union[str, Enum], config: Optional[dict] = None, **kwargs):
        self.kind = parse_enum(kind, self.kind_enum)
        engine = self.engines.get(self.kind)
        assert engine is not None, f"no engine registered for {self.kind}"
        self._engine = engine(engine.params_class(**{**(config or {}), **kwargs}))

    def update_config(self, config: Optional[dict] = None, **kwargs):
        config = {**(config or {}), **kwargs}
        self._engine.params = self._engine.params_class(**config)

    def get_config(self) -> Dict[str, Any]:
        return self._engine.params.model_dump(mode="json")


class SolverKind(Enum):
    CG = "CG"


class Solver(_Facade):
    kind_enum = SolverKind
    engines = {SolverKind.CG: ConjugateGradientSolver}

    def solve(self, system: ScreenedSystem, b) -> SolveRecord:
        return self._engine.solve(system, np.asarray(b, dtype=float))

    def gradient(self, system: ScreenedSystem, b, psi, upstream):
        return self._engine.gradient(system, b, psi, upstream)


class ScanKind(Enum):
    SEQUENTIAL = "SEQUENTIAL"
    PARALLEL = "PARALLEL"


class Scan(_Facade):
    kind_enum = ScanKind
    engines = {
        ScanKind.SEQUENTIAL: SequentialScan,
        ScanKind.PARALLEL: ParallelScan,
    }

    def solve(self, w, lam, b) -> np.ndarray:
        """Causal screened solve of the chain with couplings ``w``, damping ``lam`` and sources ``b``."""
        return self._engine.run(coefficients(w, lam, b))


class Readout(_Facade):
    kind_enum = ReadoutKind
    engines = READOUTS

    def __init__(self, kind: Union[str, ReadoutKind], config: Optional[dict] = None, **kwargs):
        super().__init__(kind, config, **kwargs)
        assert isinstance(
            self._engine, field_readout.Readout
        ), f"{self._engine.__class__.__name__} is not a field readout"

    def feature_count(self, fields: int) -> int:
        return self._engine.feature_count(fields)

    def features(self, psi: TensorLike) -> np.ndarray:
        return self._engine.features(psi).numpy()


def create_system(
    height: int,
    width: int,
    conductance: Union[float, np.ndarray] = 1.0,
    damping: Union[float, np.ndarray] = 1.0,
    connectivity: int = 4,
) -> ScreenedSystem:
    topology = grid_topology(height, width, connectivity)
    return ScreenedSystem(
        topology=topology,
        conductance=np.broadcast_to(conductance, (topology.n_edges,)).astype(float),
        damping=np.broadcast_to(damping, (topology.n_nodes,)).astype(float),
    )


def create_maze(size: int, seed: int) -> Maze:
    return generate_maze(size, size, seed)
