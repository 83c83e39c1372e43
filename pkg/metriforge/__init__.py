from metriforge.api import (
    Readout,
    Scan,
    ScanKind,
    Solver,
    SolverKind,
    create_maze,
    create_system,
)
from metriforge.dynamics.readout import ReadoutKind

__all__ = [
    "Solver",
    "Scan",
    "Readout",
    "create_system",
    "create_maze",
    "SolverKind",
    "ScanKind",
    "ReadoutKind",
]
