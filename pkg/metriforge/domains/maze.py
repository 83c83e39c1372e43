"""
Tree mazes for path prediction.

Cells carry anonymous type indices; the generator alone knows which index
means wall, corridor, source or goal. Labels use five classes:
off-path corridor, path, source, goal and wall.
"""

from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import sparse
from scipy.sparse import csgraph

from metriforge.errors import DomainError
from metriforge.graph.topology import grid_topology


class CellType(Enum):
    WALL = "wall"
    CORRIDOR = "corridor"
    SOURCE = "source"
    GOAL = "goal"


class PathLabel(IntEnum):
    OFF_PATH = 0
    PATH = 1
    SOURCE = 2
    GOAL = 3
    WALL = 4


N_CLASSES = len(PathLabel)
N_TYPES = len(CellType)
DEFAULT_TYPE_MAP: Dict[CellType, int] = {
    CellType.WALL: 0,
    CellType.CORRIDOR: 1,
    CellType.SOURCE: 2,
    CellType.GOAL: 3,
}

Cell = Tuple[int, int]


class Maze(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: np.ndarray
    labels: np.ndarray
    source: Cell
    goal: Cell

    @model_validator(mode="after")
    def _check(self):
        if self.grid.ndim != 2 or self.grid.shape != self.labels.shape:
            raise ValueError(
                f"grid {self.grid.shape} and labels {self.labels.shape} must be matching 2-D arrays"
            )
        for label in (PathLabel.SOURCE, PathLabel.GOAL):
            count = int(np.sum(self.labels == label))
            if count != 1:
                raise ValueError(f"expected exactly one {label.name.lower()} cell, got {count}")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def n_cells(self) -> int:
        return self.grid.size

    @property
    def open_mask(self) -> np.ndarray:
        return self.labels != PathLabel.WALL

    @property
    def on_path(self) -> np.ndarray:
        return np.isin(self.labels, [PathLabel.PATH, PathLabel.SOURCE, PathLabel.GOAL])


def _check_type_map(type_map: Dict[CellType, int]) -> None:
    if sorted(type_map.values()) != list(range(N_TYPES)) or set(type_map) != set(CellType):
        raise ValueError(f"type map must send the {N_TYPES} cell types onto 0..{N_TYPES - 1}")


def _open_graph(open_mask: np.ndarray) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Adjacency between 4-neighbouring open cells, over all cells of the grid."""
    topology = grid_topology(*open_mask.shape)
    flat = open_mask.reshape(-1)
    edges = topology.edges[flat[topology.heads] & flat[topology.tails]]
    n = open_mask.size
    adjacency = sparse.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)
    ).tocsr()
    return adjacency, edges


def tree_path(open_mask: np.ndarray, source: Cell, goal: Cell) -> np.ndarray:
    """Flat indices of the corridor path from source to goal, endpoints included."""
    width = open_mask.shape[1]
    adjacency, _ = _open_graph(open_mask)
    start, end = source[0] * width + source[1], goal[0] * width + goal[1]
    _, predecessors = csgraph.breadth_first_order(
        adjacency, start, directed=False, return_predecessors=True
    )
    path = [end]
    while path[-1] != start:
        previous = predecessors[path[-1]]
        if previous < 0:
            raise DomainError(f"goal {goal} is unreachable from source {source}")
        path.append(previous)
    return np.array(path[::-1])


def is_spanning_tree(open_mask: np.ndarray) -> bool:
    """Open cells are connected and carry exactly one fewer edge than cells."""
    adjacency, edges = _open_graph(open_mask)
    cells = np.flatnonzero(open_mask.reshape(-1))
    if len(cells) == 0:
        return False
    _, membership = csgraph.connected_components(adjacency, directed=False)
    return len(np.unique(membership[cells])) == 1 and len(edges) == len(cells) - 1


def _labels(open_mask: np.ndarray, source: Cell, goal: Cell) -> np.ndarray:
    labels = np.where(open_mask, PathLabel.OFF_PATH, PathLabel.WALL).astype(int)
    flat = labels.reshape(-1)
    flat[tree_path(open_mask, source, goal)] = PathLabel.PATH
    labels[source] = PathLabel.SOURCE
    labels[goal] = PathLabel.GOAL
    return labels


def _grid(open_mask: np.ndarray, source: Cell, goal: Cell, type_map) -> np.ndarray:
    grid = np.where(open_mask, type_map[CellType.CORRIDOR], type_map[CellType.WALL])
    grid[source] = type_map[CellType.SOURCE]
    grid[goal] = type_map[CellType.GOAL]
    return grid.astype(int)


def _carve(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Randomized depth-first spanning tree on the odd-coordinate lattice."""
    open_mask = np.zeros((height, width), dtype=bool)
    rows, cols = np.arange(1, height, 2), np.arange(1, width, 2)
    start = (int(rng.choice(rows)), int(rng.choice(cols)))
    open_mask[start] = True
    stack = [start]
    while stack:
        r, c = stack[-1]
        moves = [
            (r + dr, c + dc)
            for dr, dc in ((-2, 0), (2, 0), (0, -2), (0, 2))
            if 0 < r + dr < height - 1 and 0 < c + dc < width - 1 and not open_mask[r + dr, c + dc]
        ]
        if not moves:
            stack.pop()
            continue
        nr, nc = moves[int(rng.integers(len(moves)))]
        open_mask[(r + nr) // 2, (c + nc) // 2] = True
        open_mask[nr, nc] = True
        stack.append((nr, nc))
    return open_mask


def generate_maze(
    height: int,
    width: int,
    seed: int,
    type_map: Optional[Dict[CellType, int]] = None,
) -> Maze:
    if height < 5 or width < 5 or height % 2 == 0 or width % 2 == 0:
        raise ValueError(f"maze sides must be odd and >= 5, got {height}x{width}")
    type_map = type_map or DEFAULT_TYPE_MAP
    _check_type_map(type_map)
    rng = np.random.default_rng(seed)

    open_mask = _carve(height, width, rng)
    first, second = rng.choice(np.flatnonzero(open_mask.reshape(-1)), size=2, replace=False)
    source = (int(first // width), int(first % width))
    goal = (int(second // width), int(second % width))
    return Maze(
        grid=_grid(open_mask, source, goal, type_map),
        labels=_labels(open_mask, source, goal),
        source=source,
        goal=goal,
    )


def generate_corpus(count: int, size: int, seed: int) -> List[Maze]:
    """``count`` mazes of side ``size``, maze i seeded from (seed, i)."""
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [generate_maze(size, size, int(s.generate_state(1)[0])) for s in seeds]


def maze_from_grid(grid: np.ndarray, type_map: Optional[Dict[CellType, int]] = None) -> Maze:
    """Rebuild labels from a type grid; the grid must hold one source and one goal."""
    type_map = type_map or DEFAULT_TYPE_MAP
    grid = np.asarray(grid, dtype=int)
    endpoints = []
    for kind in (CellType.SOURCE, CellType.GOAL):
        cells = np.argwhere(grid == type_map[kind])
        if len(cells) != 1:
            raise DomainError(f"expected one {kind.value} cell, found {len(cells)}")
        endpoints.append((int(cells[0][0]), int(cells[0][1])))
    source, goal = endpoints
    open_mask = grid != type_map[CellType.WALL]
    return Maze(grid=grid, labels=_labels(open_mask, source, goal), source=source, goal=goal)


def write_grid(path: Union[str, Path], grid: np.ndarray) -> None:
    """Header ``H W`` then H rows of W digits."""
    grid = np.asarray(grid, dtype=int)
    if grid.min() < 0 or grid.max() > 9:
        raise ValueError("grid values must be single digits")
    lines = [f"{grid.shape[0]} {grid.shape[1]}"]
    lines += ["".join(str(v) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path: Union[str, Path]) -> np.ndarray:
    lines = Path(path).read_text().split()
    height, width = int(lines[0]), int(lines[1])
    rows = lines[2:]
    if len(rows) != height or any(len(row) != width for row in rows):
        raise DomainError(f"{path}: expected {height} rows of {width} digits")
    return np.array([[int(ch) for ch in row] for row in rows], dtype=int)


def read_maze(path: Union[str, Path], type_map: Optional[Dict[CellType, int]] = None) -> Maze:
    return maze_from_grid(read_grid(path), type_map)
