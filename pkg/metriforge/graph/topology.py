from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class GraphTopology(BaseModel):
    """Immutable node/edge adjacency. Edges are stored once with i < j."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n_nodes: int
    edges: np.ndarray
    positions: Optional[np.ndarray] = None
    grid_shape: Optional[Tuple[int, int]] = None

    @field_validator("edges", mode="before")
    @classmethod
    def _as_edge_array(cls, value):
        arr = np.asarray(value, dtype=np.intp)
        if arr.size == 0:
            arr = arr.reshape(0, 2)
        return arr

    @model_validator(mode="after")
    def _check(self):
        if self.n_nodes < 1:
            raise ValueError("a graph needs at least one node")
        edges = self.edges
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise ValueError(f"edges must have shape (m, 2), got {edges.shape}")
        if len(edges):
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise ValueError("edges must be stored with i < j")
            if edges.min() < 0 or edges.max() >= self.n_nodes:
                raise ValueError("edge index out of range")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ValueError("duplicate edges")
        if self.positions is not None and self.positions.shape != (self.n_nodes, 2):
            raise ValueError("positions must have shape (n_nodes, 2)")
        if self.grid_shape is not None:
            height, width = self.grid_shape
            if height * width != self.n_nodes:
                raise ValueError("grid_shape does not match n_nodes")
        return self

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def heads(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def tails(self) -> np.ndarray:
        return self.edges[:, 1]

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n_nodes)


@lru_cache(maxsize=64)
def grid_topology(height: int, width: int, connectivity: int = 4) -> GraphTopology:
    """Row-major grid; positions are (row, col) scaled to [0, 1]."""
    if height < 1 or width < 1:
        raise ValueError(f"grid must be at least 1x1, got {height}x{width}")
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")

    index = np.arange(height * width).reshape(height, width)
    pairs = [
        (index[:, :-1], index[:, 1:]),
        (index[:-1, :], index[1:, :]),
    ]
    if connectivity == 8:
        pairs.append((index[:-1, :-1], index[1:, 1:]))
        pairs.append((index[:-1, 1:], index[1:, :-1]))
    edges = np.concatenate(
        [np.stack([a.reshape(-1), b.reshape(-1)], axis=1) for a, b in pairs]
    )
    edges = np.sort(edges, axis=1)

    rows, cols = np.divmod(np.arange(height * width), width)
    positions = np.stack(
        [rows / max(height - 1, 1), cols / max(width - 1, 1)], axis=1
    ).astype(float)
    return GraphTopology(
        n_nodes=height * width,
        edges=edges,
        positions=positions,
        grid_shape=(height, width),
    )


@lru_cache(maxsize=64)
def complete_topology(n_nodes: int) -> GraphTopology:
    i, j = np.triu_indices(n_nodes, k=1)
    return GraphTopology(n_nodes=n_nodes, edges=np.stack([i, j], axis=1))


def read_graph(path: Union[str, Path]) -> Tuple[GraphTopology, np.ndarray]:
    """Text format: ``n m`` then ``m`` lines of ``i j w``."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    n_nodes, n_edges = int(lines[0][0]), int(lines[0][1])
    if len(lines) - 1 != n_edges:
        raise ValueError(f"expected {n_edges} edge lines, found {len(lines) - 1}")
    edges = np.array([[int(a), int(b)] for a, b, _ in lines[1:]], dtype=np.intp)
    weights = np.array([float(w) for _, _, w in lines[1:]])
    if n_edges:
        # accept either orientation in files
        edges = np.sort(edges, axis=1)
    return GraphTopology(n_nodes=n_nodes, edges=edges.reshape(-1, 2)), weights


def write_graph(
    path: Union[str, Path], topology: GraphTopology, weights: np.ndarray
) -> None:
    lines = [f"{topology.n_nodes} {topology.n_edges}"]
    lines += [f"{i} {j} {float(w)!r}" for (i, j), w in zip(topology.edges, weights)]
    Path(path).write_text("\n".join(lines) + "\n")


def same_topology(a: GraphTopology, b: GraphTopology) -> bool:
    if a is b:
        return True
    return a.n_nodes == b.n_nodes and np.array_equal(a.edges, b.edges)
