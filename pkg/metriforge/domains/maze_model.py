"""
Single-round Poisson model for maze path prediction.

Each cell embeds its anonymous type index. Conductances come from a bilinear
form over the embeddings, damping and sources from per-cell heads, and a
decoder classifies every cell from the solved fields and their dissipation.
"""

import logging
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from metriforge.autodiff import tensor as T
from metriforge.autodiff.checkpoint import load_checkpoint, save_checkpoint
from metriforge.autodiff.optim import Adam, AdamParameters
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tape, Tensor
from metriforge.domains.maze import (
    N_CLASSES,
    N_TYPES,
    Maze,
    generate_corpus,
)
from metriforge.errors import TrainingAborted
from metriforge.graph.system import ScreenedSystem, field_systems
from metriforge.graph.topology import GraphTopology, grid_topology
from metriforge.layers.mlp import init_mlp, mlp
from metriforge.layers.parameters import Activation
from metriforge.layers.poisson import conductances, edge_dissipation, normalize_fields
from metriforge.solvers.cg import CgConfig, Preconditioner, screened_solve, solve_k_fields

log = logging.getLogger(__name__)

FLOAT32_TOL = 1e-5
HARMONIC_LEAK = 1e-3
HARMONIC_THRESHOLD = 0.27


class MazeModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fields: int = Field(2, ge=1)
    rounds: Literal[1] = 1
    embed_dim: int = Field(4, ge=1)
    hidden_widths: List[int] = [116, 116]
    activation: Activation = Activation.SILU
    use_positions: bool = False
    lambda_over_n: bool = True
    precision: Literal["float64", "float32"] = "float64"
    solver: CgConfig = CgConfig(
        max_iters=5000, rel_tol=1e-8, preconditioner=Preconditioner.JACOBI
    )
    include_endpoints: bool = True
    baseline_threshold: float = Field(HARMONIC_THRESHOLD, gt=0, lt=1)
    optimizer: AdamParameters = AdamParameters()
    steps: int = Field(3000, ge=1)
    batch_size: int = Field(4, ge=1)
    log_every: int = Field(100, ge=1)
    threads: int = Field(1, ge=1)

    @property
    def head_dim(self) -> int:
        return self.embed_dim + (2 if self.use_positions else 0)

    @property
    def decoder_dim(self) -> int:
        return 3 * self.fields + self.head_dim

    @property
    def solver_config(self) -> CgConfig:
        if self.precision == "float32":
            return self.solver.model_copy(
                update={"rel_tol": max(self.solver.rel_tol, FLOAT32_TOL)}
            )
        return self.solver


def load_maze_config(path: Union[str, Path]) -> MazeModelConfig:
    return MazeModelConfig.model_validate_json(Path(path).read_text())


def init_maze_params(cfg: MazeModelConfig, seed: int = 0) -> ModelParams:
    params = ModelParams(seed=seed, dtype=cfg.precision)
    hidden = list(cfg.hidden_widths)
    params.normal("embedding", (N_TYPES, cfg.embed_dim), 1.0, "embedding")
    params.normal("W_raw", (cfg.embed_dim, cfg.embed_dim), 1.0 / cfg.embed_dim, "conductance")
    init_mlp(params, "damping", [cfg.head_dim, *hidden, cfg.fields], "heads")
    init_mlp(params, "source", [cfg.head_dim, *hidden, cfg.fields], "heads")
    init_mlp(params, "decoder", [cfg.decoder_dim, *hidden, N_CLASSES], "decoder", zero_last=True)
    return params


class MazeTensors(NamedTuple):
    topology: GraphTopology
    h: Tensor
    conductance: Tensor
    damping: Tensor
    source: Tensor


class MazeOutput(NamedTuple):
    logits: Tensor
    psi: Tensor
    conductance: Tensor
    damping: Tensor


def _cell_inputs(maze: Maze, view: Dict[str, Tensor], cfg: MazeModelConfig):
    topology = grid_topology(*maze.shape)
    h = T.gather(view["embedding"], maze.grid.reshape(-1))
    if not cfg.use_positions:
        return topology, h, h
    return topology, h, T.concat([h, topology.positions], axis=1)


def maze_tensors(maze: Maze, view: Dict[str, Tensor], cfg: MazeModelConfig) -> MazeTensors:
    topology, h, head_in = _cell_inputs(maze, view, cfg)
    damping = T.softplus(mlp(view, "damping", head_in, cfg.activation))
    if cfg.lambda_over_n:
        damping = damping / float(topology.n_nodes)
    return MazeTensors(
        topology=topology,
        h=head_in,
        conductance=conductances(h, view["W_raw"], topology),
        damping=damping,
        source=mlp(view, "source", head_in, cfg.activation),
    )


def build_system(
    maze: Maze, params: Union[ModelParams, Dict[str, Tensor]], cfg: MazeModelConfig
) -> Tuple[List[ScreenedSystem], np.ndarray]:
    """One screened system per field (shared conductances) and the (n, K) sources."""
    view = params.constants() if isinstance(params, ModelParams) else params
    parts = maze_tensors(maze, view, cfg)
    systems = field_systems(
        parts.topology, parts.conductance.numpy().astype(float), parts.damping.numpy().astype(float)
    )
    return systems, parts.source.numpy().astype(float)


def forward(maze: Maze, view: Dict[str, Tensor], cfg: MazeModelConfig) -> MazeOutput:
    parts = maze_tensors(maze, view, cfg)
    psi = screened_solve(
        parts.topology,
        parts.conductance,
        parts.damping,
        parts.source,
        cfg.solver_config,
        cfg.threads,
    )
    dissipation = edge_dissipation(parts.topology, parts.conductance, psi)
    features = T.concat([psi, normalize_fields(psi), dissipation, parts.h], axis=1)
    return MazeOutput(
        logits=mlp(view, "decoder", features, cfg.activation),
        psi=psi,
        conductance=parts.conductance,
        damping=parts.damping,
    )


def cell_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-cell cross-entropy over the five classes."""
    target = np.eye(N_CLASSES)[np.asarray(labels).reshape(-1)]
    return -T.mean(T.tsum(T.log_softmax(logits, axis=1) * target, axis=1))


def predict(maze: Maze, params: ModelParams, cfg: MazeModelConfig) -> np.ndarray:
    """Class per cell; argmax ties go to the lower class index."""
    logits = forward(maze, params.constants(), cfg).logits.numpy()
    return logits.argmax(axis=1).reshape(maze.shape)


class TrainingLog(BaseModel):
    seed: int
    steps: int
    losses: List[float]


def train(
    corpus: Sequence[Maze],
    cfg: MazeModelConfig,
    steps: Optional[int] = None,
    seed: int = 0,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> Tuple[ModelParams, TrainingLog]:
    if not corpus:
        raise ValueError("training corpus is empty")
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng(seed)
    params = init_maze_params(cfg, seed)
    optimizer = Adam(cfg.optimizer)
    batch = min(cfg.batch_size, len(corpus))
    losses: List[float] = []

    for step in range(steps):
        chosen = rng.choice(len(corpus), size=batch, replace=False)
        tape = Tape()
        watched = params.watch(tape)
        loss = None
        for index in chosen:
            maze = corpus[int(index)]
            term = cell_loss(forward(maze, watched, cfg).logits, maze.labels)
            loss = term if loss is None else loss + term
        loss = loss / float(batch)
        value = loss.item()
        if not np.isfinite(value):
            log.error("loss became %s at step %d; aborting", value, step)
            if checkpoint_path is not None:
                save_checkpoint(params, checkpoint_path)
                log.info("wrote last finite parameters to %s", checkpoint_path)
            raise TrainingAborted(f"non-finite loss at step {step}", step, params.copy())

        tape.backward(loss)
        params.collect(tape, watched)
        optimizer.step(params)
        losses.append(value)
        if step % cfg.log_every == 0 or step == steps - 1:
            log.info("step %d loss %.5f grad-norm %.4g", step, value, params.grad_norm())

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, TrainingLog(seed=seed, steps=steps, losses=losses)


def load_trained(path: Union[str, Path], cfg: MazeModelConfig) -> ModelParams:
    return load_checkpoint(path, init_maze_params(cfg))


class F1Counts(NamedTuple):
    tp: int
    fp: int
    fn: int

    @property
    def f1(self) -> float:
        denominator = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denominator if denominator else 1.0


def positive_mask(labels: np.ndarray, include_endpoints: bool = True) -> np.ndarray:
    positives = [1, 2, 3] if include_endpoints else [1]
    return np.isin(labels, positives)


def f1_counts(
    predicted: np.ndarray, labels: np.ndarray, include_endpoints: bool = True
) -> F1Counts:
    pred = positive_mask(predicted, include_endpoints)
    true = positive_mask(labels, include_endpoints)
    return F1Counts(
        tp=int(np.sum(pred & true)),
        fp=int(np.sum(pred & ~true)),
        fn=int(np.sum(~pred & true)),
    )


def micro_f1(counts: Sequence[F1Counts]) -> float:
    return F1Counts(
        tp=sum(c.tp for c in counts),
        fp=sum(c.fp for c in counts),
        fn=sum(c.fn for c in counts),
    ).f1


class F1Report(BaseModel):
    size: int
    n_mazes: int
    f1: float
    per_maze: List[float]


def evaluate_f1(
    params: ModelParams, mazes: Sequence[Maze], cfg: MazeModelConfig
) -> F1Report:
    counts = [
        f1_counts(predict(maze, params, cfg), maze.labels, cfg.include_endpoints)
        for maze in mazes
    ]
    return F1Report(
        size=mazes[0].shape[0] if mazes else 0,
        n_mazes=len(mazes),
        f1=micro_f1(counts),
        per_maze=[c.f1 for c in counts],
    )


def size_generalization(
    params: ModelParams,
    cfg: MazeModelConfig,
    eval_size: int,
    n_eval: int,
    seed: int,
) -> F1Report:
    """Fresh mazes of side ``eval_size``; the trained parameters are reused as is."""
    mazes = generate_corpus(n_eval, eval_size, seed)
    report = evaluate_f1(params, mazes, cfg)
    log.info("transfer to %dx%d: F1 %.4f over %d mazes", eval_size, eval_size, report.f1, n_eval)
    return report


def harmonic_potential(maze: Maze, cfg: Optional[CgConfig] = None) -> np.ndarray:
    """
    Hand-set system: unit conductance between open cells, a weak one into walls,
    light uniform damping and equal unit sources at the source and goal cells.

    Both endpoints enter the same way, so the potential does not favour either
    end of the path. It is nonnegative and returned divided by its maximum.
    """
    topology = grid_topology(*maze.shape)
    open_cells = maze.open_mask.reshape(-1)
    both_open = open_cells[topology.heads] & open_cells[topology.tails]
    conductance = np.where(both_open, 1.0, HARMONIC_LEAK)
    damping = np.full(topology.n_nodes, HARMONIC_LEAK)
    b = np.zeros(topology.n_nodes)
    width = maze.shape[1]
    b[maze.source[0] * width + maze.source[1]] = 1.0
    b[maze.goal[0] * width + maze.goal[1]] = 1.0
    systems = field_systems(topology, conductance, damping)
    cfg = cfg or CgConfig(
        max_iters=50 * topology.n_nodes, rel_tol=1e-8, preconditioner=Preconditioner.JACOBI
    )
    psi = solve_k_fields(systems, b[:, None], cfg)[0].solution
    peak = psi.max()
    return psi / peak if peak > 0 else np.zeros_like(psi)


def harmonic_baseline(
    mazes: Sequence[Maze], threshold: float = HARMONIC_THRESHOLD, include_endpoints: bool = True
) -> F1Report:
    """Untrained reference: F1 of the thresholded harmonic potential over ``mazes``."""
    counts = []
    for maze in mazes:
        predicted = harmonic_prediction(maze, threshold)
        counts.append(f1_counts(predicted, maze.labels, include_endpoints))
    return F1Report(
        size=mazes[0].shape[0] if mazes else 0,
        n_mazes=len(mazes),
        f1=micro_f1(counts),
        per_maze=[c.f1 for c in counts],
    )


def harmonic_prediction(maze: Maze, threshold: float = HARMONIC_THRESHOLD) -> np.ndarray:
    """Open cells whose normalized harmonic potential exceeds ``threshold`` are called on-path."""
    psi = harmonic_potential(maze).reshape(maze.shape)
    predicted = np.where(psi > threshold, 1, 0)
    predicted[~maze.open_mask] = 4
    return predicted


class ConductanceContrast(BaseModel):
    corridor: float
    wall: float
    mixed: float


def conductance_contrast(maze: Maze, params: ModelParams, cfg: MazeModelConfig) -> ConductanceContrast:
    """Mean learned conductance on open-open, wall-wall and open-wall edges."""
    parts = maze_tensors(maze, params.constants(), cfg)
    w = parts.conductance.numpy()
    open_cells = maze.open_mask.reshape(-1)
    heads, tails = open_cells[parts.topology.heads], open_cells[parts.topology.tails]

    def mean_over(mask: np.ndarray) -> float:
        return float(w[mask].mean()) if mask.any() else float("nan")

    return ConductanceContrast(
        corridor=mean_over(heads & tails),
        wall=mean_over(~heads & ~tails),
        mixed=mean_over(heads ^ tails),
    )
