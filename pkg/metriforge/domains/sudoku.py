"""
Sudoku-shaped smoke configuration for the recurrent Poisson layer.

A 9x9 board on the 8-connected lattice, digits fed as anonymous one-hot
indices (0 is a blank), several rounds with feedback and the object layer on.
Only the machinery is exercised here; nothing is tuned for accuracy.
"""

from typing import List, NamedTuple

import numpy as np

from metriforge.autodiff import tensor as T
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tensor
from metriforge.errors import DomainError
from metriforge.layers.multigrid import AssignmentReport, assignment_diagnostics
from metriforge.layers.parameters import PoissonLayerParameters
from metriforge.layers.poisson import (
    LayerHeads,
    RoundState,
    init_layer_params,
    layer_topology,
    run_rounds,
)

SIDE = 9
BOX = 3


def smoke_config(**overrides) -> PoissonLayerParameters:
    base = dict(
        fields=4,
        rounds=3,
        classes=SIDE,
        input_dim=SIDE + 1,
        feature_dim=16,
        hidden_widths=[32],
        objects=SIDE,
        object_fields=4,
        connectivity=8,
    )
    base.update(overrides)
    return PoissonLayerParameters(**base)


class Puzzle(NamedTuple):
    board: np.ndarray
    solution: np.ndarray


def solved_board(seed: int) -> np.ndarray:
    """Valid completed board from the shifted base pattern under random band, row and digit shuffles."""
    rng = np.random.default_rng(seed)
    bands = rng.permutation(BOX)
    rows = np.concatenate([band * BOX + rng.permutation(BOX) for band in bands])
    stacks = rng.permutation(BOX)
    cols = np.concatenate([stack * BOX + rng.permutation(BOX) for stack in stacks])
    digits = rng.permutation(SIDE) + 1
    r, c = np.meshgrid(rows, cols, indexing="ij")
    return digits[(BOX * (r % BOX) + r // BOX + c) % SIDE]


def is_valid_solution(board: np.ndarray) -> bool:
    board = np.asarray(board)
    if board.shape != (SIDE, SIDE):
        return False
    expected = set(range(1, SIDE + 1))
    boxes = board.reshape(BOX, BOX, BOX, BOX).transpose(0, 2, 1, 3).reshape(SIDE, SIDE)
    return all(set(line) == expected for group in (board, board.T, boxes) for line in group)


def make_puzzle(seed: int, blanks: int = 40) -> Puzzle:
    if not 0 <= blanks <= SIDE * SIDE:
        raise ValueError(f"blanks must lie in [0, {SIDE * SIDE}], got {blanks}")
    solution = solved_board(seed)
    board = solution.copy()
    hidden = np.random.default_rng([seed, 1]).choice(SIDE * SIDE, size=blanks, replace=False)
    board.reshape(-1)[hidden] = 0
    return Puzzle(board=board, solution=solution)


def encode_board(board: np.ndarray) -> np.ndarray:
    board = np.asarray(board, dtype=int)
    if board.shape != (SIDE, SIDE) or board.min() < 0 or board.max() > SIDE:
        raise DomainError(f"expected a {SIDE}x{SIDE} board of digits 0..{SIDE}")
    return np.eye(SIDE + 1)[board.reshape(-1)]


def solve_rounds(
    board: np.ndarray, view: dict, cfg: PoissonLayerParameters
) -> List[RoundState]:
    topology = layer_topology(SIDE, SIDE, cfg)
    return run_rounds(LayerHeads(view, cfg), topology, cfg, encode_board(board))


def board_loss(states: List[RoundState], solution: np.ndarray) -> Tensor:
    """Cross-entropy of the last round's logits against the solved digits."""
    target = np.eye(SIDE)[np.asarray(solution).reshape(-1) - 1]
    logits = states[-1].logits
    return -T.mean(T.tsum(T.log_softmax(logits, axis=1) * target, axis=1))


def cell_accuracy(states: List[RoundState], puzzle: Puzzle) -> float:
    """Fraction of blank cells whose predicted digit is right."""
    predicted = states[-1].logits.numpy().argmax(axis=1).reshape(SIDE, SIDE) + 1
    blank = puzzle.board == 0
    if not blank.any():
        return 1.0
    return float(np.mean(predicted[blank] == puzzle.solution[blank]))


def object_report(states: List[RoundState]) -> AssignmentReport:
    return assignment_diagnostics(states[-1].assignment.numpy())


def init_smoke(seed: int = 0, **overrides) -> tuple[PoissonLayerParameters, ModelParams]:
    cfg = smoke_config(**overrides)
    return cfg, init_layer_params(cfg, seed)
