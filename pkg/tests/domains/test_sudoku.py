import numpy as np
import pytest
from numpy.testing import assert_array_equal

from metriforge.domains.sudoku import (
    SIDE,
    board_loss,
    cell_accuracy,
    encode_board,
    init_smoke,
    is_valid_solution,
    make_puzzle,
    object_report,
    solve_rounds,
    solved_board,
)
from metriforge.errors import DomainError


@pytest.mark.parametrize("seed", range(6))
def test_generated_boards_are_valid(seed):
    assert is_valid_solution(solved_board(seed))


def test_broken_board_is_invalid():
    board = solved_board(0)
    board[0, :2] = board[0, 1::-1]
    assert not is_valid_solution(board)


def test_puzzle_hides_requested_cells():
    puzzle = make_puzzle(3, blanks=30)
    assert np.sum(puzzle.board == 0) == 30
    shown = puzzle.board != 0
    assert_array_equal(puzzle.board[shown], puzzle.solution[shown])


def test_encoding_is_one_hot():
    encoded = encode_board(make_puzzle(1).board)
    assert encoded.shape == (SIDE * SIDE, SIDE + 1)
    assert_array_equal(encoded.sum(axis=1), 1.0)
    with pytest.raises(DomainError):
        encode_board(np.full((SIDE, SIDE), 10))


def test_smoke_configuration_runs_every_round():
    cfg, params = init_smoke(seed=2)
    assert cfg.connectivity == 8 and cfg.objects == SIDE
    puzzle = make_puzzle(2)
    states = solve_rounds(puzzle.board, params.constants(), cfg)
    assert len(states) == cfg.rounds
    assert states[-1].logits.shape == (SIDE * SIDE, SIDE)
    assert states[-1].psi.shape == (SIDE * SIDE, cfg.fields)

    assert np.isfinite(board_loss(states, puzzle.solution).item())
    assert 0.0 <= cell_accuracy(states, puzzle) <= 1.0
    report = object_report(states)
    assert report.n_objects == SIDE
    assert report.cluster_map.shape == (SIDE * SIDE,)
