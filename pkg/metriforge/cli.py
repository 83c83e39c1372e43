"""
Command-line entry point: ``metriforge <command> [options]``.

Exit codes: 0 on success, 1 when a check fails or a command raises, 2 on
usage errors. Every nonzero exit also prints one JSON object to stderr.
"""

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import contextmanager
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from metriforge import checks
from metriforge.autodiff.checkpoint import save_checkpoint
from metriforge.domains import sudoku
from metriforge.domains.maze import generate_corpus, read_maze, write_grid
from metriforge.domains.maze_model import (
    MazeModelConfig,
    evaluate_f1,
    harmonic_baseline,
    harmonic_prediction,
    load_maze_config,
    load_trained,
    predict,
    size_generalization,
    train,
)
from metriforge.dynamics.diagnostics import (
    advection_trajectory,
    dissipation_trajectory,
    drift_convergence_order,
    lambda_max,
    structure_diagnostics,
)
from metriforge.dynamics.readout import compute_readout, feature_names
from metriforge.errors import MetriforgeError
from metriforge.graph.system import ScreenedSystem
from metriforge.graph.topology import grid_topology
from metriforge.solvers.scan import coefficients, scan_chunked, scan_parallel, scan_sequential
from metriforge.utils import default_threads, relative_error

log = logging.getLogger("metriforge")

PATH_OPTIONS = {"out", "csv", "out_dir", "config", "checkpoint", "log", "input_dir", "predictions_dir"}
GLOBAL_OPTIONS = {"command", "seed", "threads", "verbose", "long_run"}


class UsageError(MetriforgeError):
    """Bad command line: unknown command, malformed or out-of-range flag."""


class UsageParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


class CheckFailed(MetriforgeError):
    def __init__(self, message: str, failed: Sequence[str]):
        super().__init__(message)
        self.failed = list(failed)


class RunConfig(BaseModel):
    """Validated view of one invocation."""

    model_config = ConfigDict(extra="forbid")

    command: str
    seed: int
    threads: int = Field(ge=1)
    verbose: bool = False
    long_run: bool = False
    paths: Dict[str, Optional[Path]] = {}
    options: Dict[str, Any] = {}

    @classmethod
    def from_namespace(cls, args: argparse.Namespace) -> "RunConfig":
        values = vars(args)
        return cls(
            command=values["command"],
            seed=values["seed"],
            threads=values["threads"],
            verbose=values["verbose"],
            long_run=values.get("long_run", False),
            paths={k: v for k, v in values.items() if k in PATH_OPTIONS},
            options={
                k: v for k, v in values.items() if k not in PATH_OPTIONS | GLOBAL_OPTIONS
            },
        )


@contextmanager
def _open_output(path: Optional[Path]):
    if path is None or str(path) == "-":
        yield sys.stdout
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        yield handle


def _write_json(path: Optional[Path], payload: Any) -> None:
    with _open_output(path) as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_csv(path: Optional[Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with _open_output(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _maze_config(run: RunConfig) -> MazeModelConfig:
    path = run.paths.get("config")
    cfg = load_maze_config(path) if path else MazeModelConfig()
    update: Dict[str, Any] = {"threads": run.threads}
    if run.options.get("steps") is not None:
        update["steps"] = run.options["steps"]
    return cfg.model_copy(update=update)


def run_gradcheck(run: RunConfig) -> int:
    rows = checks.gradcheck_suite(run.seed)
    _write_csv(
        run.paths.get("out"),
        ["parameter", "analytic", "numeric", "rel_error"],
        ([r.parameter, repr(r.analytic), repr(r.numeric), repr(r.rel_error)] for r in rows),
    )
    failed = [r.parameter for r in rows if not r.passed]
    if failed:
        raise CheckFailed(f"{len(failed)} gradient checks failed", failed)
    return 0


def run_oracle(run: RunConfig) -> int:
    report = checks.oracle_suite(run.seed, run.options["systems"])
    _write_json(run.paths.get("out"), report.model_dump(mode="json"))
    failed = [row.check for row in report.rows if not row.passed]
    if failed:
        raise CheckFailed(f"{len(failed)} oracle checks failed", failed)
    return 0


def run_dynamics_diag(run: RunConfig) -> int:
    rng = np.random.default_rng(run.seed)
    size, fields, steps = run.options["size"], run.options["fields"], run.options["steps"]
    payload: Dict[str, Any] = {"mode": run.options["mode"], "seed": run.seed}

    if run.options["mode"] == "advection":
        J = rng.normal(size=(fields, fields))
        psi0 = 0.1 * rng.normal(size=(size, size, fields))
        dt = run.options["dt"]
        report = structure_diagnostics(J, advection_trajectory(J, psi0, dt, steps), dt)
        payload["convergence_order"] = drift_convergence_order(J, psi0)
    else:
        topology = grid_topology(size, size)
        system = ScreenedSystem(
            topology=topology,
            conductance=rng.uniform(0.5, 1.5, topology.n_edges),
            damping=rng.uniform(0.1, 0.5, topology.n_nodes),
        )
        dt = 1.0 / lambda_max(system)
        states = dissipation_trajectory(system, rng.normal(size=(topology.n_nodes, fields)), dt, steps)
        report = structure_diagnostics(np.zeros((fields, fields)), states, dt, system=system)

    payload["dt"] = dt
    payload["report"] = report.model_dump(mode="json")
    _write_json(run.paths.get("out"), payload)
    if run.paths.get("csv") is not None:
        columns = ["step", "E_quad", "E_dirichlet", "drift", "predicted_drift"]
        _write_csv(
            run.paths["csv"],
            columns,
            ([("" if row[c] is None else repr(row[c])) for c in columns] for row in report.rows()),
        )
    return 0


def _timed(fn: Callable[[], np.ndarray]):
    start = time.perf_counter()
    result = fn()
    return result, time.perf_counter() - start


def run_scan_bench(run: RunConfig) -> int:
    rows = []
    for n in run.options["sizes"]:
        for seed in range(run.seed, run.seed + run.options["seeds"]):
            rng = np.random.default_rng(seed)
            chain = coefficients(
                rng.uniform(0.1, 2.0, n), rng.uniform(0.1, 2.0, n), rng.normal(size=n)
            )
            sequential, sequential_s = _timed(lambda: scan_sequential(chain))
            for chunk in run.options["chunks"]:
                if chunk >= n:
                    parallel, parallel_s = _timed(lambda: scan_parallel(chain))
                else:
                    parallel, parallel_s = _timed(
                        lambda: scan_chunked(chain, chunk, threads=run.threads)
                    )
                deviation = relative_error(parallel, sequential)
                rows.append([n, min(chunk, n), seed, f"{sequential_s:.6f}", f"{parallel_s:.6f}", repr(deviation)])
    _write_csv(
        run.paths.get("out"),
        ["N", "chunk", "seed", "sequential_s", "parallel_s", "max_deviation"],
        rows,
    )
    return 0


def run_readout_dump(run: RunConfig) -> int:
    size, fields, kind = run.options["size"], run.options["fields"], run.options["kind"]
    psi = np.random.default_rng(run.seed).normal(size=(size, size, fields))
    features = compute_readout(kind, psi).numpy()
    out_dir = run.paths["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(feature_names(kind, fields)):
        np.savetxt(out_dir / f"{i:04d}_{name}.csv", features[..., i], delimiter=",", fmt="%.17g")
    log.info("wrote %d feature maps to %s", features.shape[-1], out_dir)
    return 0


def run_objects_dump(run: RunConfig) -> int:
    cfg, params = sudoku.init_smoke(run.seed)
    puzzle = sudoku.make_puzzle(run.seed)
    states = sudoku.solve_rounds(puzzle.board, params.constants(), cfg)
    report = sudoku.object_report(states)
    out_dir = run.paths["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_grid(out_dir / "clusters.txt", report.cluster_map.reshape(sudoku.SIDE, sudoku.SIDE))
    _write_json(out_dir / "objects.json", report.model_dump(mode="json", exclude={"cluster_map"}))
    return 0


def run_maze_gen(run: RunConfig) -> int:
    out_dir = run.paths["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    mazes = generate_corpus(run.options["count"], run.options["size"], run.seed)
    for i, maze in enumerate(mazes):
        write_grid(out_dir / f"maze_{i:04d}.txt", maze.grid)
    return 0


def _training_corpus(run: RunConfig):
    return generate_corpus(run.options["corpus"], run.options["train_size"], run.seed)


def run_maze_train(run: RunConfig) -> int:
    cfg = _maze_config(run)
    params, training = train(_training_corpus(run), cfg, seed=run.seed)
    save_checkpoint(params, run.paths["checkpoint"])
    if run.paths.get("log") is not None:
        _write_csv(run.paths["log"], ["step", "loss"], enumerate(map(repr, training.losses)))
    return 0


def _eval_mazes(run: RunConfig):
    input_dir = run.paths.get("input_dir")
    if input_dir is not None:
        return [read_maze(path) for path in sorted(input_dir.glob("*.txt"))]
    return generate_corpus(run.options["count"], run.options["size"], run.seed)


def run_maze_eval(run: RunConfig) -> int:
    cfg = _maze_config(run)
    mazes = _eval_mazes(run)
    predictions_dir = run.paths.get("predictions_dir")
    if run.options["harmonic"]:
        report = harmonic_baseline(mazes, cfg.baseline_threshold, cfg.include_endpoints)
        predictor = partial(harmonic_prediction, threshold=cfg.baseline_threshold)
    else:
        if run.paths.get("checkpoint") is None:
            raise ValueError("maze-eval needs --checkpoint unless --harmonic is set")
        params = load_trained(run.paths["checkpoint"], cfg)
        report = evaluate_f1(params, mazes, cfg)
        predictor = partial(predict, params=params, cfg=cfg)

    if predictions_dir is not None:
        predictions_dir.mkdir(parents=True, exist_ok=True)
        for i, maze in enumerate(mazes):
            write_grid(predictions_dir / f"maze_{i:04d}.pred.txt", predictor(maze))
    _write_json(run.paths.get("out"), report.model_dump(mode="json"))
    return 0


def run_maze_transfer(run: RunConfig) -> int:
    if run.long_run:
        run = run.model_copy(
            update={
                "options": {
                    **run.options,
                    "corpus": 250,
                    "train_size": 15,
                    "eval_size": 39,
                    "count": 200,
                    "steps": run.options.get("steps") or 10_000,
                }
            }
        )
    cfg = _maze_config(run)
    corpus = _training_corpus(run)
    results = {}
    for scaled in (True, False):
        variant = cfg.model_copy(update={"lambda_over_n": scaled})
        params, _ = train(corpus, variant, seed=run.seed)
        report = size_generalization(
            params, variant, run.options["eval_size"], run.options["count"], run.seed + 1
        )
        results["lambda_over_n" if scaled else "unscaled"] = report.model_dump(mode="json")
    _write_json(run.paths.get("out"), results)
    return 0


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "gradcheck": run_gradcheck,
    "oracle": run_oracle,
    "dynamics-diag": run_dynamics_diag,
    "scan-bench": run_scan_bench,
    "readout-dump": run_readout_dump,
    "objects-dump": run_objects_dump,
    "maze-gen": run_maze_gen,
    "maze-train": run_maze_train,
    "maze-eval": run_maze_eval,
    "maze-transfer": run_maze_transfer,
}


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser() -> UsageParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=default_threads())
    common.add_argument("--verbose", "-v", action="store_true")

    parser = UsageParser(prog="metriforge", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("oracle", parents=[common], help="dense and sequential oracles")
    p.add_argument("--systems", type=int, default=200)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("dynamics-diag", parents=[common], help="metriplectic structure diagnostics")
    p.add_argument("--mode", choices=["advection", "dissipation"], default="advection")
    p.add_argument("--fields", type=int, default=4)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--out", type=Path)
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("scan-bench", parents=[common], help="sequential versus parallel scan timing")
    p.add_argument("--sizes", type=_int_list, default=[1024, 100_000])
    p.add_argument("--chunks", type=_int_list, default=[4096])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("readout-dump", parents=[common], help="write readout feature maps as CSV")
    p.add_argument("--kind", default="stress_energy")
    p.add_argument("--fields", type=int, default=2)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("objects-dump", parents=[common], help="object-layer cluster map")
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("maze-gen", parents=[common], help="write seeded mazes")
    p.add_argument("--size", type=int, default=9)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("maze-train", parents=[common], help="train the maze model")
    p.add_argument("--config", type=Path)
    p.add_argument("--corpus", type=int, default=100)
    p.add_argument("--train-size", type=int, default=9)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--log", type=Path)

    p = sub.add_parser("maze-eval", parents=[common], help="F1 on fresh or stored mazes")
    p.add_argument("--config", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--size", type=int, default=39)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--input-dir", type=Path)
    p.add_argument("--harmonic", action="store_true")
    p.add_argument("--predictions-dir", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("maze-transfer", parents=[common], help="size transfer with and without damping scaling")
    p.add_argument("--config", type=Path)
    p.add_argument("--corpus", type=int, default=100)
    p.add_argument("--train-size", type=int, default=9)
    p.add_argument("--eval-size", type=int, default=19)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--steps", type=int)
    p.add_argument("--long-run", action="store_true")
    p.add_argument("--out", type=Path)
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _report_error(error: Exception) -> None:
    payload = {"error": type(error).__name__, "message": str(error)}
    if isinstance(error, CheckFailed):
        payload["failed"] = error.failed
    for attribute in ("term", "field", "step"):
        if getattr(error, attribute, None) is not None:
            payload[attribute] = getattr(error, attribute)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        run = RunConfig.from_namespace(args)
    except SystemExit as exit_:
        return 0 if exit_.code in (0, None) else 2
    except (UsageError, ValidationError) as error:
        if isinstance(error, ValidationError):
            error = UsageError(f"invalid flags: {error}")
        parser.print_usage(sys.stderr)
        _report_error(error)
        return 2

    configure_logging(run.verbose)
    try:
        log.debug("running %s", run.model_dump_json())
        return COMMANDS[run.command](run)
    except (MetriforgeError, ValueError, OSError) as error:
        log.error("%s failed: %s", args.command, error)
        _report_error(error)
        return 1


def main() -> None:
    sys.exit(dispatch())
