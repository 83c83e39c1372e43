import csv
import json

import pytest

from metriforge.cli import RunConfig, build_parser, dispatch

SMALL_MAZE_CONFIG = {
    "hidden_widths": [8],
    "embed_dim": 3,
    "batch_size": 2,
    "log_every": 1,
}


@pytest.fixture
def maze_config(tmp_path):
    path = tmp_path / "maze.json"
    path.write_text(json.dumps(SMALL_MAZE_CONFIG))
    return path


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.mark.parametrize(
    "argv",
    [
        ["teleport"],
        [],
        ["maze-gen", "--size", "nine", "--out-dir", "mazes"],
        ["maze-gen", "--colour", "blue", "--out-dir", "mazes"],
    ],
)
def test_usage_errors_exit_2_with_json(argv, capsys):
    assert dispatch(argv) == 2
    error = last_error(capsys)
    assert error["error"] == "UsageError"
    assert error["message"].startswith("metriforge")


def test_out_of_range_flag_is_a_usage_error(tmp_path, capsys):
    assert dispatch(["maze-gen", "--out-dir", str(tmp_path / "x"), "--threads", "0"]) == 2
    error = last_error(capsys)
    assert error["error"] == "UsageError"
    assert "threads" in error["message"]
    assert not (tmp_path / "x").exists()


def test_help_exits_cleanly():
    assert dispatch(["--help"]) == 0


def test_run_config_rejects_unknown_keys():
    args = build_parser().parse_args(["maze-gen", "--out-dir", "mazes"])
    run = RunConfig.from_namespace(args)
    assert run.paths["out_dir"].name == "mazes"
    assert run.options == {"size": 9, "count": 10}
    with pytest.raises(ValueError):
        RunConfig(command="maze-gen", seed=0, threads=1, colour="blue")


def test_gradcheck_writes_csv(tmp_path):
    out = tmp_path / "grad.csv"
    assert dispatch(["gradcheck", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["parameter", "analytic", "numeric", "rel_error"]
    prefixes = {row[0].split(".")[0] for row in rows[1:]}
    assert prefixes == {"cg", "scan", "dynamics", "readout", "maze"}


def test_maze_gen_is_reproducible(tmp_path):
    assert dispatch(["maze-gen", "--size", "7", "--count", "3", "--seed", "4", "--out-dir", str(tmp_path / "a")]) == 0
    assert dispatch(["maze-gen", "--size", "7", "--count", "3", "--seed", "4", "--out-dir", str(tmp_path / "b")]) == 0
    files = sorted((tmp_path / "a").glob("*.txt"))
    assert len(files) == 3
    for path in files:
        assert path.read_text() == (tmp_path / "b" / path.name).read_text()
        assert path.read_text().splitlines()[0] == "7 7"


def test_maze_train_twice_gives_identical_checkpoints(tmp_path, maze_config):
    outputs = []
    for name in ("first", "second"):
        checkpoint = tmp_path / f"{name}.ckpt"
        argv = [
            "maze-train", "--config", str(maze_config), "--seed", "3", "--corpus", "3",
            "--train-size", "5", "--steps", "3", "--threads", "1",
            "--checkpoint", str(checkpoint), "--log", str(tmp_path / f"{name}.csv"),
        ]
        assert dispatch(argv) == 0
        outputs.append(checkpoint.read_bytes())
    assert outputs[0] == outputs[1]
    assert len(read_rows(tmp_path / "first.csv")) == 4


def test_maze_eval_with_trained_checkpoint(tmp_path, maze_config):
    checkpoint = tmp_path / "model.ckpt"
    assert dispatch([
        "maze-train", "--config", str(maze_config), "--corpus", "2", "--train-size", "5",
        "--steps", "2", "--checkpoint", str(checkpoint),
    ]) == 0
    out = tmp_path / "eval.json"
    predictions = tmp_path / "pred"
    assert dispatch([
        "maze-eval", "--config", str(maze_config), "--checkpoint", str(checkpoint),
        "--size", "7", "--count", "2", "--predictions-dir", str(predictions), "--out", str(out),
    ]) == 0
    report = json.loads(out.read_text())
    assert report["n_mazes"] == 2 and 0.0 <= report["f1"] <= 1.0
    assert len(list(predictions.glob("*.pred.txt"))) == 2


def test_maze_eval_harmonic_on_stored_mazes(tmp_path):
    mazes = tmp_path / "mazes"
    assert dispatch(["maze-gen", "--size", "9", "--count", "2", "--out-dir", str(mazes)]) == 0
    out = tmp_path / "harmonic.json"
    assert dispatch(["maze-eval", "--harmonic", "--input-dir", str(mazes), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["size"] == 9 and len(report["per_maze"]) == 2


def test_failures_emit_json_error(tmp_path, capsys):
    assert dispatch(["maze-eval", "--size", "7", "--count", "1"]) == 1
    error = last_error(capsys)
    assert error["error"] == "ValueError"
    assert "checkpoint" in error["message"]

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"hidden_width": [4]}))
    assert dispatch(["maze-eval", "--harmonic", "--config", str(bad), "--count", "1"]) == 1
    error = last_error(capsys)
    assert error["error"] == "ValidationError"


def test_dynamics_diag_outputs(tmp_path):
    out, series = tmp_path / "diag.json", tmp_path / "diag.csv"
    argv = ["dynamics-diag", "--steps", "5", "--size", "5", "--out", str(out), "--csv", str(series)]
    assert dispatch(argv) == 0
    payload = json.loads(out.read_text())
    assert payload["report"]["identity_residual"] <= 1e-12
    assert abs(payload["convergence_order"] - 2.0) <= 0.1
    rows = read_rows(series)
    assert rows[0] == ["step", "E_quad", "E_dirichlet", "drift", "predicted_drift"]
    assert len(rows) == 7

    first = out.read_text()
    assert dispatch(argv) == 0
    assert out.read_text() == first


def test_dynamics_diag_dissipation(tmp_path):
    out = tmp_path / "dissipation.json"
    assert dispatch(["dynamics-diag", "--mode", "dissipation", "--size", "4", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["report"]["dirichlet_monotone"] is True


def test_readout_dump_writes_every_map(tmp_path):
    out_dir = tmp_path / "features"
    argv = ["readout-dump", "--kind", "noether", "--fields", "2", "--size", "4", "--out-dir", str(out_dir)]
    assert dispatch(argv) == 0
    assert len(list(out_dir.glob("*.csv"))) == 13


def test_objects_dump(tmp_path):
    out_dir = tmp_path / "objects"
    assert dispatch(["objects-dump", "--seed", "1", "--out-dir", str(out_dir)]) == 0
    assert (out_dir / "clusters.txt").read_text().splitlines()[0] == "9 9"
    summary = json.loads((out_dir / "objects.json").read_text())
    assert summary["n_objects"] == 9
    assert "cluster_map" not in summary


def test_scan_bench(tmp_path):
    out = tmp_path / "scan.csv"
    argv = ["scan-bench", "--sizes", "7,500", "--chunks", "64,1000", "--seeds", "2", "--out", str(out)]
    assert dispatch(argv) == 0
    rows = read_rows(out)
    assert rows[0] == ["N", "chunk", "seed", "sequential_s", "parallel_s", "max_deviation"]
    assert len(rows) == 1 + 2 * 2 * 2
    assert all(float(row[-1]) <= 1e-12 for row in rows[1:])


def test_oracle_suite_passes(tmp_path):
    out = tmp_path / "oracle.json"
    assert dispatch(["oracle", "--systems", "8", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert all(row["passed"] for row in report["rows"])
