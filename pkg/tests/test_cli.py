import re

import numpy as np
import pytest

from goafem import cli
from goafem.bench import get_problem
from goafem.cli import CSV_COLUMNS, main, parse_args, read_csv, write_csv, write_plot_script
from goafem.driver import AdaptiveConfig, BudgetExhausted, History, run
from goafem.solver import SolverBreakdown


@pytest.fixture(scope="module")
def small_history():
    p = get_problem("square-goal")
    return run(p.mesh, p.data, p.goal, AdaptiveConfig(max_elements=300), exact_goal=p.exact_goal)


# --- parsing -----------------------------------------------------------------

def test_defaults():
    cfg = parse_args(["run", "--problem", "square-goal"])
    assert (cfg.strategy, cfg.vartheta, cfg.lambda_ctr, cfg.solver, cfg.stopping) == (
        "a", 0.5, 1e-5, "ml-pcg", "independent")
    assert cfg.max_elements == 10_000 and cfg.max_work is None
    assert not cfg.diagnostics and cfg.diag_max_dofs == 200_000 and cfg.quadrature_degree == 2


def test_comparison_leg():
    cfg = parse_args(["run", "--solver", "cg", "--problem", "square-goal", "--max-elements", "50000"])
    assert cfg.solver == "cg" and cfg.max_elements == 50_000
    assert cfg.adaptive_config().solver == "cg"
    cfg = parse_args(["compare", "--solvers", "ml-pcg", "cg"])
    assert cfg.command == "compare" and cfg.solvers == ["ml-pcg", "cg"]


@pytest.mark.parametrize("argv", [
    ["run", "--lambda-ctr", "0"],
    ["run", "--lambda-ctr", "-1e-5"],
    ["run", "--vartheta", "1.5"],
    ["run", "--max-elements", "ten"],
    ["run", "--solver", "gmres"],
    ["run", "--problem", "l-shape"],
    ["run", "--frobnicate"],
    [],
])
def test_usage_errors_exit_with_code_two(argv, capsys):
    with pytest.raises(SystemExit) as info:
        parse_args(argv)
    assert info.value.code == 2
    assert "usage:" in capsys.readouterr().err


# --- csv ---------------------------------------------------------------------

def test_csv_layout(small_history, tmp_path):
    path = tmp_path / "run.csv"
    write_csv(small_history, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) - 1 == len(small_history.records)
    data = read_csv(path)
    # diagnostics were off: the column is present but empty
    assert np.all(np.isnan(data["lambda_diag"]))
    assert all(line.split(",")[CSV_COLUMNS.index("lambda_diag")] == "" for line in lines[1:])


def test_csv_round_trip_reproduces_bound(small_history, tmp_path):
    path = tmp_path / "run.csv"
    write_csv(small_history, path)
    data = read_csv(path)
    xi = (data["eta"] + data["du_energy"]) * (data["zeta"] + data["dz_energy"])
    assert np.array_equal(xi, data["xi"])
    assert np.array_equal(data["xi"], small_history.column("xi"))


def test_work_column_is_exact(small_history, tmp_path):
    path = tmp_path / "run.csv"
    write_csv(small_history, path)
    data = read_csv(path)
    assert data["work"].dtype == np.int64
    assert np.array_equal(np.cumsum(data["num_elements"]), data["work"])


def test_empty_history_is_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_csv(History(), tmp_path / "x.csv")


def test_seventeen_digits(small_history, tmp_path):
    path = tmp_path / "run.csv"
    write_csv(small_history, path)
    row = path.read_text().splitlines()[1].split(",")
    eta = row[CSV_COLUMNS.index("eta")]
    assert float(eta) == small_history.records[0].eta
    assert len(re.sub(r"[^0-9]", "", eta.split("e")[0]).lstrip("0")) <= 17


# --- plot script -------------------------------------------------------------

def slope_block(text, name):
    body = text.split(f"${name} << EOD\n")[1].split("\nEOD")[0]
    return np.array([[float(v) for v in line.split()] for line in body.splitlines()])


def test_plot_script_references_csv_relatively(small_history, tmp_path):
    (tmp_path / "out").mkdir()
    csv = tmp_path / "out" / "run.csv"
    write_csv(small_history, csv)
    script = tmp_path / "run.gp"
    write_plot_script(small_history, script, csv)
    text = script.read_text()
    assert '"out/run.csv"' in text
    assert str(tmp_path) not in text
    assert "set logscale xy" in text


def test_slope_lines_span_the_data(small_history, tmp_path):
    csv = tmp_path / "run.csv"
    write_csv(small_history, csv)
    write_plot_script(small_history, tmp_path / "run.gp", csv)
    text = (tmp_path / "run.gp").read_text()
    work = slope_block(text, "SLOPE_WORK")
    assert work[0, 0] == small_history.records[0].work and work[-1, 0] == small_history.records[-1].work
    assert work[1, 1] / work[0, 1] == pytest.approx(work[0, 0] / work[1, 0])  # slope -1
    elements = slope_block(text, "SLOPE_ELEMENTS")
    accepted = [r.num_elements for r in small_history.accepted()]
    assert elements[0, 0] == min(accepted) and elements[-1, 0] == max(accepted)


def test_comparison_script_has_two_series(tmp_path, capsys):
    out = tmp_path / "cmp.csv"
    code = main(["compare", "--problem", "square-goal", "--solvers", "ml-pcg", "cg",
                 "--max-elements", "150", "--output", str(out)])
    assert code == 0
    text = (tmp_path / "cmp.gp").read_text()
    assert '"cmp-ml-pcg.csv"' in text and '"cmp-cg.csv"' in text
    assert "$ACCEPTED0" in text and "$ACCEPTED1" in text
    assert (tmp_path / "cmp-ml-pcg.csv").exists() and (tmp_path / "cmp-cg.csv").exists()


# --- main --------------------------------------------------------------------

def test_main_writes_outputs(tmp_path, capsys):
    out = tmp_path / "z.csv"
    assert main(["run", "--problem", "zshape", "--max-elements", "200", "--output", str(out)]) == 0
    assert out.exists() and out.with_suffix(".gp").exists()
    report = capsys.readouterr().out
    assert "trailing-decade rates" in report and "goal error" in report


def test_repeated_runs_are_identical(tmp_path):
    argv = ["run", "--problem", "zshape", "--max-elements", "200", "--no-timing", "--diagnostics"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(argv + ["--output", str(a)]) == 0
    assert main(argv + ["--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert not np.all(np.isnan(read_csv(a)["lambda_diag"]))


@pytest.mark.parametrize("exc", [SolverBreakdown("breakdown"), BudgetExhausted("no level completed")])
def test_runtime_failures_exit_with_code_three(exc, tmp_path, monkeypatch, capsys):
    def failing(*args, **kwargs):
        raise exc

    monkeypatch.setattr(cli, "run", failing)
    assert main(["run", "--output", str(tmp_path / "x.csv")]) == 3
    assert "goafem:" in capsys.readouterr().err


def test_thread_limit_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GOAFEM_THREADS", "1")
    assert main(["run", "--max-elements", "50", "--output", str(tmp_path / "t.csv")]) == 0
