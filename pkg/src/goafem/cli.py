"""
Command-line front end.

    goafem run --problem square-goal --max-elements 100000 --output sq.csv
    goafem compare --problem square-goal --solvers ml-pcg cg --max-elements 50000

``run`` writes one CSV row per solver step plus a gnuplot script next to it;
``compare`` runs several solvers on the same problem and writes one script
with one series per solver.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import PROBLEMS, get_problem
from .driver import STOPPING_MODES, AdaptiveConfig, BudgetExhausted, History, rate_estimate, run
from .marking import STRATEGIES, MarkingConfig
from .solver import SOLVERS, SolverBreakdown

log = logging.getLogger("goafem")

CSV_COLUMNS = ("ell", "k", "m", "n", "num_elements", "work", "eta", "zeta", "du_energy",
               "dz_energy", "xi", "goal_raw", "corrector", "goal_discrete", "goal_error_abs",
               "lambda_diag", "wall_seconds")
INT_COLUMNS = {"ell", "k", "m", "n", "num_elements", "work"}


@dataclass
class RunConfig:
    problem: str = "square-goal"
    strategy: str = "a"
    vartheta: float = 0.5
    lambda_ctr: float = 1e-5
    solver: str = "ml-pcg"
    stopping: str = "independent"
    max_elements: int | None = None
    max_work: int | None = None
    diagnostics: bool = False
    diag_max_dofs: int = 200_000
    quadrature_degree: int = 2
    output: Path | None = None
    timing: bool = True
    verbose: bool = False
    command: str = "run"
    solvers: list = field(default_factory=lambda: ["ml-pcg", "cg"])

    def adaptive_config(self, solver=None) -> AdaptiveConfig:
        return AdaptiveConfig(
            marking=MarkingConfig(self.strategy, self.vartheta),
            lambda_ctr=self.lambda_ctr, solver=solver or self.solver, stopping=self.stopping,
            max_elements=self.max_elements, max_work=self.max_work,
            diagnostics=self.diagnostics, diag_max_dofs=self.diag_max_dofs,
            quadrature_degree=self.quadrature_degree)


def _positive(kind):
    def convert(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return convert


def _add_run_options(p):
    p.add_argument("--problem", choices=sorted(PROBLEMS), default="square-goal")
    p.add_argument("--strategy", choices=STRATEGIES, default="a",
                   help="marking strategy (default: a)")
    p.add_argument("--vartheta", type=_positive(float), default=0.5,
                   help="marking parameter in (0, 1] (default: 0.5)")
    p.add_argument("--lambda-ctr", type=_positive(float), default=1e-5,
                   help="solver stopping parameter (default: 1e-5)")
    p.add_argument("--stopping", choices=STOPPING_MODES, default="independent")
    p.add_argument("--max-elements", type=_positive(int), default=None)
    p.add_argument("--max-work", type=_positive(int), default=None)
    p.add_argument("--diagnostics", action="store_true",
                   help="record the quasi-error product using direct solves")
    p.add_argument("--diag-max-dofs", type=_positive(int), default=200_000)
    p.add_argument("--quadrature-degree", type=_positive(int), default=2)
    p.add_argument("--output", type=Path, default=None,
                   help="CSV path; the plot script is written next to it")
    p.add_argument("--no-timing", dest="timing", action="store_false",
                   help="leave wall_seconds empty so repeated runs give identical files")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="goafem", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the adaptive algorithm once")
    _add_run_options(p_run)
    p_run.add_argument("--solver", choices=SOLVERS, default="ml-pcg")
    p_cmp = sub.add_parser("compare", help="run several solvers and plot them together")
    _add_run_options(p_cmp)
    p_cmp.add_argument("--solvers", nargs="+", choices=SOLVERS, default=["ml-pcg", "cg"])
    return parser


def parse_args(argv=None) -> RunConfig:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.vartheta > 1:
        parser.error("--vartheta must lie in (0, 1]")
    if args.max_elements is None and args.max_work is None:
        args.max_elements = 10_000
    values = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__}
    return RunConfig(**values)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if np.isnan(value):
        return ""
    return format(value, ".17g")


def write_csv(history: History, path, timing=True) -> None:
    """One row per solver step; empty cells for absent diagnostics."""
    if not history.records:
        raise ValueError("history is empty")
    lines = [",".join(CSV_COLUMNS)]
    for rec in history.records:
        row = []
        for name in CSV_COLUMNS:
            value = getattr(rec, name)
            if name == "wall_seconds" and not timing:
                value = None
            row.append(_format(value))
        lines.append(",".join(row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> dict:
    """Columns of a CSV written by :func:`write_csv`; empty cells become NaN."""
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    out = {}
    for j, name in enumerate(header):
        cells = [r[j] for r in rows]
        if name in INT_COLUMNS:
            out[name] = np.array([int(c) for c in cells], dtype=np.int64)
        else:
            out[name] = np.array([float(c) if c else np.nan for c in cells])
    return out


def _slope_line(x_lo, x_hi, y_anchor, slope=-1.0):
    # passes through (x_lo, y_anchor)
    return [(x_lo, y_anchor), (x_hi, y_anchor * (x_hi / x_lo) ** slope)]


def _datablock(name, rows):
    body = "\n".join(" ".join(format(v, ".17g") for v in row) for row in rows)
    return f"${name} << EOD\n{body}\nEOD\n"


def write_plot_script(histories, path, csv_paths, labels=None) -> None:
    """Gnuplot script with log-log plots of the bound over work and the
    estimator product over elements, one series per history.

    ``csv_paths`` are referenced relative to the script's directory.
    """
    if isinstance(histories, History):
        histories, csv_paths = [histories], [csv_paths]
    labels = labels or [Path(p).stem for p in csv_paths]
    path = Path(path)
    work_col = CSV_COLUMNS.index("work") + 1
    xi_col = CSV_COLUMNS.index("xi") + 1
    parts = ["# log-log convergence plots; run with: gnuplot " + path.name, "",
             'set datafile separator ","', "set logscale xy", "set key bottom left",
             "set format y \"%.0e\"", ""]

    all_work = np.concatenate([h.column("work") for h in histories])
    all_xi = np.concatenate([h.column("xi") for h in histories])
    parts.append(_datablock("SLOPE_WORK", _slope_line(all_work.min(), all_work.max(), all_xi.max())))
    accepted = [[(r.num_elements, r.eta * r.zeta) for r in h.accepted()] for h in histories]
    all_el = np.array([a for acc in accepted for a, _ in acc], dtype=float)
    all_ez = np.array([b for acc in accepted for _, b in acc], dtype=float)
    parts.append(_datablock("SLOPE_ELEMENTS", _slope_line(all_el.min(), all_el.max(), all_ez.max())))
    for i, acc in enumerate(accepted):
        parts.append(_datablock(f"ACCEPTED{i}", acc))

    rel = [os.path.relpath(Path(p).resolve(), path.resolve().parent) for p in csv_paths]
    parts += ['set terminal pngcairo size 1200,500', f'set output "{path.stem}.png"',
              "set multiplot layout 1,2", "",
              'set xlabel "work"', 'set ylabel "bound on goal error"']
    series = [f'"{r}" using {work_col}:{xi_col} skip 1 with lines title "{lab}"'
              for r, lab in zip(rel, labels)]
    series.append('$SLOPE_WORK with lines dashtype 2 lc "black" title "slope -1"')
    parts.append("plot " + ", \\\n     ".join(series))
    parts += ["", 'set xlabel "number of elements"', 'set ylabel "estimator product (final steps)"']
    series = [f'$ACCEPTED{i} using 1:2 with linespoints title "{lab}"' for i, lab in enumerate(labels)]
    series.append('$SLOPE_ELEMENTS with lines dashtype 2 lc "black" title "slope -1"')
    parts.append("plot " + ", \\\n     ".join(series))
    parts += ["", "unset multiplot", ""]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(parts))


def rate_report(history: History) -> str:
    rows = [("bound vs work", "work", "xi"), ("estimator product vs elements", "elements", "eta_zeta")]
    if history.exact_goal is not None:
        rows.append(("goal error vs work", "work", "goal_error"))
    if history.records and history.records[0].lambda_diag is not None:
        rows.append(("quasi-error vs work", "work", "lambda"))
    out = []
    for title, x, y in rows:
        try:
            out.append(f"  {title:<32s} {rate_estimate(history, x, y):+.3f}")
        except ValueError as exc:
            out.append(f"  {title:<32s} n/a ({exc})")
    return "\n".join(out)


def _summary(history: History, label: str) -> str:
    last = history.records[-1]
    lines = [f"{label}: {len(history.levels)} levels, {len(history.records)} steps, "
             f"#T = {last.num_elements}, work = {last.work} ({history.terminated})",
             f"  final bound {last.xi:.6e}, discrete goal {last.goal_discrete:.15g}"]
    if last.goal_error_abs is not None:
        lines.append(f"  goal error {last.goal_error_abs:.6e}")
    lines.append("trailing-decade rates:")
    lines.append(rate_report(history))
    return "\n".join(lines)


def _limit_threads():
    value = os.environ.get("GOAFEM_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    cfg = parse_args(argv)
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    limiter = _limit_threads()
    problem = get_problem(cfg.problem)
    solvers = [cfg.solver] if cfg.command == "run" else cfg.solvers
    base = cfg.output or Path(f"{cfg.problem}.csv")
    histories, paths = [], []
    try:
        for solver in solvers:
            out = base if len(solvers) == 1 else base.with_name(f"{base.stem}-{solver}{base.suffix}")
            history = run(problem.mesh, problem.data, problem.goal, cfg.adaptive_config(solver),
                          exact_goal=problem.exact_goal)
            write_csv(history, out, timing=cfg.timing)
            histories.append(history)
            paths.append(out)
            print(_summary(history, f"{cfg.problem} / {solver}"))
            print(f"  wrote {out}")
    except (SolverBreakdown, BudgetExhausted, np.linalg.LinAlgError) as exc:
        print(f"goafem: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"goafem: {exc}", file=sys.stderr)
        return 3
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    script = base.with_suffix(".gp")
    write_plot_script(histories, script, paths, labels=solvers)
    print(f"  wrote {script}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
