"""
The adaptive loop: solve (inexactly), estimate, mark, refine.

Per level, primal and dual PCG iterations run until the energy increment is
at most ``lambda_ctr`` times the estimator; indicators are recomputed after
every solver step. Every solver step taken on level ``l`` is charged
``#T_l`` units of work. The accepted iterates are prolongated to the refined
mesh as initial guesses.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .assembly import (DofMap, assemble_dual_load, assemble_full_operator,
                       assemble_primal_load, direct_solve, energy_norm)
from .estimator import dual_estimator, primal_estimator
from .marking import MarkingConfig, mark
from .mesh import Mesh, check_conformity, closure_ratio, prolongate, refine_nvb, sons_estimate_holds
from .solver import (SOLVERS, MultilevelHierarchy, SolverBreakdown, make_preconditioner,
                     pcg_init, pcg_step)

log = logging.getLogger(__name__)

STOPPING_MODES = ("independent", "stronger", "natural")


class BudgetExhausted(RuntimeError):
    """The solver-step cap was hit before a level could be completed."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class AdaptiveConfig:
    marking: MarkingConfig = field(default_factory=MarkingConfig)
    lambda_ctr: float = 1e-5
    solver: str = "ml-pcg"
    stopping: str = "independent"
    max_elements: int | None = None
    max_work: int | None = None
    max_levels: int | None = None
    diagnostics: bool = False
    diag_max_dofs: int = 200_000
    quadrature_degree: int = 2
    max_solver_steps: int = 20_000
    zero_tol: float = 0.0
    check_meshes: bool = False

    def __post_init__(self):
        if not self.lambda_ctr > 0:
            raise ValueError("lambda_ctr must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.stopping not in STOPPING_MODES:
            raise ValueError(f"unknown stopping mode {self.stopping!r}")
        for name in ("max_elements", "max_work", "max_levels", "diag_max_dofs", "max_solver_steps"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_elements is None and self.max_work is None and self.max_levels is None:
            raise ValueError("an element, work or level budget is required")


@dataclass
class StepRecord:
    ell: int
    k: int
    m: int
    n: int
    num_elements: int
    work: int
    eta: float
    zeta: float
    du_energy: float
    dz_energy: float
    xi: float
    goal_raw: float
    corrector: float
    goal_discrete: float
    goal_error_abs: float | None = None
    lambda_diag: float | None = None
    q_u: float | None = None
    q_z: float | None = None
    wall_seconds: float = 0.0


@dataclass
class LevelRecord:
    ell: int
    num_elements: int
    num_dofs: int
    m: int
    n: int
    k: int
    num_marked: int = 0
    sons_ok: bool | None = None
    closure_ratio: float | None = None
    lambda_effective: float | None = None  # max increment/estimator ratio at the accepted step


@dataclass
class History:
    records: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    lambda_initial: float | None = None
    exact_goal: float | None = None
    theta: float | None = None
    vartheta: float | None = None
    terminated: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.records], dtype=float)

    def accepted(self):
        """Records of the final step ``k = k(l)`` on every completed level."""
        final = {lv.ell: lv.k for lv in self.levels}
        return [r for r in self.records if final.get(r.ell) == r.k]


def xi_bound(eta, du, zeta, dz, k=1) -> float:
    """Computable goal-error bound ``(eta + |||du|||) (zeta + |||dz|||)``."""
    if k < 1:
        raise ValueError("the bound needs a previous iterate (k >= 1)")
    return (eta + du) * (zeta + dz)


def discrete_goal(u, z, primal_load, dual_load, op):
    """``(G(u) + [F(z) - a(u, z)], F(z) - a(u, z))``."""
    corrector = float(primal_load @ z - u @ (op @ z))
    return float(dual_load @ u) + corrector, corrector


def lambda_quasi_error(u, z, op, u_star, z_star, eta, zeta) -> float:
    """Quasi-error product with the exact discrete solutions ``u_star``, ``z_star``."""
    return (energy_norm(op, u_star - u) + eta) * (energy_norm(op, z_star - z) + zeta)


def solver_stopping(mode, du, eta, dz, zeta, lambda_ctr, zero_tol=0.0):
    """Per-field stop decisions for the current iterates.

    In ``stronger`` mode both fields stop only together.
    """
    ok_u = du <= lambda_ctr * eta or (eta <= zero_tol and du <= zero_tol)
    ok_z = dz <= lambda_ctr * zeta or (zeta <= zero_tol and dz <= zero_tol)
    if mode == "stronger":
        both = ok_u and ok_z
        return both, both
    if mode not in STOPPING_MODES:
        raise ValueError(f"unknown stopping mode {mode!r}")
    return ok_u, ok_z


class StoppingRule:
    """Tracks the accepted indices ``m(l)``, ``n(l)`` and ``k(l)`` on one level."""

    def __init__(self, mode, lambda_ctr, zero_tol=0.0):
        self.mode, self.lambda_ctr, self.zero_tol = mode, lambda_ctr, zero_tol
        self.m = self.n = None

    @property
    def iterate_u(self):
        return self.mode != "independent" or self.m is None

    @property
    def iterate_z(self):
        return self.mode != "independent" or self.n is None

    @property
    def done(self):
        return self.m is not None and self.n is not None

    @property
    def k(self):
        return max(self.m, self.n) if self.done else None

    def update(self, k, du, eta, dz, zeta):
        ok_u, ok_z = solver_stopping(self.mode, du, eta, dz, zeta, self.lambda_ctr, self.zero_tol)
        if self.m is None and ok_u:
            self.m = k
        if self.n is None and ok_z:
            self.n = k
        return self.done


def stopping_indices(mode, du, eta, dz, zeta, lambda_ctr):
    """``(m, n, k)`` for scripted per-step sequences (``None`` if never met)."""
    rule = StoppingRule(mode, lambda_ctr)
    for k, values in enumerate(zip(du, eta, dz, zeta), start=1):
        if rule.update(k, *values):
            break
    return rule.m, rule.n, rule.k


def _ratio(increment, estimator):
    if increment == 0:
        return 0.0
    return increment / estimator if estimator > 0 else np.inf


def _achieved_ratio(records, ell):
    # last step of each field on level ``ell`` that actually moved it
    rows = [r for r in records if r.ell == ell]
    ru = next((r for r in reversed(rows) if r.du_energy > 0 or r.k == 1), rows[-1])
    rz = next((r for r in reversed(rows) if r.dz_energy > 0 or r.k == 1), rows[-1])
    return max(_ratio(ru.du_energy, ru.eta), _ratio(rz.dz_energy, rz.zeta))


def bracketing_violations(history: History, lambda_ctr, mode="independent"):
    """Levels where the accepted indices do not bracket the stopping criterion.

    The accepted primal step ``m`` must satisfy ``|||du||| <= lambda eta`` and
    step ``m - 1`` must violate it (likewise for the dual field). In
    ``stronger`` mode the joint criterion is bracketed instead.
    """
    bad = []
    for lv in history.levels:
        rows = {r.k: r for r in history.records if r.ell == lv.ell}
        ok_u = lambda r: r.du_energy <= lambda_ctr * r.eta
        ok_z = lambda r: r.dz_energy <= lambda_ctr * r.zeta
        if mode == "stronger":
            checks = [(lv.k, lambda r: ok_u(r) and ok_z(r))]
        else:
            checks = [(lv.m, ok_u), (lv.n, ok_z)]
        for idx, ok in checks:
            if not ok(rows[idx]) or (idx > 1 and ok(rows[idx - 1])):
                bad.append(lv.ell)
                break
    return bad


def run(mesh: Mesh, data, goal, config: AdaptiveConfig, exact_goal=None) -> History:
    """Run the adaptive algorithm from the initial mesh ``mesh``."""
    history = History(exact_goal=exact_goal, theta=config.marking.theta,
                      vartheta=config.marking.vartheta)
    start = time.perf_counter()
    hierarchy = MultilevelHierarchy()
    qd = config.quadrature_degree
    lam = config.lambda_ctr
    mesh0_elements = mesh.n_elements
    marked_counts = []
    work = 0
    u_prev = z_prev = None
    prev_dofmap = None
    ell = 0

    while True:
        dofmap = DofMap.from_mesh(mesh)
        coef = data.coefficients(mesh)
        K = assemble_full_operator(mesh, coef)
        op = K[dofmap.free][:, dofmap.free].tocsr()
        F = assemble_primal_load(mesh, data, dofmap, qd)
        G = assemble_dual_load(mesh, goal, dofmap, qd)
        if config.solver == "ml-pcg":
            hierarchy.append_level(mesh, dofmap, K)
        precond = make_preconditioner(config.solver, op, hierarchy, dofmap)
        est_u = primal_estimator(mesh, dofmap, data, coef, qd)
        est_z = dual_estimator(mesh, dofmap, goal, coef, qd)

        if u_prev is None:
            u0 = np.zeros(dofmap.n_free)
            z0 = np.zeros(dofmap.n_free)
        else:
            u0 = dofmap.restrict(prolongate(mesh, prev_dofmap.expand(u_prev)))
            z0 = dofmap.restrict(prolongate(mesh, prev_dofmap.expand(z_prev)))

        diag = config.diagnostics and dofmap.n_free <= config.diag_max_dofs
        if diag:
            u_star, z_star = direct_solve(op, F), direct_solve(op, G)
            eu_prev, ez_prev = energy_norm(op, u_star - u0), energy_norm(op, z_star - z0)
            # contraction factors below this error level only measure rounding
            eu_floor = 1e-10 * energy_norm(op, u_star)
            ez_floor = 1e-10 * energy_norm(op, z_star)
            if ell == 0:
                history.lambda_initial = (eu_prev + est_u(u0).total) * (ez_prev + est_z(z0).total)

        su = pcg_init(op, F, u0, precond)
        sz = pcg_init(op, G, z0, precond)
        rule = StoppingRule(config.stopping, lam, config.zero_tol)
        eta_ind = zeta_ind = None
        m = n = 0
        k = 0
        while True:
            k += 1
            if k > config.max_solver_steps:
                raise BudgetExhausted(f"solver did not meet the stopping criterion on level {ell} "
                                      f"within {config.max_solver_steps} steps", history)
            if rule.iterate_u:
                su = pcg_step(op, F, su, precond)
                du = su.increment_energy
                eta_ind = est_u(su.x)
                m += 1
            else:
                du = 0.0
            if rule.iterate_z:
                sz = pcg_step(op, G, sz, precond)
                dz = sz.increment_energy
                zeta_ind = est_z(sz.x)
                n += 1
            else:
                dz = 0.0
            eta, zeta = eta_ind.total, zeta_ind.total
            rule.update(k, du, eta, dz, zeta)
            work += mesh.n_elements

            u, z = su.x, sz.x
            goal_d, corrector = discrete_goal(u, z, F, G, op)
            rec = StepRecord(
                ell=ell, k=k, m=m, n=n, num_elements=mesh.n_elements, work=work,
                eta=eta, zeta=zeta, du_energy=du, dz_energy=dz,
                xi=xi_bound(eta, du, zeta, dz, k),
                goal_raw=float(G @ u), corrector=corrector, goal_discrete=goal_d,
                goal_error_abs=None if exact_goal is None else abs(exact_goal - goal_d),
                wall_seconds=time.perf_counter() - start)
            if diag:
                eu, ez = energy_norm(op, u_star - u), energy_norm(op, z_star - z)
                rec.lambda_diag = (eu + eta) * (ez + zeta)
                rec.q_u = eu / eu_prev if eu_prev > eu_floor and du > 0 else None
                rec.q_z = ez / ez_prev if ez_prev > ez_floor and dz > 0 else None
                eu_prev, ez_prev = eu, ez
            history.records.append(rec)
            if rule.done:
                break

        level = LevelRecord(ell, mesh.n_elements, dofmap.n_free, rule.m, rule.n, rule.k,
                            lambda_effective=_achieved_ratio(history.records, ell))
        history.levels.append(level)
        log.info("level %d: #T=%d dofs=%d m=%d n=%d xi=%.3e", ell, mesh.n_elements,
                 dofmap.n_free, rule.m, rule.n, history.records[-1].xi)

        if eta <= config.zero_tol or zeta <= config.zero_tol:
            history.terminated = "zero estimator"
            break
        if config.max_elements is not None and mesh.n_elements > config.max_elements:
            history.terminated = "element budget"
            break
        if config.max_work is not None and work > config.max_work:
            history.terminated = "work budget"
            break
        if config.max_levels is not None and ell + 1 >= config.max_levels:
            history.terminated = "level budget"
            break

        marked = mark(eta_ind, zeta_ind, config.marking)
        fine = refine_nvb(mesh, marked)
        marked_counts.append(len(marked))
        level.num_marked = len(marked)
        level.sons_ok = sons_estimate_holds(mesh, fine)
        level.closure_ratio = closure_ratio(marked_counts, fine.n_elements, mesh0_elements)
        if config.check_meshes:
            report = check_conformity(fine)
            if not report.ok:
                raise RuntimeError("refinement produced a nonconforming mesh: "
                                   + "; ".join(report.violations[:3]))
        u_prev, z_prev, prev_dofmap = su.x, sz.x, dofmap
        mesh = fine
        ell += 1

    return history


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 5:
        raise ValueError("need at least five points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log slope needs positive values")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def rate_estimate(history: History, x="work", y="xi", window=1.0) -> float:
    """Empirical convergence rate over the trailing ``window`` decades of ``x``.

    ``x`` is ``"work"`` (all steps) or ``"elements"`` (accepted steps only);
    ``y`` is ``"xi"``, ``"eta_zeta"``, ``"goal_error"``, ``"goal_error_raw"``
    or ``"lambda"``.
    """
    records = history.accepted() if x == "elements" else history.records
    xs = np.array([r.num_elements if x == "elements" else r.work for r in records], float)
    if y == "xi":
        ys = [r.xi for r in records]
    elif y == "eta_zeta":
        ys = [r.eta * r.zeta for r in records]
    elif y == "goal_error":
        ys = [r.goal_error_abs for r in records]
    elif y == "goal_error_raw":
        ys = [abs(history.exact_goal - r.goal_raw) for r in records]
    elif y == "lambda":
        ys = [r.lambda_diag for r in records]
    else:
        raise ValueError(f"unknown quantity {y!r}")
    ys = np.array([np.nan if v is None else v for v in ys], float)
    keep = np.log10(xs) >= np.log10(xs.max()) - window
    return loglog_slope(xs[keep], ys[keep])


def record_fields():
    return [f.name for f in fields(StepRecord)]
