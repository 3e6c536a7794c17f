"""Convergence experiments: source G-convergence at fixed horizon, and
horizon-to-zero convergence of states and optimal controls against the
local reference solver.

Each experiment returns a ConvergenceRecord: per-row columns plus a
machine-checkable pass/fail map.  A failed assertion is never averaged away.
"""

from dataclasses import dataclass, field

import numpy as np

from .control import ControlReport, CostSpec, solve_control, solve_local_control
from .forms import CoefficientField, assemble_pairs, energy, lp_norm
from .grid import Domain, build_grid
from .kernel import KernelFamily, build_kernel
from .local_ref import LocalGrid, local_bh, solve_local
from .state import Control, SolverConfig, VolumeConstraint, solve_state


class SweepError(ValueError):
    """Invalid experiment configuration."""


def admissible_s(p: float) -> float:
    """Largest fractional exponent allowed by the kernel hypothesis in 1-D."""
    return min(0.5, 1.0 / p)


@dataclass(frozen=True)
class DeltaSchedule:
    """Decreasing horizons with grid spacing coupled as dx = delta / kappa."""

    deltas: tuple
    kappa: int = 16

    def __post_init__(self):
        d = tuple(float(x) for x in self.deltas)
        object.__setattr__(self, "deltas", d)
        if any(x <= 0 for x in d):
            raise SweepError("all horizons must be positive")
        if any(b >= a for a, b in zip(d, d[1:])):
            raise SweepError("horizons must be strictly decreasing")
        if self.kappa < 8:
            raise SweepError(f"kappa must be >= 8, got {self.kappa}")


@dataclass
class ConvergenceRecord:
    """Rows of an experiment plus its assertion outcomes."""

    columns: dict = field(default_factory=dict)
    assertions: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_row(self, **values):
        for key, val in values.items():
            self.columns.setdefault(key, []).append(val)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()), []))

    @property
    def passed(self) -> bool:
        return all(self.assertions.values())

    def column(self, name):
        return np.asarray(self.columns[name], dtype=float)


@dataclass(frozen=True)
class OscillatingSourceSeq:
    """Weakly (not strongly) convergent sources g_j = g + A sin(j pi x)."""

    base_g: callable
    amplitude: float
    frequencies: tuple

    def __post_init__(self):
        freqs = tuple(int(j) for j in self.frequencies)
        object.__setattr__(self, "frequencies", freqs)
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise SweepError("frequencies must be strictly increasing")

    def realize(self, j: int):
        return lambda x: self.base_g(x) + self.amplitude * np.sin(j * np.pi * x)


def _build_problem(delta, kappa, p, family=KernelFamily.CONSTANT, s=None,
                   a=0.0, b=1.0, h_fn=None, dx=None):
    """Grid, kernel and pair table for one horizon.

    h_fn=None assembles the unweighted pair form (unit pair coefficient);
    otherwise the coefficient is the admissible field sampled from h_fn.
    """
    if s is None:
        s = admissible_s(p)
    dom = Domain(a=a, b=b, delta=delta, dx=delta / kappa if dx is None else dx)
    grid = build_grid(dom)
    kern = build_kernel(family, delta, p, s=s)
    h = None
    if h_fn is not None:
        vals = h_fn(grid.nodes[grid.interior_mask])
        h = CoefficientField.from_function(grid, h_fn,
                                           float(np.min(vals)), float(np.max(vals)))
    table = assemble_pairs(grid, kern, h)
    return grid, kern, table


def _local_counterpart(grid, u0_fn, h_fn, refine=4):
    dom = grid.domain
    n_cells = int(round((dom.b - dom.a) / dom.dx)) * refine
    lgrid = LocalGrid(dom.a, dom.b, n_cells,
                      ua=float(u0_fn(np.array([dom.a]))[0]),
                      ub=float(u0_fn(np.array([dom.b]))[0]))
    h_local = (np.ones(n_cells + 1) if h_fn is None
               else np.asarray(h_fn(lgrid.nodes), dtype=float))
    return lgrid, h_local


def _lp_error_vs_local(u_nl, grid, u_loc, lgrid, p):
    """Discrete L^p distance over the interior, local field interpolated."""
    xI = grid.nodes[grid.interior_idx]
    u_loc_i = np.interp(xI, lgrid.nodes, u_loc)
    wI = grid.quad_weights[grid.interior_idx]
    return lp_norm(u_nl[grid.interior_idx] - u_loc_i, wI, p)


def run_gconv_experiment(seq: OscillatingSourceSeq, delta: float, p: float,
                         u0_fn=None, h_fn=None, kappa: int = 16,
                         dx: float | None = None,
                         family=KernelFamily.CONSTANT) -> ConvergenceRecord:
    """G-convergence of state problems under weakly convergent sources.

    At fixed horizon, tracks the minimum value, the state error, the energy
    gap, and the energy of the difference, while certifying that the source
    sequence does not converge strongly.
    """
    if u0_fn is None:
        u0_fn = lambda x: np.zeros_like(x)
    grid, _, table = _build_problem(delta, kappa, p, family=family,
                                    h_fn=h_fn, dx=dx)
    cfg = SolverConfig(p=p)
    u0 = VolumeConstraint.from_function(grid, u0_fn)
    xI = grid.nodes[grid.interior_idx]
    wI = grid.quad_weights[grid.interior_idx]
    p_prime = p / (p - 1)

    g_base = Control(seq.base_g(xI))
    rep_lim = solve_state(g_base, u0, table, grid, cfg)
    if not rep_lim.converged:
        raise SweepError("limit-state solve did not converge")
    m_lim = rep_lim.energy_value
    u_lim = rep_lim.state

    record = ConvergenceRecord(meta={
        "experiment": "gconv", "delta": delta, "p": p,
        "amplitude": seq.amplitude,
    })
    for j in seq.frequencies:
        g_j = Control(seq.realize(j)(xI))
        rep = solve_state(g_j, u0, table, grid, cfg)
        if not rep.converged:
            raise SweepError(f"state solve failed at frequency {j}")
        diff = rep.state - u_lim
        record.add_row(
            j=j,
            min_value=rep.energy_value,
            min_gap=abs(rep.energy_value - m_lim),
            state_err_lp=lp_norm(diff[grid.interior_idx], wI, p),
            energy_gap=abs(p * energy(table, rep.state, p)
                           - p * energy(table, u_lim, p)),
            bh_of_diff=p * energy(table, diff, p),
            g_dist_lp_prime=lp_norm(g_j.g_values - g_base.g_values, wI, p_prime),
        )
    for col in ("min_gap", "state_err_lp", "energy_gap", "bh_of_diff"):
        vals = record.column(col)
        tail = vals[-3:]
        record.assertions[f"{col}_tail_decreasing"] = bool(
            np.all(np.diff(tail) < 0))
    gd = record.column("g_dist_lp_prime")
    record.assertions["weak_not_strong"] = bool(gd[-1] > 0.5 * gd[0])
    return record


def run_delta_sweep_state(g_fn, u0_fn, h_fn, schedule: DeltaSchedule, p: float,
                          family=KernelFamily.CONSTANT,
                          local_refine: int = 4) -> ConvergenceRecord:
    """State-equation convergence as the horizon tends to zero."""
    record = ConvergenceRecord(meta={"experiment": "delta_sweep_state", "p": p})
    for delta in schedule.deltas:
        grid, _, table = _build_problem(delta, schedule.kappa, p,
                                        family=family, h_fn=h_fn)
        cfg = SolverConfig(p=p)
        u0 = VolumeConstraint.from_function(grid, u0_fn)
        xI = grid.nodes[grid.interior_idx]
        g = Control(g_fn(xI))
        rep = solve_state(g, u0, table, grid, cfg)
        if not rep.converged:
            raise SweepError(f"nonlocal state solve failed at delta={delta}")
        lgrid, h_local = _local_counterpart(grid, u0_fn, h_fn, local_refine)
        loc = solve_local(g_fn(lgrid.nodes[lgrid.interior_idx]), lgrid,
                          h_local, p)
        if not loc.converged:
            raise SweepError(f"local reference solve failed at delta={delta}")
        bh_nonlocal = p * energy(table, rep.state, p)
        record.add_row(
            delta=delta,
            bh_nonlocal=bh_nonlocal,
            bh_local=loc.bh_local,
            energy_gap=abs(bh_nonlocal - loc.bh_local),
            state_err_lp=_lp_error_vs_local(rep.state, grid, loc.u, lgrid, p),
            nonlocal_converged=rep.converged,
            local_converged=loc.converged,
        )
    for col in ("energy_gap", "state_err_lp"):
        vals = record.column(col)
        record.assertions[f"{col}_last_below_first"] = bool(vals[-1] < vals[0])
        record.assertions[f"{col}_halved"] = bool(vals[-1] < 0.5 * vals[0])
    return record


# Fixed smooth test functions pairing the weak-convergence certificate.
WEAK_TEST_FUNCTIONS = (
    lambda x: np.ones_like(x),
    lambda x: x,
    lambda x: x * (1 - x),
    lambda x: np.sin(np.pi * x),
    lambda x: np.cos(np.pi * x),
)


def run_delta_sweep_control(cost_kind, u_d_fn, beta, gamma, u0_fn, h_fn, h0_fn,
                            schedule: DeltaSchedule, p: float,
                            family=KernelFamily.CONSTANT,
                            huber_scale: float = 1.0,
                            local_refine: int = 4,
                            control_tol: float | None = None) -> ConvergenceRecord:
    """Optimal-control convergence as the horizon tends to zero.

    Tracks the optimal-cost gap against the local control problem, the state
    error, weak-convergence pairings of the controls against fixed test
    functions, and (when gamma > 0) the energy-term columns.

    For p != 2 the solves are continued: the first horizon bootstraps from
    the p = 2 optimal control and each later horizon warm-starts from the
    previous one, interpolated onto the finer grid.  Starting a degenerate
    (p > 2 at u = 0) reduced problem from g = 0 is ill-conditioned.
    """
    record = ConvergenceRecord(meta={
        "experiment": "delta_sweep_control", "p": p, "beta": beta,
        "gamma": gamma, "cost_kind": getattr(cost_kind, "value", str(cost_kind)),
    })
    prev_nl = None   # (interior nodes, g_opt) from the previous horizon
    prev_loc = None
    for delta in schedule.deltas:
        grid, _, table = _build_problem(delta, schedule.kappa, p,
                                        family=family, h_fn=h_fn)
        cfg = SolverConfig(p=p)
        u0 = VolumeConstraint.from_function(grid, u0_fn)
        xI = grid.nodes[grid.interior_idx]
        wI = grid.quad_weights[grid.interior_idx]

        h0 = None
        table_h0 = None
        if gamma > 0:
            vals = h0_fn(xI)
            h0 = CoefficientField.from_function(grid, h0_fn,
                                                float(np.min(vals)),
                                                float(np.max(vals)))
            kern = build_kernel(family, delta, p, s=admissible_s(p))
            table_h0 = assemble_pairs(grid, kern, h0)
        spec = CostSpec(g_kind=cost_kind, u_d=u_d_fn(xI), beta=beta,
                        gamma=gamma, h0=h0, huber_scale=huber_scale)
        lgrid, h_local = _local_counterpart(grid, u0_fn, h_fn, local_refine)
        xi_loc = lgrid.nodes[lgrid.interior_idx]
        h0_local = None if gamma == 0 else np.asarray(h0_fn(lgrid.nodes))
        spec_loc = CostSpec(g_kind=cost_kind, u_d=u_d_fn(xi_loc),
                            beta=beta, gamma=gamma, h0=h0,
                            huber_scale=huber_scale)

        g0_nl = g0_loc = None
        if prev_nl is not None:
            g0_nl = np.interp(xI, *prev_nl)
            g0_loc = np.interp(xi_loc, *prev_loc)
        elif p != 2:
            _, _, table2 = _build_problem(delta, schedule.kappa, 2.0,
                                          family=family, h_fn=h_fn)
            boot = solve_control(spec, u0, table2, table_h0, grid,
                                 SolverConfig(p=2.0))
            g0_nl = boot.g_opt
            boot_loc = solve_local_control(spec_loc, lgrid, h_local, None, 2.0)
            g0_loc = boot_loc.g_opt

        rep = solve_control(spec, u0, table, table_h0, grid, cfg,
                            g0=g0_nl, tol=control_tol)
        if not rep.converged:
            raise SweepError(f"nonlocal control solve failed at delta={delta}")
        loc = solve_local_control(spec_loc, lgrid, h_local, h0_local, p,
                                  g0=g0_loc, tol=control_tol)
        if not loc.converged:
            raise SweepError(f"local control solve failed at delta={delta}")
        prev_nl = (xI, rep.g_opt)
        prev_loc = (xi_loc, loc.g_opt)

        g_loc_i = np.interp(xI, lgrid.nodes[lgrid.interior_idx], loc.g_opt)
        pairings = {
            f"pairing_{k}": float(np.sum(wI * (rep.g_opt - g_loc_i) * phi(xI)))
            for k, phi in enumerate(WEAK_TEST_FUNCTIONS)
        }
        row = dict(
            delta=delta,
            cost_nonlocal=rep.cost,
            cost_local=loc.cost,
            cost_gap=abs(rep.cost - loc.cost),
            state_err_lp=_lp_error_vs_local(rep.u_opt, grid, loc.u_opt,
                                            lgrid, p),
            **pairings,
        )
        if gamma > 0:
            row["bh0_nonlocal"] = p * energy(table_h0, rep.u_opt, p)
            row["bh0_local"] = local_bh(loc.u_opt, h0_local, lgrid, p)
            row["bh0_gap"] = abs(row["bh0_nonlocal"] - row["bh0_local"])
        record.add_row(**row)

    gaps = record.column("cost_gap")
    record.assertions["cost_gap_last_below_first"] = bool(gaps[-1] < gaps[0])
    record.assertions["cost_gap_halved"] = bool(gaps[-1] < 0.5 * gaps[0])
    if gamma > 0:
        bg = record.column("bh0_gap")
        record.assertions["bh0_gap_halved"] = bool(bg[-1] < 0.5 * bg[0])
    return record
