"""Source-control problems: nonlocal and local reduced-cost minimization.

The cost is evaluated through the state map g -> u(g); its gradient comes
from an adjoint solve with the (linearized, for p != 2) state operator, and
the descent is damped Newton-CG on the reduced cost.  Correctness of the
adjoint construction is established against finite differences in the tests.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .forms import (CoefficientField, PairTable, energy, energy_gradient,
                    energy_hessian, form_matrix, phi_p)
from .grid import Grid
from .local_ref import (LocalGrid, local_bh, local_form_matrix, local_hessian,
                        local_residual, _local_gradient, solve_local)
from .state import (Control, NonConvergenceError, SolverConfig, VolumeConstraint,
                    _newton_polish, _solve_linear, load_vector, variational_residual)

# Floor applied to |u_i - u_j| in the linearized adjoint for p < 2 and to |g|
# in the reduced Hessian for p > 2; recorded in run manifests.
EPS_REG = 1e-12


class ControlError(ValueError):
    """Invalid control-problem input."""


class CostKind(enum.Enum):
    QUADRATIC_TRACKING = "quadratic_tracking"
    HUBER_TRACKING = "huber_tracking"
    ABS_TRACKING = "abs_tracking"


def tracking_terms(kind: CostKind, u, u_d, huber_scale: float = 1.0):
    """Pointwise G(x, u), dG/du and d2G/du2 for the tracking integrand."""
    t = np.asarray(u) - np.asarray(u_d)
    if kind is CostKind.QUADRATIC_TRACKING:
        return t**2, 2.0 * t, np.full_like(t, 2.0)
    if kind is CostKind.HUBER_TRACKING:
        # pseudo-Huber: smooth, nonnegative, globally Lipschitz derivative
        mu = huber_scale
        root = np.sqrt(1.0 + (t / mu) ** 2)
        return mu**2 * (root - 1.0), t / root, root**-3
    if kind is CostKind.ABS_TRACKING:
        return np.abs(t), np.sign(t), np.zeros_like(t)
    raise ControlError(f"unknown cost kind {kind!r}")


@dataclass(frozen=True)
class CostSpec:
    """Tracking cost with L^{p'} penalty and optional nonlocal-energy term."""

    g_kind: CostKind
    u_d: np.ndarray
    beta: float
    gamma: float = 0.0
    h0: CoefficientField | None = None
    huber_scale: float = 1.0
    allow_gamma_any_p: bool = False

    def __post_init__(self):
        object.__setattr__(self, "u_d", np.asarray(self.u_d, dtype=float))
        if self.beta <= 0:
            raise ControlError(f"beta must be positive, got {self.beta}")
        if self.gamma < 0:
            raise ControlError(f"gamma must be nonnegative, got {self.gamma}")
        if self.gamma > 0 and self.h0 is None:
            raise ControlError("gamma > 0 requires a coefficient h0")

    @property
    def lipschitz_note(self) -> bool:
        """Whether the chosen G is globally Lipschitz in u."""
        return self.g_kind is not CostKind.QUADRATIC_TRACKING

    def check_p(self, p: float):
        if self.gamma > 0 and p != 2 and not self.allow_gamma_any_p:
            raise ControlError(
                "gamma > 0 is supported only for p = 2 "
                "(set allow_gamma_any_p to override)"
            )


@dataclass
class ControlReport:
    g_opt: np.ndarray
    u_opt: np.ndarray
    cost: float
    reduced_grad_norm: float
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)

    def to_manifest(self) -> dict:
        return {
            "cost": self.cost,
            "reduced_grad_norm": self.reduced_grad_norm,
            "iterations": self.iterations,
            "converged": bool(self.converged),
            "eps_reg": EPS_REG,
        }


def eval_cost(g: Control, u: np.ndarray, spec: CostSpec, table_h0: PairTable | None,
              grid: Grid, p: float, table_h: PairTable | None = None,
              residual_tol: float = 1e-6) -> float:
    """Cost at (g, u).  Passing table_h checks that u is the state of g;
    table_h=None is an explicitly off-manifold evaluation."""
    if table_h is not None:
        res = variational_residual(u, g, table_h, grid, p)
        if res > residual_tol:
            raise ControlError(
                f"(g, u) is off the state manifold: residual {res} > {residual_tol}"
            )
    I = grid.interior_idx
    w = grid.quad_weights[I]
    x = grid.nodes[I]
    G, _, _ = tracking_terms(spec.g_kind, u[I], spec.u_d, spec.huber_scale)
    p_prime = p / (p - 1)
    val = float(np.sum(w * (G + spec.beta * np.abs(g.g_values) ** p_prime)))
    if spec.gamma > 0:
        val += spec.gamma * p * energy(table_h0, u, p)
    return val


class _NonlocalReduced:
    """Reduced-cost pieces for the nonlocal state equation."""

    def __init__(self, spec: CostSpec, u0: VolumeConstraint, table_h: PairTable,
                 table_h0: PairTable | None, grid: Grid, cfg: SolverConfig):
        spec.check_p(cfg.p)
        if spec.gamma > 0 and table_h0 is None:
            raise ControlError("gamma > 0 requires the h0 pair table")
        self.spec = spec
        self.u0 = u0
        self.table_h = table_h
        self.table_h0 = table_h0
        self.grid = grid
        self.cfg = cfg
        self.p = cfg.p
        self.I = grid.interior_idx
        self.w = grid.quad_weights[self.I]
        self.x = grid.nodes[self.I]
        self._u_warm = None
        self._lin_solver = None
        if self.p == 2:
            A = form_matrix(table_h)
            self._A = A
            self._lin_solver = spla.factorized(
                A[np.ix_(self.I, self.I)].tocsc())
        self._state_iters = 0

    def solve_state(self, g_vec: np.ndarray) -> np.ndarray:
        g = Control(g_vec)
        if self.p == 2:
            rhs = load_vector(self.grid, g)[self.I].copy()
            C = self.grid.collar_idx
            rhs -= self._A[np.ix_(self.I, C)].toarray() @ self.u0.u0_values
            u = np.empty(self.grid.n_nodes)
            u[self.I] = self._lin_solver(rhs)
            u[C] = self.u0.u0_values
            return u
        guess = self._u_warm
        if guess is None:
            guess = np.zeros(self.grid.n_nodes)
            guess[self.grid.collar_idx] = self.u0.u0_values
        u, _, res = _newton_polish(guess, g, self.table_h, self.grid,
                                   SolverConfig(p=self.p, grad_tol=1e-11,
                                                hessian_floor=EPS_REG),
                                   max_steps=100)
        if res > 1e-8:
            raise NonConvergenceError(
                f"state solve stalled at residual {res}")
        self._u_warm = u
        return u

    def _adjoint_solver(self, u):
        if self.p == 2:
            return self._lin_solver
        J = energy_hessian(self.table_h, u, self.p, floor=EPS_REG)
        return spla.factorized(J[np.ix_(self.I, self.I)].tocsc())

    def _du_cost(self, u):
        """Partial of the cost with respect to the interior state values."""
        _, dG, _ = tracking_terms(self.spec.g_kind, u[self.I], self.spec.u_d,
                                  self.spec.huber_scale)
        out = self.w * dG
        if self.spec.gamma > 0:
            out = out + self.spec.gamma * self.p * energy_gradient(
                self.table_h0, u, self.p)[self.I]
        return out

    def cost(self, g_vec: np.ndarray, u: np.ndarray | None = None) -> float:
        if u is None:
            u = self.solve_state(g_vec)
        return eval_cost(Control(g_vec), u, self.spec, self.table_h0,
                         self.grid, self.p)

    def gradient(self, g_vec: np.ndarray, u: np.ndarray | None = None):
        """Reduced gradient and the state it was evaluated at."""
        if u is None:
            u = self.solve_state(g_vec)
        solver = self._adjoint_solver(u)
        lam = solver(self._du_cost(u))
        p_prime = self.p / (self.p - 1)
        grad = self.w * (self.spec.beta * p_prime * phi_p(g_vec, p_prime) + lam)
        return grad, u, solver

    def hessp(self, g_vec, u, solver):
        """Gauss-Newton Hessian-vector product of the reduced cost."""
        _, _, d2G = tracking_terms(self.spec.g_kind, u[self.I], self.spec.u_d,
                                   self.spec.huber_scale)
        p_prime = self.p / (self.p - 1)
        ag = np.maximum(np.abs(g_vec), EPS_REG)
        pen_diag = self.w * self.spec.beta * p_prime * (p_prime - 1) * ag ** (p_prime - 2)
        if self.spec.gamma > 0:
            H0 = energy_hessian(self.table_h0, u, self.p, floor=EPS_REG)
            H0_ii = H0[np.ix_(self.I, self.I)]
        else:
            H0_ii = None

        def apply(v):
            du = solver(self.w * v)
            rhs = self.w * d2G * du
            if H0_ii is not None:
                rhs = rhs + self.spec.gamma * self.p * (H0_ii @ du)
            dlam = solver(rhs)
            return pen_diag * v + self.w * dlam

        return apply


class _LocalReduced:
    """Reduced-cost pieces for the local reference state equation."""

    def __init__(self, spec: CostSpec, lgrid: LocalGrid, h: np.ndarray,
                 h0: np.ndarray | None, p: float):
        spec.check_p(p)
        if spec.gamma > 0 and h0 is None:
            raise ControlError("gamma > 0 requires the local coefficient h0")
        self.spec = spec
        self.lgrid = lgrid
        self.h = np.asarray(h, dtype=float)
        self.h0 = None if h0 is None else np.asarray(h0, dtype=float)
        self.p = p
        self.I = lgrid.interior_idx
        self.w = lgrid.quad_weights[self.I]
        self.x = lgrid.nodes[self.I]
        self.grid = lgrid
        self._u_warm = None
        self._lin_solver = None
        if p == 2:
            A = local_form_matrix(self.h, lgrid)
            self._A = A
            self._lin_solver = spla.factorized(A[np.ix_(self.I, self.I)].tocsc())
        if self.h0 is not None and p == 2:
            self._A0 = local_form_matrix(self.h0, lgrid)

    def solve_state(self, g_vec):
        if self.p == 2:
            n = self.lgrid.n_cells + 1
            bdry = np.zeros(n)
            bdry[0], bdry[-1] = self.lgrid.ua, self.lgrid.ub
            rhs = self.w * g_vec - (self._A @ bdry)[self.I]
            u = bdry
            u[self.I] = self._lin_solver(rhs)
            return u
        rep = solve_local(g_vec, self.lgrid, self.h, self.p, grad_tol=1e-11,
                          max_iters=200, initial_guess=self._u_warm)
        if rep.residual > 1e-8:
            raise NonConvergenceError(
                f"local state solve stalled at residual {rep.residual}")
        self._u_warm = rep.u
        return rep.u

    def _adjoint_solver(self, u):
        if self.p == 2:
            return self._lin_solver
        J = local_hessian(u, self.h, self.lgrid, self.p, floor=EPS_REG)
        return spla.factorized(J[np.ix_(self.I, self.I)].tocsc())

    def _gamma_value(self, u):
        return self.spec.gamma * local_bh(u, self.h0, self.lgrid, self.p)

    def _du_cost(self, u):
        _, dG, _ = tracking_terms(self.spec.g_kind, u[self.I], self.spec.u_d,
                                  self.spec.huber_scale)
        out = self.w * dG
        if self.spec.gamma > 0:
            out = out + self.spec.gamma * self.p * _local_gradient(
                u, self.h0, self.lgrid, self.p)[self.I]
        return out

    def cost(self, g_vec, u=None):
        if u is None:
            u = self.solve_state(g_vec)
        G, _, _ = tracking_terms(self.spec.g_kind, u[self.I], self.spec.u_d,
                                 self.spec.huber_scale)
        p_prime = self.p / (self.p - 1)
        val = float(np.sum(self.w * (G + self.spec.beta *
                                     np.abs(g_vec) ** p_prime)))
        if self.spec.gamma > 0:
            val += self._gamma_value(u)
        return val

    def gradient(self, g_vec, u=None):
        if u is None:
            u = self.solve_state(g_vec)
        solver = self._adjoint_solver(u)
        lam = solver(self._du_cost(u))
        p_prime = self.p / (self.p - 1)
        grad = self.w * (self.spec.beta * p_prime * phi_p(g_vec, p_prime) + lam)
        return grad, u, solver

    def hessp(self, g_vec, u, solver):
        _, _, d2G = tracking_terms(self.spec.g_kind, u[self.I], self.spec.u_d,
                                   self.spec.huber_scale)
        p_prime = self.p / (self.p - 1)
        ag = np.maximum(np.abs(g_vec), EPS_REG)
        pen_diag = self.w * self.spec.beta * p_prime * (p_prime - 1) * ag ** (p_prime - 2)
        if self.spec.gamma > 0:
            H0 = local_hessian(u, self.h0, self.lgrid, self.p, floor=EPS_REG)
            H0_ii = H0[np.ix_(self.I, self.I)]
        else:
            H0_ii = None

        def apply(v):
            du = solver(self.w * v)
            rhs = self.w * d2G * du
            if H0_ii is not None:
                rhs = rhs + self.spec.gamma * self.p * (H0_ii @ du)
            dlam = solver(rhs)
            return pen_diag * v + self.w * dlam

        return apply


def reduced_gradient(g: Control, spec: CostSpec, table_h: PairTable,
                     table_h0: PairTable | None, grid: Grid, cfg: SolverConfig,
                     u0: VolumeConstraint | None = None) -> np.ndarray:
    """Gradient of the reduced cost g -> cost(g, u(g)) at interior nodes."""
    if u0 is None:
        u0 = VolumeConstraint.zero(grid)
    backend = _NonlocalReduced(spec, u0, table_h, table_h0, grid, cfg)
    grad, _, _ = backend.gradient(g.g_values)
    return grad


def _newton_cg_descent(backend, g0, tol, max_iters):
    """Damped Newton-CG on the reduced cost; descent is monotone by Armijo."""
    g = np.asarray(g0, dtype=float).copy()
    history = []
    grad, u, solver = backend.gradient(g)
    c = backend.cost(g, u)
    history.append(c)
    it = 0
    gnorm = float(np.linalg.norm(grad))
    while gnorm > tol and it < max_iters:
        hessp = backend.hessp(g, u, solver)
        op = spla.LinearOperator((g.size, g.size), matvec=hessp)
        d, info = spla.cg(op, -grad, rtol=1e-10, atol=0.0, maxiter=400)
        if info != 0 or float(d @ grad) >= 0:
            d = -grad
        slope = float(d @ grad)
        t = 1.0
        accepted = False
        for _ in range(60):
            g_try = g + t * d
            c_try = backend.cost(g_try)
            if c_try <= c + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        g = g_try
        grad, u, solver = backend.gradient(g)
        c = backend.cost(g, u)
        history.append(c)
        gnorm = float(np.linalg.norm(grad))
        it += 1
    return g, u, c, gnorm, it, history


def solve_control(spec: CostSpec, u0: VolumeConstraint, table_h: PairTable,
                  table_h0: PairTable | None, grid: Grid, cfg: SolverConfig,
                  g0: np.ndarray | None = None, tol: float | None = None,
                  max_iters: int = 200) -> ControlReport:
    """Minimize the nonlocal reduced cost over the source."""
    backend = _NonlocalReduced(spec, u0, table_h, table_h0, grid, cfg)
    if tol is None:
        tol = 1e-8 if cfg.p == 2 else 1e-6
    if g0 is None:
        g0 = np.zeros(grid.interior_idx.size)
    g, u, c, gnorm, it, hist = _newton_cg_descent(backend, g0, tol, max_iters)
    return ControlReport(g_opt=g, u_opt=u, cost=c, reduced_grad_norm=gnorm,
                         iterations=it, converged=gnorm <= tol,
                         cost_history=hist)


def solve_local_control(spec: CostSpec, lgrid: LocalGrid, h: np.ndarray,
                        h0: np.ndarray | None, p: float,
                        g0: np.ndarray | None = None, tol: float | None = None,
                        max_iters: int = 200) -> ControlReport:
    """Minimize the local reduced cost; boundary data live on the LocalGrid."""
    backend = _LocalReduced(spec, lgrid, h, h0, p)
    if tol is None:
        tol = 1e-8 if p == 2 else 1e-6
    if g0 is None:
        g0 = np.zeros(lgrid.interior_idx.size)
    g, u, c, gnorm, it, hist = _newton_cg_descent(backend, g0, tol, max_iters)
    return ControlReport(g_opt=g, u_opt=u, cost=c, reduced_grad_norm=gnorm,
                         iterations=it, converged=gnorm <= tol,
                         cost_history=hist)
