"""Local weighted p-Laplacian reference solver on (a, b).

Piecewise-linear energy (equivalent to P1 finite elements in 1-D) with a
cell-midpoint coefficient; this is the horizon-to-zero target in the
convergence experiments.
"""

from dataclasses import dataclass

import numpy as np
import scipy.optimize as sopt
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class LocalError(ValueError):
    """Invalid local-problem input."""


@dataclass(frozen=True)
class LocalGrid:
    """Uniform nodes on [a, b] with prescribed endpoint values."""

    a: float
    b: float
    n_cells: int
    ua: float = 0.0
    ub: float = 0.0

    def __post_init__(self):
        if not self.b > self.a:
            raise LocalError("need b > a")
        if self.n_cells < 2:
            raise LocalError("need at least 2 cells")

    @property
    def dx(self) -> float:
        return (self.b - self.a) / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_cells + 1)

    @property
    def interior_idx(self) -> np.ndarray:
        return np.arange(1, self.n_cells)

    @property
    def quad_weights(self) -> np.ndarray:
        w = np.full(self.n_cells + 1, self.dx)
        w[0] = w[-1] = self.dx / 2
        return w


@dataclass
class LocalEnergyReport:
    u: np.ndarray
    bh_local: float
    residual: float
    iterations: int
    converged: bool


def midpoint_coeff(h: np.ndarray) -> np.ndarray:
    """Cell-midpoint coefficient: average of the endpoint nodal values."""
    h = np.asarray(h, dtype=float)
    return 0.5 * (h[:-1] + h[1:])


def local_bh(u: np.ndarray, h: np.ndarray, lgrid: LocalGrid, p: float) -> float:
    """b_h(u, u) = sum over cells of h_mid |du/dx|^p dx."""
    dx = lgrid.dx
    du = np.diff(np.asarray(u, dtype=float)) / dx
    return float(np.sum(midpoint_coeff(h) * np.abs(du) ** p) * dx)


def local_energy(u: np.ndarray, h: np.ndarray, g: np.ndarray,
                 lgrid: LocalGrid, p: float) -> float:
    """(1/p) b_h(u, u) - sum_i w_i g_i u_i (g given at interior nodes)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (lgrid.n_cells + 1,):
        raise LocalError("field length does not match grid")
    w = lgrid.quad_weights
    I = lgrid.interior_idx
    return local_bh(u, h, lgrid, p) / p - float(np.sum(w[I] * np.asarray(g) * u[I]))


def _local_gradient(u, h, lgrid, p):
    """Gradient of (1/p) b_h(u, u) at all nodes."""
    dx = lgrid.dx
    du = np.diff(u) / dx
    hm = midpoint_coeff(h)
    if p == 2:
        flux = hm * du
    else:
        adu = np.abs(du)
        safe = np.where(adu > 0, adu, 1.0)
        flux = np.where(adu > 0, hm * safe ** (p - 2) * du, 0.0)
    grad = np.zeros(u.size)
    grad[1:] += flux
    grad[:-1] -= flux
    return grad


def local_hessian(u, h, lgrid, p, floor=1e-12):
    """Tridiagonal Hessian of the local energy (edge-weighted Laplacian)."""
    dx = lgrid.dx
    du = np.abs(np.diff(u) / dx)
    if p != 2:
        du = np.maximum(du, floor)
        a = midpoint_coeff(h) * (p - 1) * du ** (p - 2) / dx
    else:
        a = midpoint_coeff(h) / dx
    n = u.size
    i = np.arange(n - 1)
    rows = np.concatenate([i, i + 1, i, i + 1])
    cols = np.concatenate([i, i + 1, i + 1, i])
    vals = np.concatenate([a, a, -a, -a])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def local_residual(u, h, g, lgrid, p) -> float:
    w = lgrid.quad_weights
    I = lgrid.interior_idx
    grad = _local_gradient(u, h, lgrid, p)
    return float(np.max(np.abs(grad[I] - w[I] * np.asarray(g))))


def local_form_matrix(h: np.ndarray, lgrid: LocalGrid) -> sp.csr_matrix:
    """For p = 2: matrix A with b_h(u, v) = v^T A u."""
    return local_hessian(np.zeros(lgrid.n_cells + 1), h, lgrid, 2)


def solve_local(g: np.ndarray, lgrid: LocalGrid, h: np.ndarray, p: float,
                grad_tol: float | None = None, max_iters: int = 200,
                initial_guess: np.ndarray | None = None) -> LocalEnergyReport:
    """Minimize the local energy with fixed endpoint values.

    p = 2 is one tridiagonal solve; otherwise damped Newton with Armijo
    backtracking on the energy.
    """
    h = np.asarray(h, dtype=float)
    g = np.asarray(g, dtype=float)
    if h.shape != (lgrid.n_cells + 1,):
        raise LocalError("coefficient length does not match grid")
    if g.shape != (lgrid.interior_idx.size,):
        raise LocalError("source length does not match interior size")
    if grad_tol is None:
        grad_tol = 1e-10 if p == 2 else 1e-8
    I = lgrid.interior_idx
    w = lgrid.quad_weights
    n = lgrid.n_cells + 1
    u = np.zeros(n) if initial_guess is None else initial_guess.copy()
    u[0], u[-1] = lgrid.ua, lgrid.ub
    if initial_guess is None:
        u[:] = np.linspace(lgrid.ua, lgrid.ub, n)

    rhs = np.zeros(n)
    rhs[I] = w[I] * g

    if p == 2:
        A = local_form_matrix(h, lgrid)
        bdry = np.zeros(n)
        bdry[0], bdry[-1] = lgrid.ua, lgrid.ub
        b = rhs[I] - (A @ bdry)[I]
        u_int = spla.spsolve(A[np.ix_(I, I)].tocsc(), b)
        u = bdry.copy()
        u[I] = u_int
        res = local_residual(u, h, g, lgrid, p)
        return LocalEnergyReport(u=u, bh_local=local_bh(u, h, lgrid, p),
                                 residual=res, iterations=1,
                                 converged=res <= grad_tol)

    def obj(uu):
        return local_bh(uu, h, lgrid, p) / p - float(rhs @ uu)

    def grad_int(uu):
        return _local_gradient(uu, h, lgrid, p)[I] - rhs[I]

    # quasi-Newton pre-solve: pulls rough initial guesses into the basin
    # where the damped Newton iteration below is reliable
    def fun(x):
        uu = u.copy()
        uu[I] = x
        gr = grad_int(uu)
        return obj(uu), gr

    opt = sopt.minimize(fun, u[I], jac=True, method="L-BFGS-B",
                        options={"maxiter": 20 * I.size, "gtol": grad_tol / 10,
                                 "ftol": 1e-16})
    u[I] = opt.x

    # damped Newton with staged Hessian floors; keep the best iterate since
    # near-kink steps can bounce for p < 2
    res_vec = grad_int(u)
    best_u, best_res = u.copy(), float(np.max(np.abs(res_vec)))
    it = 0
    for floor in (1e-4, 1e-8, 1e-12):
        stage = 0
        while np.max(np.abs(res_vec)) > grad_tol and stage < max_iters:
            H = local_hessian(u, h, lgrid, p, floor=floor)
            d = spla.spsolve(H[np.ix_(I, I)].tocsc(), -res_vec)
            rnorm0 = float(np.max(np.abs(res_vec)))
            u_full = u.copy()
            u_full[I] = u[I] + d
            t = 1.0
            if float(np.max(np.abs(grad_int(u_full)))) < rnorm0:
                u_try = u_full
            else:
                f0 = obj(u)
                slope = float(res_vec @ d)
                if slope >= 0:
                    d, slope = -res_vec, -float(res_vec @ res_vec)
                for _ in range(60):
                    u_try = u.copy()
                    u_try[I] = u[I] + t * d
                    if obj(u_try) <= f0 + 1e-4 * t * slope:
                        break
                    t *= 0.5
            u = u_try
            res_vec = grad_int(u)
            rmax = float(np.max(np.abs(res_vec)))
            if rmax < best_res:
                best_u, best_res = u.copy(), rmax
            it += 1
            stage += 1
            if t < 1e-10:
                break
        if best_res <= grad_tol:
            break
    return LocalEnergyReport(u=best_u, bh_local=local_bh(best_u, h, lgrid, p),
                             residual=best_res, iterations=it,
                             converged=best_res <= grad_tol)
