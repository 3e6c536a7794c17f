"""Discrete nonlocal forms: pair assembly, energies, gradients, Hessians.

The double integral over the extended domain is represented by unordered
node pairs (i, j) with 0 < |x_i - x_j| < delta; a factor 2 in the evaluation
formulas restores the ordered double sum exactly.  The diagonal i = j is
excluded (punched quadrature).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import Grid
from .kernel import Kernel, kernel_radial_mass


class FormError(ValueError):
    """Invalid coefficient field or assembly input."""


def phi_p(t, p: float):
    """Odd power map |t|^(p-2) * t, with phi_p(0) = 0 for every p > 1."""
    if p <= 1:
        raise FormError(f"p must be > 1, got {p}")
    t = np.asarray(t, dtype=float)
    out = np.where(t != 0.0, np.abs(np.where(t != 0.0, t, 1.0)) ** (p - 2) * t, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class CoefficientField:
    """Diffusion coefficient: within [h_min, h_max] on interior nodes, zero on
    the collar."""

    values: np.ndarray
    h_min: float
    h_max: float

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not 0 < self.h_min <= self.h_max:
            raise FormError(
                f"need 0 < h_min <= h_max, got ({self.h_min}, {self.h_max})"
            )

    @classmethod
    def from_function(cls, grid: Grid, fn, h_min: float, h_max: float):
        """Sample fn on the interior, zero on the collar, then validate."""
        vals = np.zeros(grid.n_nodes)
        vals[grid.interior_mask] = fn(grid.nodes[grid.interior_mask])
        f = cls(values=vals, h_min=h_min, h_max=h_max)
        f.validate(grid)
        return f

    @classmethod
    def constant(cls, grid: Grid, value: float, h_min=None, h_max=None):
        return cls.from_function(
            grid,
            lambda x: np.full_like(x, value),
            h_min if h_min is not None else value,
            h_max if h_max is not None else value,
        )

    def validate(self, grid: Grid):
        if self.values.shape != (grid.n_nodes,):
            raise FormError("coefficient length does not match grid")
        inner = self.values[grid.interior_mask]
        if inner.size and (inner.min() < self.h_min - 1e-14 or
                           inner.max() > self.h_max + 1e-14):
            raise FormError("coefficient leaves [h_min, h_max] on the interior")
        if np.any(self.values[grid.collar_mask] != 0.0):
            raise FormError("coefficient must vanish on the collar")


@dataclass(frozen=True)
class PairTable:
    """Unordered node pairs within the horizon, with quadrature coupling.

    coupling[e] = w_i * w_j * k_delta(r) / r^p for the pair (i, j) at distance
    r; hmid[e] is the pair-average coefficient (1 without an attached
    coefficient field).
    """

    i: np.ndarray
    j: np.ndarray
    coupling: np.ndarray
    hmid: np.ndarray
    n_nodes: int
    p: float
    delta: float

    @property
    def n_pairs(self) -> int:
        return self.i.size


def assemble_pairs(grid: Grid, kernel: Kernel,
                   h: CoefficientField | None = None) -> PairTable:
    """Build the pair table for all node pairs with 0 < |x_i - x_j| < delta."""
    delta = grid.domain.delta
    if abs(kernel.delta - delta) > 1e-14 * max(delta, 1.0):
        raise FormError(
            f"kernel horizon {kernel.delta} does not match grid horizon {delta}"
        )
    if h is not None:
        h.validate(grid)
    dx = grid.dx
    n = grid.n_nodes
    ii, jj, cc, hh = [], [], [], []
    hv = h.values if h is not None else None
    w = grid.quad_weights
    # The kernel enters through its exact mass over radial cells centered at
    # the pair distances; the first cell absorbs the punched-out core (0, dx/2)
    # and the last cell extends to the horizon, so the discrete kernel mass
    # matches the continuum normalization.
    max_off = int(np.ceil(delta / dx)) + 1
    offsets = [o for o in range(1, max_off) if o * dx < delta * (1 - 1e-14)]
    if not offsets:
        raise FormError("horizon too small: no interacting pairs")
    last = offsets[-1]
    for off in offsets:
        r = off * dx
        cell_lo = 0.0 if off == 1 else (off - 0.5) * dx
        cell_hi = delta if off == last else (off + 0.5) * dx
        k_eff = kernel_radial_mass(kernel, cell_lo, cell_hi) / dx
        i = np.arange(n - off)
        j = i + off
        c = w[i] * w[j] * k_eff / r**kernel.p
        ii.append(i)
        jj.append(j)
        cc.append(c)
        hh.append(0.5 * (hv[i] + hv[j]) if hv is not None else np.ones(n - off))
    return PairTable(
        i=np.concatenate(ii),
        j=np.concatenate(jj),
        coupling=np.concatenate(cc),
        hmid=np.concatenate(hh),
        n_nodes=n,
        p=kernel.p,
        delta=delta,
    )


def _check_field(table: PairTable, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (table.n_nodes,):
        raise FormError(f"field shape {u.shape} does not match {table.n_nodes} nodes")
    return u


def energy(table: PairTable, u: np.ndarray, p: float) -> float:
    """(1/p) * B_h(u, u): the nonlocal Dirichlet energy without the source."""
    u = _check_field(table, u)
    du = u[table.i] - u[table.j]
    return float(np.sum(2.0 * table.coupling * table.hmid * np.abs(du) ** p) / p)


def bh_form(table: PairTable, u: np.ndarray, v: np.ndarray, p: float) -> float:
    """The form B_h(u, v); linear in v, and B_h(u, u) = p * energy(u)."""
    u = _check_field(table, u)
    v = _check_field(table, v)
    du = u[table.i] - u[table.j]
    dv = v[table.i] - v[table.j]
    return float(np.sum(2.0 * table.coupling * table.hmid * phi_p(du, p) * dv))


def energy_gradient(table: PairTable, u: np.ndarray, p: float) -> np.ndarray:
    """Gradient of energy(u): the discrete nonlocal p-Laplacian applied to u.

    Satisfies grad . v = bh_form(u, v, p) for every v.
    """
    u = _check_field(table, u)
    du = u[table.i] - u[table.j]
    flux = 2.0 * table.coupling * table.hmid * phi_p(du, p)
    grad = np.bincount(table.i, weights=flux, minlength=table.n_nodes)
    grad -= np.bincount(table.j, weights=flux, minlength=table.n_nodes)
    return grad


def form_matrix(table: PairTable) -> sp.csr_matrix:
    """For p = 2: sparse matrix A with B_h(u, v) = v^T A u and grad = A u."""
    a = 2.0 * table.coupling * table.hmid
    i, j = table.i, table.j
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([a, a, -a, -a])
    return sp.coo_matrix(
        (vals, (rows, cols)), shape=(table.n_nodes, table.n_nodes)
    ).tocsr()


def energy_hessian(table: PairTable, u: np.ndarray, p: float,
                   floor: float = 1e-12) -> sp.csr_matrix:
    """Hessian of the energy at u: an edge-weighted graph Laplacian.

    Edge weights 2 * coupling * hmid * (p-1) * |du|^(p-2); for p < 2 the
    difference magnitude is floored to avoid blow-up where du vanishes.
    """
    u = _check_field(table, u)
    du = np.abs(u[table.i] - u[table.j])
    if p == 2:
        a = 2.0 * table.coupling * table.hmid
    else:
        # flooring |du| keeps the Laplacian nonsingular: for p > 2 the true
        # edge weight vanishes with du, for p < 2 it blows up
        du = np.maximum(du, floor)
        a = 2.0 * table.coupling * table.hmid * (p - 1) * du ** (p - 2)
    i, j = table.i, table.j
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([a, a, -a, -a])
    return sp.coo_matrix(
        (vals, (rows, cols)), shape=(table.n_nodes, table.n_nodes)
    ).tocsr()


def lp_norm(values: np.ndarray, weights: np.ndarray, p: float) -> float:
    """Discrete L^p norm with quadrature weights."""
    return float(np.sum(weights * np.abs(values) ** p) ** (1 / p))
