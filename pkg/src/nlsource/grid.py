"""Uniform 1-D grids for the extended domain with interior/collar partition."""

from dataclasses import dataclass, field

import numpy as np

# Relative slack used when classifying nodes against the interval endpoints
# and when checking that dx tiles the extended domain.
_REL_TOL = 1e-12


class GridError(ValueError):
    """Invalid domain or grid parameters."""


@dataclass(frozen=True)
class Domain:
    """Interval (a, b) extended by a horizon-width collar on each side.

    The extended domain is exactly [a - delta, b + delta]; dx must tile it.
    """

    a: float
    b: float
    delta: float
    dx: float

    def __post_init__(self):
        if not self.b > self.a:
            raise GridError(f"need b > a, got a={self.a}, b={self.b}")
        if self.delta <= 0:
            raise GridError(f"delta must be positive, got {self.delta}")
        if self.dx <= 0:
            raise GridError(f"dx must be positive, got {self.dx}")
        if self.dx > self.delta / 4 * (1 + _REL_TOL):
            raise GridError(
                f"dx={self.dx} violates dx <= delta/4 = {self.delta / 4}"
            )
        length = self.b - self.a + 2 * self.delta
        n_cells = length / self.dx
        if abs(n_cells - round(n_cells)) > 1e-8 * n_cells:
            raise GridError(
                f"dx={self.dx} does not tile the extended domain of length {length}"
            )

    @property
    def extended(self) -> tuple[float, float]:
        return (self.a - self.delta, self.b + self.delta)


@dataclass(frozen=True)
class Grid:
    """Uniform node set over the extended domain.

    Every node is exactly one of interior (strictly inside (a, b)) or collar
    (in the closed complement, endpoints included).  quad_weights are composite
    trapezoid weights over the extended domain.
    """

    domain: Domain
    nodes: np.ndarray
    interior_mask: np.ndarray
    collar_mask: np.ndarray
    quad_weights: np.ndarray
    interior_idx: np.ndarray = field(init=False)
    collar_idx: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "interior_idx", np.flatnonzero(self.interior_mask))
        object.__setattr__(self, "collar_idx", np.flatnonzero(self.collar_mask))

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def dx(self) -> float:
        return self.domain.dx


def build_grid(domain: Domain) -> Grid:
    """Discretize the extended domain into a uniform grid.

    Nodes landing on the boundary of (a, b) are classified as collar: they
    belong to the constrained side of the volume constraint.
    """
    lo, hi = domain.extended
    n = int(round((hi - lo) / domain.dx)) + 1
    nodes = lo + domain.dx * np.arange(n)
    tol = _REL_TOL * max(abs(domain.a), abs(domain.b), 1.0)
    interior = (nodes > domain.a + tol) & (nodes < domain.b - tol)
    collar = ~interior
    weights = np.full(n, domain.dx)
    weights[0] = weights[-1] = domain.dx / 2
    if not interior.any():
        raise GridError("grid has no interior nodes; refine dx or widen (a, b)")
    return Grid(
        domain=domain,
        nodes=nodes,
        interior_mask=interior,
        collar_mask=collar,
        quad_weights=weights,
    )


def restrict_to_interior(field_values: np.ndarray, grid: Grid) -> np.ndarray:
    """Values of a per-node field at the interior nodes, in node order."""
    field_values = np.asarray(field_values)
    if field_values.shape != (grid.n_nodes,):
        raise GridError(
            f"field has shape {field_values.shape}, expected ({grid.n_nodes},)"
        )
    return field_values[grid.interior_mask]
