"""Source-control solvers and adjoint reduced gradients."""

import numpy as np
import pytest

from nlsource import (CoefficientField, Control, ControlReport, CostKind,
                      CostSpec, Domain, KernelFamily, LocalGrid, SolverConfig,
                      VolumeConstraint, assemble_pairs, build_grid,
                      build_kernel, eval_cost, reduced_gradient, solve_control,
                      solve_local_control, solve_state)
from nlsource.control import ControlError, _LocalReduced, tracking_terms


def make_problem(delta=0.1, dx=0.0125, p=2.0, h0=False):
    grid = build_grid(Domain(0.0, 1.0, delta, dx))
    kern = build_kernel(KernelFamily.CONSTANT, delta, p, s=min(0.5, 1.0 / p))
    table = assemble_pairs(grid, kern, None)
    table_h0 = field = None
    if h0:
        field = CoefficientField.from_function(
            grid, lambda x: 1.0 + 0.5 * x, h_min=1.0, h_max=1.5)
        table_h0 = assemble_pairs(grid, kern, field)
    return grid, table, table_h0, field


def fd_gradient(cost_fn, g_vec, idx, eps=1e-6):
    out = {}
    for i in idx:
        e = np.zeros_like(g_vec)
        e[i] = eps
        out[i] = (cost_fn(g_vec + e) - cost_fn(g_vec - e)) / (2 * eps)
    return out


def reduced_cost_fn(spec, u0, table, table_h0, grid, cfg):
    def fn(g_vec):
        g = Control(g_vec)
        rep = solve_state(g, u0, table, grid, cfg)
        return eval_cost(g, rep.state, spec, table_h0, grid, cfg.p)
    return fn


def test_tracking_terms_derivatives():
    rng = np.random.default_rng(1)
    u = rng.normal(size=50)
    u_d = rng.normal(size=50)
    for kind in (CostKind.QUADRATIC_TRACKING, CostKind.HUBER_TRACKING):
        eps = 1e-6
        G, dG, d2G = tracking_terms(kind, u, u_d, huber_scale=0.7)
        Gp, _, _ = tracking_terms(kind, u + eps, u_d, huber_scale=0.7)
        Gm, _, _ = tracking_terms(kind, u - eps, u_d, huber_scale=0.7)
        assert np.allclose((Gp - Gm) / (2 * eps), dG, rtol=1e-5, atol=1e-8)
        eps = 1e-4  # second differences need a larger step to beat roundoff
        Gp, _, _ = tracking_terms(kind, u + eps, u_d, huber_scale=0.7)
        Gm, _, _ = tracking_terms(kind, u - eps, u_d, huber_scale=0.7)
        assert np.allclose((Gp - 2 * G + Gm) / eps**2, d2G, rtol=1e-4, atol=1e-6)
        assert np.all(d2G >= 0)


def test_gamma_requires_p2():
    dummy = CoefficientField(values=np.zeros(3), h_min=1.0, h_max=1.0)
    with pytest.raises(ControlError):
        CostSpec(g_kind=CostKind.HUBER_TRACKING, u_d=np.zeros(3),
                 beta=0.1, gamma=0.5, h0=dummy).check_p(3.0)
    # explicit override is allowed
    CostSpec(g_kind=CostKind.HUBER_TRACKING, u_d=np.zeros(3), beta=0.1,
             gamma=0.5, h0=dummy, allow_gamma_any_p=True).check_p(3.0)
    # gamma > 0 without a coefficient is rejected outright
    with pytest.raises(ControlError):
        CostSpec(g_kind=CostKind.HUBER_TRACKING, u_d=np.zeros(3),
                 beta=0.1, gamma=0.5)


def test_eval_cost_rejects_off_manifold_pair():
    grid, table, _, _ = make_problem()
    xI = grid.nodes[grid.interior_idx]
    spec = CostSpec(g_kind=CostKind.QUADRATIC_TRACKING,
                    u_d=np.sin(np.pi * xI), beta=0.1)
    g = Control(np.ones(xI.size))
    with pytest.raises(ControlError):
        eval_cost(g, np.zeros(grid.n_nodes), spec, None, grid, 2.0,
                  table_h=table)


@pytest.mark.parametrize("gamma", [0.0, 0.3])
def test_reduced_gradient_fd_p2(gamma):
    grid, table, table_h0, field = make_problem(delta=0.2, dx=0.05, h0=gamma > 0)
    xI = grid.nodes[grid.interior_idx]
    cfg = SolverConfig(p=2.0)
    u0 = VolumeConstraint.zero(grid)
    spec = CostSpec(g_kind=CostKind.HUBER_TRACKING, u_d=np.sin(np.pi * xI),
                    beta=0.05, gamma=gamma,
                    h0=field)
    rng = np.random.default_rng(2)
    g_vec = rng.normal(size=xI.size) + 2.0
    grad = reduced_gradient(Control(g_vec), spec, table, table_h0, grid, cfg)
    fn = reduced_cost_fn(spec, u0, table, table_h0, grid, cfg)
    fd = fd_gradient(fn, g_vec, idx=rng.choice(xI.size, 6, replace=False))
    for i, val in fd.items():
        assert grad[i] == pytest.approx(val, rel=1e-6, abs=1e-10)


def test_reduced_gradient_fd_p3():
    grid, table, _, _ = make_problem(delta=0.2, dx=0.05, p=3.0)
    xI = grid.nodes[grid.interior_idx]
    cfg = SolverConfig(p=3.0, grad_tol=1e-11)
    u0 = VolumeConstraint.zero(grid)
    spec = CostSpec(g_kind=CostKind.QUADRATIC_TRACKING,
                    u_d=xI * (1 - xI), beta=0.05)
    rng = np.random.default_rng(8)
    g_vec = rng.normal(size=xI.size) + 3.0
    grad = reduced_gradient(Control(g_vec), spec, table, None, grid, cfg)
    fn = reduced_cost_fn(spec, u0, table, None, grid, cfg)
    fd = fd_gradient(fn, g_vec, idx=rng.choice(xI.size, 5, replace=False), eps=1e-5)
    for i, val in fd.items():
        assert grad[i] == pytest.approx(val, rel=1e-4, abs=1e-8)


def test_descent_cost_history_monotone():
    grid, table, _, _ = make_problem()
    xI = grid.nodes[grid.interior_idx]
    spec = CostSpec(g_kind=CostKind.HUBER_TRACKING, u_d=np.sin(np.pi * xI),
                    beta=0.01)
    rep = solve_control(spec, VolumeConstraint.zero(grid), table, None, grid,
                        SolverConfig(p=2.0))
    assert rep.converged
    hist = np.asarray(rep.cost_history)
    assert np.all(np.diff(hist) <= 1e-14)


def test_optimum_beats_perturbations():
    grid, table, _, _ = make_problem()
    xI = grid.nodes[grid.interior_idx]
    cfg = SolverConfig(p=2.0)
    u0 = VolumeConstraint.zero(grid)
    spec = CostSpec(g_kind=CostKind.QUADRATIC_TRACKING,
                    u_d=np.sin(np.pi * xI), beta=0.01)
    rep = solve_control(spec, u0, table, None, grid, cfg)
    fn = reduced_cost_fn(spec, u0, table, None, grid, cfg)
    c_star = fn(rep.g_opt)
    rng = np.random.default_rng(4)
    for scale in (1e-2, 1e-1):
        for _ in range(5):
            assert fn(rep.g_opt + scale * rng.normal(size=xI.size)) >= c_star


def test_large_beta_drives_control_to_zero():
    grid, table, _, _ = make_problem()
    xI = grid.nodes[grid.interior_idx]
    u0 = VolumeConstraint.zero(grid)
    norms = []
    for beta in (1.0, 100.0):
        spec = CostSpec(g_kind=CostKind.QUADRATIC_TRACKING,
                        u_d=np.sin(np.pi * xI), beta=beta)
        rep = solve_control(spec, u0, table, None, grid, SolverConfig(p=2.0))
        norms.append(np.max(np.abs(rep.g_opt)))
    assert norms[1] < norms[0] / 10


def test_local_control_matches_direct_quadratic_solve():
    # p=2 quadratic tracking: the reduced problem is linear-quadratic, so the
    # descent solution must match the normal-equations optimum
    lgrid = LocalGrid(0.0, 1.0, 64, ua=0.0, ub=0.0)
    xi = lgrid.nodes[lgrid.interior_idx]
    spec = CostSpec(g_kind=CostKind.QUADRATIC_TRACKING,
                    u_d=np.sin(np.pi * xi), beta=0.05)
    rep = solve_local_control(spec, lgrid, np.ones(65), None, 2.0)
    assert rep.converged
    backend = _LocalReduced(spec, lgrid, np.ones(65), None, 2.0)
    n = xi.size
    # dense normal equations: grad(g) = H g + c with constant H for p'=2
    grad0, _, _ = backend.gradient(np.zeros(n))
    H = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        gk, _, _ = backend.gradient(e)
        H[:, k] = gk - grad0
    g_direct = np.linalg.solve(H, -grad0)
    assert np.max(np.abs(rep.g_opt - g_direct)) < 1e-7


def test_multistart_control_uniqueness_p2():
    grid, table, table_h0, field = make_problem(h0=True)
    xI = grid.nodes[grid.interior_idx]
    u0 = VolumeConstraint.zero(grid)
    spec = CostSpec(g_kind=CostKind.HUBER_TRACKING, u_d=np.sin(np.pi * xI),
                    beta=0.01, gamma=0.05, h0=field)
    rng = np.random.default_rng(12)
    reps = [solve_control(spec, u0, table, table_h0, grid, SolverConfig(p=2.0),
                          g0=rng.normal(size=xI.size))
            for _ in range(3)]
    for a in range(len(reps)):
        for b in range(a + 1, len(reps)):
            assert np.max(np.abs(reps[a].g_opt - reps[b].g_opt)) < 1e-6
            assert np.max(np.abs(reps[a].u_opt - reps[b].u_opt)) < 1e-6
