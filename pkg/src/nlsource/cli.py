"""Command-line front end: TOML config in, JSON manifest + CSV tables out.

Exit codes: 0 all assertions passed, 1 assertion failure, 2 config error,
3 solver non-convergence.
"""

import argparse
import json
import sys
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .control import CostKind, CostSpec, EPS_REG, solve_control, solve_local_control
from .forms import CoefficientField, assemble_pairs
from .grid import Domain, GridError, build_grid
from .kernel import (KernelError, KernelFamily, build_kernel, compute_c_n,
                     kernel_radial_mass)
from .local_ref import LocalGrid, solve_local
from .state import (Control, NonConvergenceError, SolverConfig,
                    VolumeConstraint, solve_state)
from .sweep import (DeltaSchedule, OscillatingSourceSeq, SweepError,
                    run_delta_sweep_control, run_delta_sweep_state,
                    run_gconv_experiment)

COMMANDS = ("solve-state", "solve-local", "solve-control",
            "sweep-state", "sweep-control", "gconv")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the violated rule."""


# Names available in function-valued config fields (expressions in x).
_SAFE_NAMES = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs, "pi": np.pi, "e": np.e,
}


def make_field(expr):
    """Compile a scalar expression in x into a vectorized callable.

    Only arithmetic and the whitelisted math names are available; anything
    else raises ConfigError at compile or call time.
    """
    if isinstance(expr, (int, float)):
        value = float(expr)
        return lambda x: np.full_like(np.asarray(x, dtype=float), value)
    if not isinstance(expr, str):
        raise ConfigError(f"expected a number or expression string, got {expr!r}")
    try:
        code = compile(expr, "<config>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad expression {expr!r}: {exc.msg}") from exc
    for name in code.co_names:
        if name not in _SAFE_NAMES and name != "x":
            raise ConfigError(
                f"expression {expr!r} uses disallowed name {name!r}"
            )

    def field(x):
        x = np.asarray(x, dtype=float)
        out = eval(code, {"__builtins__": {}}, {**_SAFE_NAMES, "x": x})
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()

    return field


# Recognized keys per config section; unknown keys are rejected, not ignored.
_SECTION_KEYS = {
    "domain": {"a", "b", "delta", "dx", "kappa"},
    "kernel": {"family", "s"},
    "coefficient": {"h", "h_min", "h_max"},
    "solver": {"p", "grad_tol", "max_iters", "hessian_floor", "optimizer"},
    "state": {"g", "u0"},
    "cost": {"kind", "u_d", "beta", "gamma", "h0", "huber_scale",
             "allow_gamma_any_p", "tol", "max_iters"},
    "schedule": {"deltas", "kappa", "local_refine"},
    "gconv": {"base_g", "amplitude", "frequencies", "delta", "dx", "kappa"},
}
_TOP_KEYS = set(_SECTION_KEYS) | {"seed"}

_REQUIRED_SECTIONS = {
    "solve-state": ("domain", "solver", "state"),
    "solve-local": ("domain", "solver", "state"),
    "solve-control": ("domain", "solver", "cost", "state"),
    "sweep-state": ("schedule", "solver", "state"),
    "sweep-control": ("schedule", "solver", "cost", "state"),
    "gconv": ("gconv", "solver", "state"),
}


@dataclass
class RunConfig:
    """Validated configuration for one CLI run."""

    command: str
    raw: dict
    seed: int
    out_dir: Path


def _check_keys(raw: dict):
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown top-level key {key!r}")
        if key in _SECTION_KEYS:
            if not isinstance(raw[key], dict):
                raise ConfigError(f"section [{key}] must be a table")
            for sub in raw[key]:
                if sub not in _SECTION_KEYS[key]:
                    raise ConfigError(f"unknown key {sub!r} in section [{key}]")


def parse_config(text: str, command: str, out_dir, seed: int | None = None) -> RunConfig:
    """Parse and validate a TOML run configuration.

    Every structural invariant is checked here so that run() only sees
    well-posed problems; error messages name the violated rule.
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from exc
    _check_keys(raw)
    for section in _REQUIRED_SECTIONS[command]:
        if section not in raw:
            raise ConfigError(f"command {command!r} requires section [{section}]")

    solver = raw.get("solver", {})
    p = float(solver.get("p", 2.0))
    if p <= 1:
        raise ConfigError(f"solver rule p > 1 violated: p={p}")

    if "domain" in raw:
        dom = raw["domain"]
        a = float(dom.get("a", 0.0))
        b = float(dom.get("b", 1.0))
        if b <= a:
            raise ConfigError(f"domain rule b > a violated: a={a}, b={b}")
        if "dx" in dom and "kappa" in dom:
            raise ConfigError("give exactly one of domain.dx or domain.kappa")
        local_only = command == "solve-local" and "dx" in dom
        if not local_only:
            delta = float(dom.get("delta", 0.0))
            dx = (float(dom["dx"]) if "dx" in dom
                  else delta / int(dom.get("kappa", 16)))
            if delta <= 0:
                raise ConfigError(f"domain rule delta > 0 violated: delta={delta}")
            if dx > delta / 4 * (1 + 1e-12):
                raise ConfigError(
                    f"grid rule dx <= delta/4 violated: dx={dx}, delta/4={delta / 4}"
                )

    if "kernel" in raw:
        fam = raw["kernel"].get("family", "constant")
        try:
            KernelFamily(fam)
        except ValueError:
            raise ConfigError(
                f"kernel rule: family must be one of "
                f"{[f.value for f in KernelFamily]}, got {fam!r}"
            ) from None

    if "cost" in raw:
        cost = raw["cost"]
        kind = cost.get("kind", "huber_tracking")
        try:
            CostKind(kind)
        except ValueError:
            raise ConfigError(
                f"cost rule: kind must be one of "
                f"{[k.value for k in CostKind]}, got {kind!r}"
            ) from None
        gamma = float(cost.get("gamma", 0.0))
        if gamma < 0:
            raise ConfigError(f"cost rule gamma >= 0 violated: gamma={gamma}")
        if gamma > 0 and p != 2 and not cost.get("allow_gamma_any_p", False):
            raise ConfigError(
                "cost rule: the energy penalty (gamma > 0) is restricted to "
                f"p = 2; got p={p}. Set cost.allow_gamma_any_p = true to override."
            )
        if gamma > 0 and "h0" not in cost:
            raise ConfigError("cost rule: gamma > 0 requires cost.h0")
        if float(cost.get("beta", 1.0)) <= 0:
            raise ConfigError("cost rule beta > 0 violated")

    if "coefficient" in raw:
        coeff = raw["coefficient"]
        if "h" not in coeff:
            raise ConfigError("section [coefficient] requires key h")
        h_min = float(coeff.get("h_min", 0.0))
        if h_min <= 0 and "h_min" in coeff:
            raise ConfigError(f"coefficient rule h_min > 0 violated: {h_min}")

    if "schedule" in raw:
        sched = raw["schedule"]
        if "deltas" not in sched:
            raise ConfigError("section [schedule] requires key deltas")
        try:
            DeltaSchedule(tuple(sched["deltas"]), int(sched.get("kappa", 16)))
        except SweepError as exc:
            raise ConfigError(f"schedule rule violated: {exc}") from exc

    if "gconv" in raw:
        gc = raw["gconv"]
        for key in ("base_g", "frequencies", "delta"):
            if key not in gc:
                raise ConfigError(f"section [gconv] requires key {key}")

    if seed is None:
        seed = int(raw.get("seed", 0))
    return RunConfig(command=command, raw=raw, seed=seed, out_dir=Path(out_dir))


def _write_csv(path: Path, columns: dict):
    """Write columns to CSV with full-precision, locale-free formatting."""
    keys = list(columns)
    n = len(columns[keys[0]]) if keys else 0
    lines = [",".join(keys)]
    for i in range(n):
        cells = []
        for k in keys:
            v = columns[k][i]
            cells.append("%.17g" % v if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def _domain_pieces(raw, p):
    dom = raw["domain"]
    a = float(dom.get("a", 0.0))
    b = float(dom.get("b", 1.0))
    delta = float(dom["delta"])
    dx = float(dom["dx"]) if "dx" in dom else delta / int(dom.get("kappa", 16))
    grid = build_grid(Domain(a=a, b=b, delta=delta, dx=dx))
    fam = KernelFamily(raw.get("kernel", {}).get("family", "constant"))
    s = raw.get("kernel", {}).get("s")
    s = float(s) if s is not None else min(0.5, 1.0 / p)
    kern = build_kernel(fam, delta, p, s=s)
    h = None
    if "coefficient" in raw:
        coeff = raw["coefficient"]
        h_fn = make_field(coeff["h"])
        vals = h_fn(grid.nodes[grid.interior_mask])
        h = CoefficientField.from_function(
            grid, h_fn,
            float(coeff.get("h_min", np.min(vals))),
            float(coeff.get("h_max", np.max(vals))),
        )
    return grid, kern, h


def _solver_config(raw, p):
    solver = raw.get("solver", {})
    kwargs = {"p": p}
    if "grad_tol" in solver:
        kwargs["grad_tol"] = float(solver["grad_tol"])
    if "max_iters" in solver:
        kwargs["max_iters"] = int(solver["max_iters"])
    if "hessian_floor" in solver:
        kwargs["hessian_floor"] = float(solver["hessian_floor"])
    return SolverConfig(**kwargs)


def _cost_spec(raw, xI, grid=None, kern=None):
    cost = raw["cost"]
    spec_kwargs = dict(
        g_kind=CostKind(cost.get("kind", "huber_tracking")),
        u_d=make_field(cost["u_d"])(xI),
        beta=float(cost.get("beta", 1.0)),
        gamma=float(cost.get("gamma", 0.0)),
        huber_scale=float(cost.get("huber_scale", 1.0)),
        allow_gamma_any_p=bool(cost.get("allow_gamma_any_p", False)),
    )
    table_h0 = None
    if spec_kwargs["gamma"] > 0 and grid is not None:
        h0_fn = make_field(cost["h0"])
        vals = h0_fn(grid.nodes[grid.interior_mask])
        h0 = CoefficientField.from_function(grid, h0_fn,
                                            float(np.min(vals)),
                                            float(np.max(vals)))
        spec_kwargs["h0"] = h0
        table_h0 = assemble_pairs(grid, kern, h0)
    return CostSpec(**spec_kwargs), table_h0


def _schedule(raw):
    sched = raw["schedule"]
    return DeltaSchedule(tuple(float(d) for d in sched["deltas"]),
                         int(sched.get("kappa", 16)))


def run(config: RunConfig) -> int:
    """Execute one command and write manifest.json plus CSV tables."""
    raw = config.raw
    p = float(raw.get("solver", {}).get("p", 2.0))
    cfg = _solver_config(raw, p)
    g_fn = make_field(raw["state"]["g"]) if "g" in raw.get("state", {}) else None
    u0_fn = make_field(raw["state"].get("u0", 0.0))
    h_expr = raw.get("coefficient", {}).get("h")
    h_fn = make_field(h_expr) if h_expr is not None else None
    np.random.default_rng(config.seed)  # commands are deterministic; seed echoed

    config.out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    manifest = {
        "command": config.command,
        "version": __version__,
        "seed": config.seed,
        "config": raw,
        "eps_reg": EPS_REG,
        "hessian_floor": cfg.hessian_floor,
        "grad_tol": cfg.grad_tol,
    }
    assertions = {}

    if config.command in ("solve-state", "solve-control"):
        grid, kern, h = _domain_pieces(raw, p)
        mass = kernel_radial_mass(kern, 0.0, kern.delta)
        c_n = compute_c_n(kern.dim, kern.p).value
        manifest["kernel_normalization_check"] = 2.0 * mass / c_n
        table = assemble_pairs(grid, kern, h)
        u0 = VolumeConstraint.from_function(grid, u0_fn)
        xI = grid.nodes[grid.interior_idx]
        if config.command == "solve-state":
            rep = solve_state(Control(g_fn(xI)), u0, table, grid, cfg)
            manifest["report"] = rep.to_manifest()
            assertions["converged"] = bool(rep.converged)
            _write_csv(config.out_dir / "state.csv",
                       {"x": list(grid.nodes), "u": list(rep.state)})
        else:
            spec, table_h0 = _cost_spec(raw, xI, grid, kern)
            rep = solve_control(spec, u0, table, table_h0, grid, cfg,
                                tol=(float(raw["cost"]["tol"])
                                     if "tol" in raw["cost"] else None),
                                max_iters=int(raw["cost"].get("max_iters", 200)))
            manifest["report"] = rep.to_manifest()
            assertions["converged"] = bool(rep.converged)
            _write_csv(config.out_dir / "control.csv",
                       {"x": list(xI), "g_opt": list(rep.g_opt),
                        "u_opt": list(rep.u_opt[grid.interior_idx])})

    elif config.command == "solve-local":
        dom = raw["domain"]
        a, b = float(dom.get("a", 0.0)), float(dom.get("b", 1.0))
        dx = float(dom["dx"]) if "dx" in dom else \
            float(dom["delta"]) / int(dom.get("kappa", 16))
        n_cells = int(round((b - a) / dx))
        lgrid = LocalGrid(a, b, n_cells,
                          ua=float(u0_fn(np.array([a]))[0]),
                          ub=float(u0_fn(np.array([b]))[0]))
        h_local = (np.ones(n_cells + 1) if h_fn is None else h_fn(lgrid.nodes))
        rep = solve_local(g_fn(lgrid.nodes[lgrid.interior_idx]), lgrid,
                          h_local, p)
        manifest["report"] = {"bh_local": rep.bh_local,
                              "residual": rep.residual,
                              "iterations": rep.iterations,
                              "converged": rep.converged}
        assertions["converged"] = bool(rep.converged)
        _write_csv(config.out_dir / "local_state.csv",
                   {"x": list(lgrid.nodes), "u": list(rep.u)})

    elif config.command == "sweep-state":
        record = run_delta_sweep_state(g_fn, u0_fn, h_fn, _schedule(raw), p)
        manifest["meta"] = record.meta
        assertions.update(record.assertions)
        _write_csv(config.out_dir / "sweep_state.csv", record.columns)

    elif config.command == "sweep-control":
        cost = raw["cost"]
        record = run_delta_sweep_control(
            CostKind(cost.get("kind", "huber_tracking")),
            make_field(cost["u_d"]),
            beta=float(cost.get("beta", 1.0)),
            gamma=float(cost.get("gamma", 0.0)),
            u0_fn=u0_fn, h_fn=h_fn,
            h0_fn=make_field(cost["h0"]) if "h0" in cost else None,
            schedule=_schedule(raw), p=p,
            huber_scale=float(cost.get("huber_scale", 1.0)),
            control_tol=float(cost["tol"]) if "tol" in cost else None,
        )
        manifest["meta"] = record.meta
        assertions.update(record.assertions)
        _write_csv(config.out_dir / "sweep_control.csv", record.columns)

    elif config.command == "gconv":
        gc = raw["gconv"]
        seq = OscillatingSourceSeq(
            base_g=make_field(gc["base_g"]),
            amplitude=float(gc.get("amplitude", 0.5)),
            frequencies=tuple(int(j) for j in gc["frequencies"]),
        )
        record = run_gconv_experiment(
            seq, delta=float(gc["delta"]), p=p, u0_fn=u0_fn, h_fn=h_fn,
            kappa=int(gc.get("kappa", 16)),
            dx=float(gc["dx"]) if "dx" in gc else None,
        )
        manifest["meta"] = record.meta
        assertions.update(record.assertions)
        _write_csv(config.out_dir / "gconv.csv", record.columns)

    manifest["assertions"] = assertions
    manifest["wall_time_s"] = time.perf_counter() - t0
    manifest["all_passed"] = all(assertions.values())
    (config.out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, default=str) + "\n")
    return 0 if manifest["all_passed"] else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nlsource",
        description="Nonlocal p-Laplacian state and source-control solver.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML config path")
    parser.add_argument("--out", default="out", help="artifact directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="overrides the seed key in the config")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        config = parse_config(text, args.command, args.out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(config)
    except (ConfigError, GridError, KernelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NonConvergenceError, SweepError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
