"""Configured experiments: configuration, recipes and the pipelines behind the CLI.

A configuration is a JSON document (schema ``horizon-bsde-config/1``) naming a
backend, a grid, a generator, a reward and a list of checks.  Pipelines turn
it into solutions, series for plotting and :class:`ResidualReport` objects.
Every random draw is derived from the configured seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .bsde import (DriverSpec, GeneratorSpec, SolutionBundle, solve_continuous_driver,
                   solve_linear_closed_form, solve_tree_exact, step1_laglad_solve, step2_cadlag_solve)
from .conditional import RegressionCE
from .laglad import LagladPath, TimeGrid, indicator_from
from .random_time import (BrownianPoissonPaths, ModelError, build_cox_model, build_default_martingales,
                          build_example132, build_finite_model, bundled_names, cox_theta_for_example132, deflate_martingale,
                          detect_eta_and_truncate, enlarge_model, load_bundled, simulate_brownian_poisson)
from .rbsde import (ReflectionBundle, rstep1_laglad_solve, rstep2_cadlag_solve, skorokhod_audit,
                    solve_reflected_tree_exact)
from .reduction import RewardSpec, lift_solution, reduce_and_solve, reduce_solution
from .verify import (ResidualReport, deflated_value_residual, inverse_survival_residual, martingale_test,
                     optional_product_residual, refinement_slope, residual_f_bsde,
                     residual_g_bsde, residual_g_rbsde, solve_g_tree_exact, survival_identities)

SCHEMA = "horizon-bsde-config/1"

_RECIPE = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["constant", "affine", "quadratic", "tanh", "put", "inactive"]},
        "state": {"enum": ["W", "J", "N", "S", "t"]},
    },
}
_COEFFS = {
    "type": "object",
    "properties": {"a": {"type": "number"}, "b": {"type": "number"}, "c": {"type": "number"}},
    "additionalProperties": False,
}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema", "name", "seed", "backend", "grid", "checks"],
    "properties": {
        "schema": {"const": SCHEMA},
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "backend": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["example132", "cox", "finite-oracle"]},
                "lambda": {"type": "number", "minimum": 0},
                "b": {"type": "number"},
                "sigma": _POSITIVE,
                "p": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "intensity": {"type": "number", "minimum": 0},
                "hazard": {"type": "object", "required": ["kind", "rate"],
                           "properties": {"kind": {"enum": ["constant", "exp-W"]}, "rate": {"type": "number", "minimum": 0},
                                          "vol": {"type": "number"}}},
                "trees": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            },
        },
        "grid": {
            "type": "object",
            "required": ["T", "steps"],
            "properties": {
                "T": _POSITIVE,
                "steps": {"type": "integer", "minimum": 1},
                "refinements": {"type": "integer", "minimum": 0, "maximum": 8},
            },
        },
        "generator": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["zero", "linear", "example132", "table"]},
                "a": {"type": "number"}, "b": {"type": "number"},
                "F1": _COEFFS, "F2": _COEFFS,
                "table": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                     "minItems": 2, "maxItems": 2}},
            },
        },
        "reward": {
            "type": "object",
            "properties": {"X": _RECIPE, "R": _RECIPE, "barrier": _RECIPE},
        },
        "solver": {
            "type": "object",
            "properties": {
                "degree": {"type": "integer", "minimum": 0, "maximum": 6},
                "paths": {"type": "integer", "minimum": 1},
                "folds": {"type": "integer", "minimum": 1},
                "state": {"type": "array", "items": {"enum": ["W", "J", "N"]}},
                "tol": _POSITIVE,
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {
                    "name": {"type": "string"},
                    "tolerance": _POSITIVE,
                    "tolerance_dt": _POSITIVE,
                    "paths": {"type": "integer", "minimum": 1},
                    "slope": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                    "steps": {"type": "integer", "minimum": 1},
                    "refinements": {"type": "integer", "minimum": 2, "maximum": 8},
                    "payoff": {"type": "number"},
                },
            },
        },
    },
}

MC_BACKENDS = ("example132", "cox")
MIN_MC_PATHS = 1000


class ConfigError(ValueError):
    """Schema violation; ``where`` is the path into the configuration."""

    def __init__(self, where: str, message: str):
        super().__init__(f"config error at {where}: {message}")
        self.where = where


def _where(path) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in path)


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict
    source: str | None = None

    @classmethod
    def from_dict(cls, data: dict, source: str | None = None) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            raise ConfigError(_where(err.absolute_path), err.message)
        backend = data["backend"]["kind"]
        paths = data.get("solver", {}).get("paths")
        if backend in MC_BACKENDS:
            if paths is None or paths < MIN_MC_PATHS:
                raise ConfigError("$.solver.paths", f"Monte Carlo backends need at least {MIN_MC_PATHS} paths")
            for i, chk in enumerate(data["checks"]):
                if "paths" in chk and chk["paths"] < MIN_MC_PATHS:
                    raise ConfigError(f"$.checks[{i}].paths", f"at least {MIN_MC_PATHS} paths")
        if backend == "finite-oracle" and "trees" not in data["backend"]:
            raise ConfigError("$.backend", "finite-oracle needs a list of trees")
        if backend == "example132":
            for key in ("lambda", "b", "sigma", "p"):
                if key not in data["backend"]:
                    raise ConfigError(f"$.backend.{key}", "required for example132")
        if backend == "cox" and "hazard" not in data["backend"]:
            raise ConfigError("$.backend.hazard", "required for cox")
        return cls(data, source)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data, str(path))

    def with_overrides(self, seed: int | None = None, refine: int | None = None) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = int(seed)
        if refine is not None:
            data["grid"]["refinements"] = int(refine)
        return ExperimentConfig.from_dict(data, self.source)

    def digest(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # convenience accessors
    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def backend(self) -> dict:
        return self.data["backend"]

    @property
    def solver(self) -> dict:
        return self.data.get("solver", {})

    @property
    def steps(self) -> int:
        return int(self.data["grid"]["steps"])

    @property
    def horizon(self) -> float:
        return float(self.data["grid"]["T"])

    def levels(self) -> list[int]:
        """Step counts of the refinement study, coarsest first, ending at ``grid.steps``."""
        r = int(self.data["grid"].get("refinements", 0))
        out = [self.steps // 2 ** j for j in range(r, -1, -1)]
        if any(s < 1 or s * 2 ** (r - i) != self.steps for i, s in enumerate(out)):
            raise ConfigError("$.grid.refinements", "steps must be divisible by 2**refinements")
        return out

    def check(self, name: str) -> dict | None:
        for chk in self.data["checks"]:
            if chk["name"] == name:
                return chk
        return None


def subseed(seed: int, *tags) -> np.random.SeedSequence:
    """Counter-style child seed: the same (seed, tags) always gives the same stream."""
    words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32]
    for tag in tags:
        words.append(int(hashlib.sha256(str(tag).encode()).hexdigest()[:8], 16))
    return np.random.SeedSequence(words)


# ---------------------------------------------------------------------------
# recipes


def generator_from(conf: dict | None, steps: int | None = None) -> GeneratorSpec:
    """User-level generator from its configuration block.

    ``linear`` reads ``y_t = xi + int (a y + b) dt - int z dW`` (rate
    ``-(a y + b)`` in the engine's orientation); ``example132`` takes
    ``F1 = F^r`` and ``F2 = F^g`` as ``a y + b + c sin(y)``; ``table`` gives
    per-node linear coefficients ``(a_k, b_k)`` in the ``linear`` sense.
    """
    conf = conf or {"kind": "zero"}
    kind = conf["kind"]
    if kind == "zero":
        return GeneratorSpec()
    if kind == "linear":
        a, b = float(conf.get("a", 0.0)), float(conf.get("b", 0.0))
        return GeneratorSpec(f_r=lambda k, ym, y, z: -(a * y + b), lipschitz={"y": abs(a)})
    if kind == "table":
        tab = np.asarray(conf["table"], float)
        if steps is not None and tab.shape[0] != steps + 1:
            raise ConfigError("$.generator.table", f"need {steps + 1} rows, one per node")
        return GeneratorSpec(f_r=lambda k, ym, y, z: -(tab[k, 0] * y + tab[k, 1]),
                             lipschitz={"y": float(np.abs(tab[:, 0]).max())})
    if kind == "example132":
        f1 = {"a": 0.0, "b": 0.0, "c": 0.0, **conf.get("F1", {})}
        f2 = {"a": 0.0, "b": 0.0, "c": 0.0, **conf.get("F2", {})}

        def f_r(k, ym, y, z):
            return f1["a"] * y + f1["b"] + f1["c"] * np.sin(y)

        def f_g(k, y, yp):
            return f2["a"] * y + f2["b"] + f2["c"] * np.sin(y)

        lip = {"y": abs(f1["a"]) + abs(f1["c"]), "g_y": abs(f2["a"]) + abs(f2["c"])}
        return GeneratorSpec(f_r=f_r, f_g=f_g if any(f2.values()) else None, lipschitz=lip)
    raise ConfigError("$.generator.kind", f"unknown generator {kind!r}")


def path_from(recipe: dict | None, grid: TimeGrid, states: dict[str, np.ndarray], n: int) -> LagladPath | None:
    """Reward or barrier path from a named recipe evaluated on the state paths."""
    if recipe is None:
        return None
    kind = recipe["kind"]
    a, b, c = (float(recipe.get(x, 0.0)) for x in ("a", "b", "c"))
    if kind == "constant":
        return LagladPath.constant(grid, float(recipe.get("value", a)), (n,))
    if kind == "inactive":
        return LagladPath.constant(grid, -1e12, (n,))
    name = recipe.get("state", "W")
    if name == "t":
        x = np.broadcast_to(grid.nodes, (n, grid.size))
    elif name in states:
        x = states[name]
    else:
        raise ConfigError("$.reward", f"state {name!r} is not available for this backend")
    if kind == "affine":
        vals = a + b * x
    elif kind == "quadratic":
        vals = a + b * x + c * x * x
    elif kind == "tanh":
        vals = a + b * np.tanh(x)
    elif kind == "put":
        vals = np.maximum(float(recipe["strike"]) - x, 0.0)
    else:
        raise ConfigError("$.reward", f"unknown path recipe {kind!r}")
    return LagladPath.cadlag(grid, np.asarray(vals, float))


def tree_states(finite) -> dict[str, np.ndarray]:
    """State paths on a finite tree: ``W`` (first component) and, when the
    tree carries a stock description, the multiplicative price ``S``."""
    W = np.cumsum(finite.increments[0], axis=1)
    states = {"W": W}
    if finite.increments.shape[0] > 1:
        states["N"] = np.cumsum(finite.increments[1], axis=1)
    stock = finite.meta.get("stock")
    if stock:
        ups = np.cumsum(finite.increments[0] > 0, axis=1)
        downs = np.cumsum(finite.increments[0] < 0, axis=1)
        states["S"] = stock["s0"] * stock["up"] ** ups * stock["down"] ** downs
    return states


# ---------------------------------------------------------------------------
# results


@dataclass
class Series:
    """An ensemble of paths on a grid, summarised as (t, mean, se, min, max)."""

    times: np.ndarray
    values: np.ndarray
    weights: np.ndarray | None = None
    valid: np.ndarray | None = None

    def summary(self) -> np.ndarray:
        vals = np.asarray(self.values, float)
        ok = np.ones(vals.shape, bool) if self.valid is None else np.asarray(self.valid, bool)
        w = np.full(vals.shape[0], 1.0) if self.weights is None else np.asarray(self.weights, float)
        wk = w[:, None] * ok
        mass = wk.sum(axis=0)
        safe = np.where(mass > 0, mass, 1.0)
        mean = (wk * vals).sum(axis=0) / safe
        var = (wk * (vals - mean) ** 2).sum(axis=0) / safe
        eff = np.where((wk ** 2).sum(axis=0) > 0, mass ** 2 / np.where((wk ** 2).sum(axis=0) > 0, (wk ** 2).sum(axis=0), 1.0), 1.0)
        se = np.sqrt(var / eff)
        lo = np.where(ok, vals, np.inf).min(axis=0)
        hi = np.where(ok, vals, -np.inf).max(axis=0)
        out = np.column_stack([self.times, mean, se, lo, hi])
        out[mass <= 0, 1:] = np.nan
        return out


@dataclass
class RunResult:
    name: str
    reports: list[ResidualReport] = field(default_factory=list)
    series: dict[str, Series] = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    bundles: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def add(self, report: ResidualReport) -> ResidualReport:
        self.reports.append(report)
        return report


def _report(name: str, value: float, tolerance: float, passed: bool | None = None, **details) -> ResidualReport:
    ok = bool(value <= tolerance) if passed is None else bool(passed)
    return ResidualReport(name, float(value), float(tolerance), ok, details=details)


def _solver_opts(cfg: ExperimentConfig) -> dict:
    opts = {}
    if "tol" in cfg.solver:
        opts["tol"] = float(cfg.solver["tol"])
    if "max_iter" in cfg.solver:
        opts["max_iter"] = int(cfg.solver["max_iter"])
    return opts


def _stream(cfg: ExperimentConfig, *tags) -> np.random.Generator:
    return np.random.default_rng(subseed(cfg.seed, *tags))


def _int_seed(cfg: ExperimentConfig, *tags) -> int:
    return int(subseed(cfg.seed, *tags).generate_state(1, np.uint64)[0] >> 1)


def _slope_report(name: str, steps, errors, bounds, **details) -> ResidualReport:
    slope = refinement_slope(steps, errors)
    lo, hi = bounds
    return ResidualReport(name, float(slope), float(hi), bool(lo <= slope <= hi), slope=float(slope),
                          details={"range": [lo, hi], "steps": list(map(int, steps)),
                                   "errors": [float(e) for e in errors], **details})


def _negative_control(name: str, audit: ResidualReport | bool, **details) -> ResidualReport:
    """A corruption must be caught: the control passes when the audit fails."""
    failed = (not audit.passed) if isinstance(audit, ResidualReport) else not audit
    value = audit.value if isinstance(audit, ResidualReport) else float(failed)
    return ResidualReport(f"negative control: {name}", float(value), 0.0, bool(failed),
                          details={"audit_failed": bool(failed), **details})


def _path_arrays(prefix: str, path: LagladPath) -> dict:
    return {f"{prefix}_pre": path.pre, f"{prefix}_at": path.at, f"{prefix}_post": path.post}


def _solution_arrays(sol: SolutionBundle, prefix: str = "") -> dict:
    out = _path_arrays(prefix + "Y", sol.Y)
    out[prefix + "Z"] = sol.Z
    if sol.U is not None:
        out[prefix + "U"] = sol.U
    if sol.L is not None:
        out[prefix + "l_r"] = sol.L.l_r_increments
        out[prefix + "l_g"] = sol.L.l_g_increments
    return out


# ---------------------------------------------------------------------------
# Brownian/Poisson example with a driver jump at the first Poisson time


def simulate_example132(cfg: ExperimentConfig, threads: int = 1):
    """Brownian and Poisson paths on the finest grid any check needs."""
    fine = cfg.steps
    chk = cfg.check("survival-identities")
    if chk and "steps" in chk:
        fine = int(np.lcm(fine, int(chk["steps"])))
    grid = TimeGrid.uniform(cfg.horizon, fine)
    mu = float(cfg.backend.get("intensity", 1.0))
    return simulate_brownian_poisson(grid, int(cfg.solver["paths"]), mu, _int_seed(cfg, "paths"),
                                     threads=threads)


@dataclass
class Example132Level:
    steps: int
    grid: TimeGrid
    model: object
    driver: DriverSpec
    generator: GeneratorSpec
    reward: RewardSpec
    ce: RegressionCE
    states: dict
    first_jump: np.ndarray
    solution: SolutionBundle | None = None
    theta: np.ndarray | None = None
    lift: SolutionBundle | None = None


def example132_level(cfg: ExperimentConfig, paths, steps: int) -> Example132Level:
    """Subsample the simulated paths to ``steps`` and set up the reduced problem.

    ``D^r`` has the continuous part ``lambda/(1-p) dt`` and a unit jump at the
    first Poisson time ``T1``; ``D^g`` jumps by one right after ``T1``.
    """
    fine = paths.grid.steps
    if fine % steps:
        raise ConfigError("$.grid", f"{steps} steps do not divide the simulation grid ({fine})")
    s = fine // steps
    grid = TimeGrid.uniform(cfg.horizon, steps)
    W, N = paths.W[:, ::s], paths.N[:, ::s]
    jumped = N > 0
    T1 = np.where(jumped.any(axis=1), jumped.argmax(axis=1), grid.beyond)
    b = cfg.backend
    lam, p, mu = float(b["lambda"]), float(b["p"]), float(b.get("intensity", 1.0))
    model = build_example132(lam, float(b["b"]), float(b["sigma"]), p, W, T1, grid, N=N, intensity=mu)
    n = W.shape[0]
    at_jump = (np.arange(grid.size)[None, :] == T1[:, None]).astype(float)
    dt = grid.increments
    driver = DriverSpec(grid, model.dM, np.broadcast_to(lam / (1.0 - p) * dt, (1, n, grid.size)),
                        at_jump > 0, at_jump[None], at_jump,
                        bracket=np.stack([dt, mu * dt])[:, None, :], point_component=1)
    states = {"W": W, "N": N, "J": model.meta["J"]}
    rw = cfg.data.get("reward", {})
    reward = RewardSpec(path_from(rw.get("X"), grid, states, n), path_from(rw.get("R"), grid, states, n), steps)
    cols = np.stack([states[c] for c in cfg.solver.get("state", ["J"])], axis=-1)
    ce = RegressionCE(cols, degree=int(cfg.solver.get("degree", 3)), regimes=jumped.astype(int),
                      folds=int(cfg.solver.get("folds", 2)))
    gen = generator_from(cfg.data.get("generator"), steps)
    return Example132Level(steps, grid, model, driver, gen, reward, ce, states, T1)


def solve_example132_level(cfg: ExperimentConfig, level: Example132Level, barrier: LagladPath | None = None) -> Example132Level:
    level.solution = reduce_and_solve(level.generator, level.model, level.reward, level.driver, ce=level.ce,
                                      barrier=barrier, route="direct", **_solver_opts(cfg))
    level.theta = cox_theta_for_example132(level.model, _stream(cfg, "theta"))
    level.lift = lift_solution(level.solution, level.model, level.theta, level.reward)
    return level


def jump_link_formula_residual(level: Example132Level) -> float:
    """Largest gap between the engine's pre-jump value at ``T1`` and
    ``R - F(R) - p (R - Y - (F(R) - F(Y)))`` evaluated at ``Y = Y_T1``."""
    sol, gen = level.solution, level.generator
    rows = np.flatnonzero(level.first_jump <= level.reward.tau)
    if not rows.size:
        return 0.0
    k = level.first_jump[rows]
    p = float(level.model.meta["p"])
    y = sol.Y.at[rows, k]
    R = level.reward.recovery(level.grid, level.model.n_paths).at[rows, k]
    F = (lambda v: np.zeros_like(v)) if gen.f_r is None else (
        lambda v: np.asarray([np.ravel(gen.f_r(kk, np.array([a]), np.array([a]), np.zeros((1, 0))))[0]
                              for kk, a in zip(k, v)]))
    formula = R - F(R) - p * (R - y - (F(R) - F(y)))
    return float(np.max(np.abs(sol.diagnostics["xi"][rows, k] - formula)))


def run_example132(cfg: ExperimentConfig, threads: int = 1, paths=None) -> RunResult:
    res = RunResult(cfg.name)
    t0 = time.perf_counter()
    paths = paths if paths is not None else simulate_example132(cfg, threads)
    res.timings["simulation"] = time.perf_counter() - t0

    chk = cfg.check("survival-identities")
    if chk:
        steps = int(chk.get("steps", cfg.steps))
        t1 = time.perf_counter()
        fine = example132_level(cfg, paths, steps)
        rep = survival_identities(fine.model, chk.get("tolerance", 5.0 / steps))
        rep.name = f"survival identities (dt=1/{steps})"
        res.timings["survival identities"] = time.perf_counter() - t1
        res.add(rep)

    g_chk = cfg.check("g-residual")
    levels = cfg.levels()
    errors = []
    t1 = time.perf_counter()
    for steps in levels:
        lvl = solve_example132_level(cfg, example132_level(cfg, paths, steps))
        g = residual_g_bsde(lvl.lift, lvl.generator, lvl.driver, lvl.model, lvl.theta, lvl.reward,
                            tolerance=1.0, statistic="mean")
        errors.append(g.value)
        res.scalars.setdefault("y0", {})[str(steps)] = lvl.solution.y0
    res.timings["solve"] = time.perf_counter() - t1
    scale = 1.0 + lvl.reward.bound
    dt = 1.0 / lvl.steps * cfg.horizon
    if g_chk:
        tol = float(g_chk.get("tolerance_dt", 10.0)) * dt * scale
        res.add(ResidualReport("G-residual after lift", g.value, tol, bool(g.value <= tol), g.per_path, g.mean,
                               g.se, g.worst_node, details={"statistic": "mean", "scale": scale, "dt": dt}))
        if len(levels) >= 3:
            res.add(_slope_report("G-residual refinement slope", levels, errors, g_chk.get("slope", [0.7, 1.3])))
    f_chk = cfg.check("f-residual")
    if f_chk:
        f = residual_f_bsde(lvl.solution, lvl.generator, lvl.driver, lvl.model, lvl.reward,
                            tolerance=float(f_chk.get("tolerance_dt", 10.0)) * dt * scale, statistic="mean")
        res.add(f)
    link_chk = cfg.check("jump-link")
    if link_chk:
        tol = float(link_chk.get("tolerance", 1e-12))
        res.add(_report("jump link formula at T1", jump_link_formula_residual(lvl), tol))
        right = float(lvl.solution.diagnostics["right_link_residual"])
        res.add(_report("right-jump fixed point", right, tol))
    res.timings["total"] = time.perf_counter() - t0
    res.scalars["scale"] = scale
    res.scalars["defaulted_fraction"] = float(np.mean(lvl.theta <= lvl.reward.tau))
    times = lvl.grid.nodes
    alive = np.arange(lvl.grid.size)[None, :] < lvl.theta[:, None]
    res.series["F_Y"] = Series(times, lvl.solution.Y.at)
    res.series["G_Y"] = Series(times, lvl.lift.Y.at)
    res.series["G_Y_alive"] = Series(times, lvl.lift.Y.at, valid=alive)
    res.series["J"] = Series(times, lvl.states["J"])
    res.bundles["paths"] = {"t": paths.grid.nodes, "W": paths.W, "N": paths.N}
    res.bundles["solution"] = {"t": times, **_solution_arrays(lvl.solution)}
    res.bundles["lift"] = {"t": times, "theta": lvl.theta, **_solution_arrays(lvl.lift)}
    return res


# ---------------------------------------------------------------------------
# Cox backend: closed forms, martingale tests and refinement studies


def _cox_setup(cfg: ExperimentConfig, n: int, steps: int, tag: str, threads: int = 1,
               deterministic: bool = False, with_model: bool = True):
    grid = TimeGrid.uniform(cfg.horizon, steps)
    sim = simulate_brownian_poisson(grid, n, 0.0, _int_seed(cfg, tag), threads=threads)
    W = sim.W
    model = None
    if with_model:
        hz = cfg.backend["hazard"]
        rate = float(hz["rate"])
        if hz["kind"] == "constant" or deterministic:
            Lam = np.broadcast_to(rate * grid.nodes, (n, grid.size))
        else:
            Lam = np.cumsum(rate * np.exp(float(hz.get("vol", 0.0)) * W) * grid.increments, axis=1)
        model = build_cox_model(LagladPath.continuous(grid, Lam), LagladPath.cadlag(grid, W[None]),
                                state={"W": W})
    dt = grid.increments
    driver = DriverSpec(grid, np.diff(W, axis=1, prepend=0.0)[None], np.broadcast_to(dt, (1, n, grid.size)),
                        bracket=dt[None, None, :])
    ce = RegressionCE(W[:, :, None], degree=int(cfg.solver.get("degree", 2)))
    return grid, W, model, driver, ce


def _conditional_terminal(recipe: dict | None, grid: TimeGrid, W: np.ndarray) -> np.ndarray | None:
    """``E[xi | F_t]`` on the grid for the Brownian recipes where it is elementary."""
    if recipe is None:
        return np.zeros_like(W)
    a, b, c = (float(recipe.get(x, 0.0)) for x in ("a", "b", "c"))
    if recipe["kind"] == "constant":
        return np.full_like(W, float(recipe.get("value", a)))
    if recipe.get("state", "W") != "W":
        return None
    if recipe["kind"] == "affine":
        return a + b * W
    if recipe["kind"] == "quadratic":
        return a + b * W + c * (W * W + grid.horizon - grid.nodes)
    return None


def run_cox(cfg: ExperimentConfig, threads: int = 1) -> RunResult:
    res = RunResult(cfg.name)
    t0 = time.perf_counter()
    reward = cfg.data.get("reward", {})
    for chk in cfg.data["checks"]:
        name = chk["name"]
        n = int(chk.get("paths", cfg.solver["paths"]))
        steps = int(chk.get("steps", cfg.steps))
        t1 = time.perf_counter()
        if name in ("zero-generator", "linear-closed-form"):
            grid, W, _, driver, ce = _cox_setup(cfg, n, steps, name, threads, with_model=False)
            xi = path_from(reward.get("X"), grid, {"W": W}, n).at[:, -1]
            if name == "zero-generator":
                sol = solve_continuous_driver(GeneratorSpec(), driver, xi, ce, **_solver_opts(cfg))
                se = xi.std() / np.sqrt(n)
                gap = abs(sol.y0 - xi.mean())
                res.add(_report("zero generator: Y0 vs terminal mean", gap, 3.0 * se, se=se, y0=sol.y0,
                                mc_mean=float(xi.mean())))
                res.series["zero_Y"] = Series(grid.nodes, sol.Y.at)
            else:
                conf = cfg.data.get("generator", {})
                if conf.get("kind") != "linear":
                    raise ConfigError("$.generator", "linear-closed-form needs a linear generator")
                a, b = float(conf.get("a", 0.0)), float(conf.get("b", 0.0))
                sol = solve_continuous_driver(generator_from(conf), driver, xi, ce, **_solver_opts(cfg))
                cond = _conditional_terminal(reward.get("X"), grid, W)
                exact_mean = float(xi.mean()) if cond is None else float(cond[0, 0])
                exact = float(solve_linear_closed_form(a, b, exact_mean, grid)[0])
                se = float(np.exp(a * cfg.horizon) * xi.std() / np.sqrt(n))
                tol = float(chk.get("tolerance", 0.01)) * abs(exact) + 3.0 * se
                res.add(_report("linear generator: Y0 vs closed form", abs(sol.y0 - exact), tol, y0=sol.y0,
                                closed_form=exact, se=se))
                res.series["linear_Y"] = Series(grid.nodes, sol.Y.at)
                if cond is not None:
                    res.series["linear_closed_form"] = Series(grid.nodes, solve_linear_closed_form(a, b, cond, grid))
        elif name == "hazard-closed-form":
            grid, W, model, driver, ce = _cox_setup(cfg, n, steps, name, threads, deterministic=True)
            # the check's own constant payoff, else a constant reward.X
            x = reward.get("X") or {"kind": "constant", "value": 1.0}
            if "payoff" in chk:
                c = float(chk["payoff"])
            elif x["kind"] == "constant":
                c = float(x.get("value", x.get("a", 0.0)))
            else:
                raise ConfigError("$.reward.X", "hazard-closed-form needs a constant payoff (or checks[].payoff)")
            rw = RewardSpec(LagladPath.constant(grid, c, (n,)), None, steps)
            sol = reduce_and_solve(GeneratorSpec(), model, rw, driver, ce=ce, route="direct", **_solver_opts(cfg))
            exact = c * np.exp(-float(cfg.backend["hazard"]["rate"]) * cfg.horizon)
            rel = abs(sol.y0 / exact - 1.0)
            res.add(_report("deterministic hazard: Y0 vs c exp(-lambda T)", rel, float(chk.get("tolerance", 0.01)),
                            y0=sol.y0, closed_form=float(exact)))
            res.series["hazard_Y"] = Series(grid.nodes, sol.Y.at)
        elif name == "martingale-mc":
            grid, W, model, driver, ce = _cox_setup(cfg, n, steps, name, threads)
            theta = model.theta_sampler(_stream(cfg, "theta", name))
            No, _ = build_default_martingales(model, theta)
            alive = np.arange(grid.size)[None, :] < theta[:, None]
            cps = np.linspace(0, steps, 6).round().astype(int)[1:]
            opts = dict(checkpoints=cps, state=W, alive=alive, degree=2, z_threshold=float(chk.get("tolerance", 3.0)))
            res.add(martingale_test(No, "mc", name="martingale test: N^o (mc)", **opts))
            Mt = deflate_martingale(model.M, model, stop=theta, variant="predictable").stopped(theta)
            res.add(martingale_test(Mt, "mc", name="martingale test: Mtilde stopped (mc)", **opts))
            A = indicator_from(grid, theta)
            res.add(_negative_control("uncompensated A (mc)", martingale_test(A, "mc", name="A", **opts)))
            res.series["N_o"] = Series(grid.nodes, No.at)
        elif name == "appendix-slopes":
            r = int(chk.get("refinements", 3))
            levels = [steps // 2 ** j for j in range(r, -1, -1)]
            grid_f, W_f, *_ = _cox_setup(cfg, n, steps, name, threads, with_model=False)
            e1, e2 = [], []
            for K in levels:
                s = steps // K
                grid = TimeGrid.uniform(cfg.horizon, K)
                W = W_f[:, ::s]
                lam = float(cfg.backend["hazard"]["rate"])
                m = build_cox_model(LagladPath.continuous(grid, np.broadcast_to(lam * grid.nodes, (n, grid.size))),
                                    LagladPath.cadlag(grid, W[None]))
                e1.append(np.abs(inverse_survival_residual(m)).max(axis=1).mean())
                lj = np.zeros((n, grid.size))
                lj[:, K // 2] = 0.2 * (1.0 + W[:, K // 2] ** 2)
                rj = np.zeros((n, grid.size))
                rj[:, K // 4] = 0.1
                C = LagladPath.from_parts(grid, continuous=np.cumsum(0.3 * np.abs(W) * grid.increments, axis=1),
                                          left_jumps=lj, right_jumps=rj)
                Kp = LagladPath.cadlag(grid, 1.0 + 0.5 * W)
                R = LagladPath.cadlag(grid, 0.3 + 0.1 * np.sin(W))
                e2.append(np.abs(deflated_value_residual(m, Kp, R, C)).max(axis=1).mean())
            bounds = chk.get("slope", [0.7, 1.3])
            res.add(_slope_report("inverse-survival identity slope", levels, e1, bounds))
            res.add(_slope_report("deflated-value dynamics slope", levels, e2, bounds))
        else:
            raise ConfigError("$.checks", f"check {name!r} is not available for the cox backend")
        res.timings[name] = time.perf_counter() - t1
    res.timings["total"] = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# finite trees: exact oracles


def tree_engine_driver(finite, right_jump: bool = True) -> DriverSpec:
    """Continuous ``dt`` plus a unit jump of ``D^r`` at node ``min(2, K)``, where
    every driving martingale jumps as well; ``D^g`` jumps by 1/2 after node 1."""
    grid, n, K = finite.grid, finite.n_scenarios, finite.steps
    s = min(2, K)
    jn = np.zeros((n, grid.size), bool)
    jn[:, s] = True
    dr = np.zeros((1, n, grid.size))
    dr[0, :, s] = 1.0
    dg = np.zeros((n, grid.size))
    if right_jump and K >= 2:
        dg[:, 1] = 0.5
    return DriverSpec(grid, finite.increments, np.broadcast_to(grid.increments, (1, n, grid.size)), jn, dr, dg)


def tree_reduction_driver(finite) -> DriverSpec:
    """Pure jump ``D^r`` (a jump of ``dt`` at every node) and a right jump of
    ``D^g`` after node 1, as required by the enlarged-tree oracle."""
    grid, n, K = finite.grid, finite.n_scenarios, finite.steps
    dr = np.broadcast_to(grid.increments, (1, n, grid.size)).copy()
    jn = np.ones((n, grid.size), bool)
    jn[:, 0] = False
    dg = np.zeros((n, grid.size))
    if K >= 2:
        dg[:, 1] = 0.5
    return DriverSpec(grid, finite.increments, None, jn, dr, dg)


def with_jump_map(gen: GeneratorSpec, driver: DriverSpec) -> GeneratorSpec:
    """Add ``h(y) = F^r(y) dD^r`` at the listed jumps (the at-value reading)."""
    if gen.f_r is None:
        return gen

    def h(k, y_minus, y):
        val = np.asarray(gen.f_r(k, y, y, np.zeros((y.shape[0], 0))), float)
        val = val[None] if val.ndim == 1 else val
        return (val * driver.dr_jump[:, :, k]).sum(axis=0)

    return GeneratorSpec(gen.f_r, gen.f_g, h, gen.lipschitz, gen.bound)


def backward_induction(finite, payoff: np.ndarray) -> np.ndarray:
    """Optimal stopping value ``V_k = max(payoff_k, E[V_{k+1} | F_k])`` by direct summation."""
    probs = np.asarray(finite.probabilities, float)
    labels = np.asarray(finite.labels)
    K = finite.steps
    V = np.zeros_like(payoff, dtype=float)
    V[:, K] = payoff[:, K]
    for k in range(K - 1, -1, -1):
        cont = np.empty(probs.size)
        for cell in np.unique(labels[k]):
            idx = labels[k] == cell
            cont[idx] = probs[idx] @ V[idx, k + 1] / probs[idx].sum()
        V[:, k] = np.maximum(payoff[:, k], cont)
    return V


def _max_gap(a: SolutionBundle, b: SolutionBundle) -> float:
    return float(max(np.abs(a.Y.at - b.Y.at).max(), np.abs(a.Y.post - b.Y.post).max(), np.abs(a.Z - b.Z).max()))


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def _lift_residual(F, gen, driver, model, space, jm, reward, reflected=False):
    lift = lift_solution(F.take(space.omega), jm, space.theta, reward.take(space.omega))
    check = residual_g_rbsde if reflected else residual_g_bsde
    return lift, check(lift, gen, driver.take(space.omega), jm, space.theta, reward.take(space.omega))


def run_tree(cfg: ExperimentConfig, name: str, res: RunResult) -> None:
    finite = load_bundled(name)
    model = build_finite_model(finite)
    grid, n, K = finite.grid, finite.n_scenarios, finite.steps
    states = tree_states(finite)
    rw = cfg.data.get("reward", {})
    X = path_from(rw.get("X"), grid, states, n)
    R = path_from(rw.get("R"), grid, states, n)
    barrier = path_from(rw.get("barrier"), grid, states, n)
    user = generator_from(cfg.data.get("generator"), K)
    ce = finite.ce()
    tag = f"[{name}]"
    wants = {c["name"] for c in cfg.data["checks"]}

    if "survival-identities" in wants:
        rep = survival_identities(model, 1e-12)
        rep.name = f"survival identities {tag}"
        res.add(rep)

    # path engines against the cell-by-cell recursion
    if "engine-oracle" in wants:
        drv = tree_engine_driver(finite)
        gen = with_jump_map(user, drv)
        xi = X.at[:, K]
        a, t_a = _timed(lambda: step1_laglad_solve(gen, drv, xi, ce))
        b, t_b = _timed(lambda: solve_tree_exact(finite, gen, drv, xi))
        res.add(_report(f"step1 vs tree oracle {tag}", _max_gap(a, b), 1e-10))
        res.timings[f"step1 {tag}"] = t_a + t_b
        drv2 = tree_engine_driver(finite, right_jump=False)
        gen2 = with_jump_map(user, drv2)
        a2, t_a = _timed(lambda: step2_cadlag_solve(gen2, drv2, xi, ce))
        b2, t_b = _timed(lambda: solve_tree_exact(finite, gen2, drv2, xi))
        res.add(_report(f"step2 vs tree oracle {tag}", _max_gap(a2, b2), 1e-10))
        res.timings[f"step2 {tag}"] = t_a + t_b
        res.bundles.setdefault("solution", {}).update(_solution_arrays(a, f"{name}/"))
        if "negative-controls" in wants:
            Yp = LagladPath(grid, a.Y.pre, a.Y.at + np.where(np.arange(grid.size) == 1, 1e-6, 0.0), a.Y.post)
            rep = _report("engine vs oracle", _max_gap(SolutionBundle(Yp, a.Z), b), 1e-10)
            res.add(_negative_control(f"perturbed engine solution {tag}", rep))

    if "reflected-oracle" in wants and barrier is not None:
        drv = tree_engine_driver(finite)
        gen = with_jump_map(user, drv)
        xi = np.maximum(X.at[:, K], barrier.at[:, K])
        a, t_a = _timed(lambda: rstep1_laglad_solve(gen, drv, barrier, xi, ce))
        b = solve_reflected_tree_exact(finite, gen, drv, barrier, xi)
        gap = max(_max_gap(a, b), float(np.abs(a.L.l_r_increments - b.L.l_r_increments).max()),
                  float(np.abs(a.L.l_g_increments - b.L.l_g_increments).max()))
        res.timings[f"rstep1 {tag}"] = t_a
        res.add(_report(f"rstep1 vs reflected tree oracle {tag}", gap, 1e-10,
                        reflection_mass=float(a.L.l_r_increments.sum() + a.L.l_g_increments.sum())))
        drv2 = tree_engine_driver(finite, right_jump=False)
        gen2 = with_jump_map(user, drv2)
        a2, t_a = _timed(lambda: rstep2_cadlag_solve(gen2, drv2, barrier, xi, ce))
        b2 = solve_reflected_tree_exact(finite, gen2, drv2, barrier, xi)
        gap2 = max(_max_gap(a2, b2), float(np.abs(a2.L.l_r_increments - b2.L.l_r_increments).max()))
        res.timings[f"rstep2 {tag}"] = t_a
        res.add(_report(f"rstep2 vs reflected tree oracle {tag}", gap2, 1e-10))
        audit = skorokhod_audit(a.Y, a.L, finite.probabilities, eps_c=1e-12, eps_b=1e-12)
        res.add(_report(f"Skorokhod sums {tag}", max(abs(audit.regular_sum), abs(audit.right_sum)), 1e-12,
                        passed=audit.passed, violation=audit.max_violation))
        res.bundles.setdefault("solution", {}).update(_solution_arrays(a, f"{name}/reflected_"))
        if "negative-controls" in wants:
            slack = a.Y.pre - barrier.pre
            i, k = np.unravel_index(np.argmax(np.where(np.arange(grid.size) >= 1, slack, -np.inf)), slack.shape)
            bad_r = a.L.l_r_increments.copy()
            bad_r[i, k] += 0.05
            bad = skorokhod_audit(a.Y, ReflectionBundle(bad_r, a.L.l_g_increments, barrier), finite.probabilities,
                                  eps_c=1e-12, eps_b=1e-12)
            res.add(_negative_control(f"illegal l increment {tag}", bad.passed,
                                      node=int(k), slack=float(slack[i, k])))

    stock = finite.meta.get("stock")
    if "american-put" in wants and stock:
        payoff = np.maximum(float(stock["strike"]) - states["S"], 0.0)
        put = LagladPath.cadlag(grid, payoff)
        a = rstep1_laglad_solve(GeneratorSpec(), DriverSpec(grid, finite.increments), put, payoff[:, K], ce)
        V = backward_induction(finite, payoff)
        res.add(_report(f"American put vs backward induction {tag}", float(np.abs(a.Y.at - V).max()), 1e-12,
                        price=float(V[0, 0])))
        audit = skorokhod_audit(a.Y, a.L, finite.probabilities, eps_c=1e-12, eps_b=1e-12)
        res.add(_report(f"American put Skorokhod sums {tag}", max(abs(audit.regular_sum), abs(audit.right_sum)),
                        1e-12, passed=audit.passed))
        res.scalars.setdefault("american_put_price", {})[name] = float(V[0, 0])

    if {"round-trip", "martingale-exact"} & wants:
        _, _, class_k = detect_eta_and_truncate(model, K)
        space, jm = enlarge_model(model)
        if "martingale-exact" in wants:
            opts = dict(labels=space.labels, weights=space.prob, tolerance=1e-12)
            No, Np = build_default_martingales(jm, space.theta)
            res.add(martingale_test(No, "exact", name=f"martingale test: N^o {tag}", **opts))
            if Np is not None:
                res.add(martingale_test(Np, "exact", name=f"martingale test: N^p {tag}", **opts))
            Mt = deflate_martingale(jm.M, jm, stop=space.theta, variant="optional").stopped(space.theta)
            res.add(martingale_test(Mt, "exact", name=f"martingale test: Mtilde stopped {tag}", **opts))
            if "negative-controls" in wants and np.any(space.theta <= K):
                # only meaningful where default can happen inside the horizon
                A = indicator_from(grid, space.theta)
                res.add(_negative_control(f"uncompensated A {tag}",
                                          martingale_test(A, "exact", name="A", **opts)))
        if "round-trip" in wants:
            drv = tree_reduction_driver(finite)
            reward = RewardSpec(X, R, K)
            if not class_k:
                try:
                    reduce_and_solve(user, model, reward, drv)
                    rejected = False
                except ModelError:
                    rejected = True
                res.add(_report(f"reduction rejects a time outside class K {tag}", 0.0 if rejected else 1.0, 0.0))
                return
            F = reduce_and_solve(user, model, reward, drv, **_solver_opts(cfg))
            res.add(_retag(residual_f_bsde(F, user, drv, model, reward), f"F-residual of reduced solve {tag}"))
            _, jm2, G = solve_g_tree_exact(finite, user, drv, reward)
            lift, rep = _lift_residual(F, user, drv, model, space, jm2, reward)
            res.add(_retag(rep, f"G-residual of lifted solution {tag}"))
            res.add(_report(f"lift vs G-oracle {tag}", _max_gap(lift, G), 1e-10))
            res.add(_retag(residual_g_bsde(G, user, drv.take(space.omega), jm2, space.theta,
                                           reward.take(space.omega)), f"G-residual of G-oracle {tag}"))
            red = reduce_solution(G, space, reward)
            red = SolutionBundle(LagladPath(grid, *(np.where(np.isfinite(v), v, F.Y.at) for v in
                                                    (red.Y.pre, red.Y.at, red.Y.post))), red.Z, red.U)
            res.add(_retag(residual_f_bsde(red, user, drv, model, reward), f"F-residual of reduced G-oracle {tag}"))
            if "negative-controls" in wants:
                Yp = LagladPath(grid, lift.Y.pre, lift.Y.at + np.where(np.arange(grid.size) == 1, 1e-6, 0.0),
                                lift.Y.post)
                bad = residual_g_bsde(SolutionBundle(Yp, lift.Z, lift.U), user, drv.take(space.omega), jm2,
                                      space.theta, reward.take(space.omega))
                res.add(_negative_control(f"perturbed lifted solution {tag}", bad))
            if barrier is not None:
                rreward = RewardSpec(barrier, R, K)
                Fr = reduce_and_solve(user, model, rreward, drv, barrier=barrier, **_solver_opts(cfg))
                res.add(_retag(residual_f_bsde(Fr, user, drv, model, rreward),
                               f"F-residual of reflected reduced solve {tag}"))
                _, _, Gr = solve_g_tree_exact(finite, user, drv, rreward, barrier=barrier)
                lr, rep = _lift_residual(Fr, user, drv, model, space, jm2, rreward, reflected=True)
                res.add(_retag(rep, f"G-residual and Skorokhod of lifted reflected solution {tag}"))
                gap = max(_max_gap(lr, Gr), float(np.abs(lr.L.l_r_increments - Gr.L.l_r_increments).max()))
                res.add(_report(f"reflected lift vs G-oracle {tag}", gap, 1e-10))
            res.bundles.setdefault("lift", {}).update(_solution_arrays(lift, f"{name}/"))

    if "product-rule" in wants:
        rng = _stream(cfg, "product-rule", name)
        A = LagladPath.from_parts(grid, left_jumps=rng.random((n, grid.size)), right_jumps=rng.random((n, grid.size)))
        B = LagladPath.from_parts(grid, left_jumps=rng.standard_normal((n, grid.size)),
                                  right_jumps=rng.standard_normal((n, grid.size)))
        res.add(_report(f"optional product rule on FV pairs {tag}",
                        float(np.abs(optional_product_residual(A, B)).max()), 1e-12))


def _retag(rep: ResidualReport, name: str) -> ResidualReport:
    rep.name = name
    return rep


def run_trees(cfg: ExperimentConfig) -> RunResult:
    res = RunResult(cfg.name)
    t0 = time.perf_counter()
    for name in _tree_names(cfg):
        t1 = time.perf_counter()
        run_tree(cfg, name, res)
        res.timings[name] = time.perf_counter() - t1
    res.timings["total"] = time.perf_counter() - t0
    return res


def run_experiment(cfg: ExperimentConfig, threads: int = 1, paths=None) -> RunResult:
    kind = cfg.backend["kind"]
    if kind == "example132":
        return run_example132(cfg, threads, paths)
    if kind == "cox":
        return run_cox(cfg, threads)
    return run_trees(cfg)


# ---------------------------------------------------------------------------
# staged runs: simulate -> solve -> reduce-lift, each from persisted arrays


def simulate_arrays(cfg: ExperimentConfig, threads: int = 1) -> dict:
    """Raw inputs of a run: Brownian/Poisson paths or the bundled trees."""
    kind = cfg.backend["kind"]
    if kind == "example132":
        p = simulate_example132(cfg, threads)
        return {"t": p.grid.nodes, "W": p.W, "N": p.N}
    if kind == "cox":
        grid = TimeGrid.uniform(cfg.horizon, cfg.steps)
        p = simulate_brownian_poisson(grid, int(cfg.solver["paths"]), 0.0, _int_seed(cfg, "paths"), threads=threads)
        return {"t": grid.nodes, "W": p.W}
    out = {}
    for name in _tree_names(cfg):
        f = load_bundled(name)
        out[f"{name}/increments"] = f.increments
        out[f"{name}/probabilities"] = f.probabilities
        out[f"{name}/theta_law"] = f.theta_law
    return out


def _tree_names(cfg: ExperimentConfig) -> list[str]:
    have = bundled_names()
    names = cfg.backend["trees"]
    if names == ["all"]:
        return have
    for i, name in enumerate(names):
        if name not in have:
            raise ConfigError(f"$.backend.trees[{i}]", f"unknown bundled tree {name!r}")
    return list(names)


@dataclass
class Problem:
    """One reduced problem and the data needed to lift its solution."""

    tag: str
    generator: GeneratorSpec
    model: object
    reward: RewardSpec
    driver: DriverSpec
    ce: object
    route: str
    barrier: LagladPath | None
    theta: np.ndarray
    index: np.ndarray | None = None
    lift_model: object | None = None

    def solve(self, cfg: ExperimentConfig) -> SolutionBundle:
        return reduce_and_solve(self.generator, self.model, self.reward, self.driver, ce=self.ce,
                                barrier=self.barrier, route=self.route, **_solver_opts(cfg))

    def lift(self, sol: SolutionBundle) -> SolutionBundle:
        if self.index is None:
            return lift_solution(sol, self.model, self.theta, self.reward)
        return lift_solution(sol.take(self.index), self.lift_model, self.theta, self.reward.take(self.index))

    def lift_residual(self, lifted: SolutionBundle, statistic: str = "max") -> ResidualReport:
        idx = slice(None) if self.index is None else self.index
        model = self.model if self.lift_model is None else self.lift_model
        check = residual_g_rbsde if lifted.L is not None else residual_g_bsde
        return check(lifted, self.generator, self.driver.take(np.arange(self.driver.n_paths)[idx]), model,
                     self.theta, self.reward.take(np.arange(self.driver.n_paths)[idx]), tolerance=1.0,
                     statistic=statistic)


def _stage_barrier(cfg: ExperimentConfig, grid, states, n, reflected: bool):
    if not reflected:
        return None
    recipe = cfg.data.get("reward", {}).get("barrier") or {"kind": "inactive"}
    return path_from(recipe, grid, states, n)


def problems_from(cfg: ExperimentConfig, arrays: dict, reflected: bool = False) -> list[Problem]:
    """Problems of a run, rebuilt deterministically from the simulated arrays.

    With ``reflected`` the reward payoff is replaced by the barrier (the
    reflected problem stops at ``max`` of the two), an absent barrier recipe
    meaning an inactive one.
    """
    kind = cfg.backend["kind"]
    rw = cfg.data.get("reward", {})
    if kind == "example132":
        grid = TimeGrid(np.asarray(arrays["t"], float))
        paths = _paths_like(grid, arrays, float(cfg.backend.get("intensity", 1.0)))
        lvl = example132_level(cfg, paths, cfg.steps)
        barrier = _stage_barrier(cfg, lvl.grid, lvl.states, lvl.model.n_paths, reflected)
        reward = lvl.reward if barrier is None else _reflected_reward(lvl.reward, barrier)
        theta = cox_theta_for_example132(lvl.model, _stream(cfg, "theta"))
        return [Problem("example132", lvl.generator, lvl.model, reward, lvl.driver, lvl.ce, "direct", barrier, theta)]
    if kind == "cox":
        grid = TimeGrid(np.asarray(arrays["t"], float))
        W = np.asarray(arrays["W"], float)
        n = W.shape[0]
        hz = cfg.backend["hazard"]
        rate = float(hz["rate"])
        if hz["kind"] == "constant":
            Lam = np.broadcast_to(rate * grid.nodes, (n, grid.size))
        else:
            Lam = np.cumsum(rate * np.exp(float(hz.get("vol", 0.0)) * W) * grid.increments, axis=1)
        model = build_cox_model(LagladPath.continuous(grid, Lam), LagladPath.cadlag(grid, W[None]), state={"W": W})
        dt = grid.increments
        driver = DriverSpec(grid, np.diff(W, axis=1, prepend=0.0)[None], np.broadcast_to(dt, (1, n, grid.size)),
                            bracket=dt[None, None, :])
        states = {"W": W}
        reward = RewardSpec(path_from(rw.get("X"), grid, states, n), path_from(rw.get("R"), grid, states, n),
                            grid.steps)
        barrier = _stage_barrier(cfg, grid, states, n, reflected)
        if barrier is not None:
            reward = _reflected_reward(reward, barrier)
        ce = RegressionCE(W[:, :, None], degree=int(cfg.solver.get("degree", 2)))
        theta = model.theta_sampler(_stream(cfg, "theta", "stage"))
        return [Problem("cox", generator_from(cfg.data.get("generator"), grid.steps), model, reward, driver, ce,
                        "direct", barrier, theta)]
    out = []
    for name in _tree_names(cfg):
        finite = load_bundled(name)
        if f"{name}/increments" in arrays and not np.array_equal(arrays[f"{name}/increments"], finite.increments):
            raise ConfigError("$.backend.trees", f"stored arrays do not match bundled tree {name!r}")
        model = build_finite_model(finite)
        _, _, class_k = detect_eta_and_truncate(model, finite.steps)
        if not class_k:
            continue
        grid, n = finite.grid, finite.n_scenarios
        states = tree_states(finite)
        reward = RewardSpec(path_from(rw.get("X"), grid, states, n), path_from(rw.get("R"), grid, states, n),
                            finite.steps)
        barrier = _stage_barrier(cfg, grid, states, n, reflected)
        if barrier is not None:
            reward = _reflected_reward(reward, barrier)
        space, jm = enlarge_model(model)
        out.append(Problem(name, generator_from(cfg.data.get("generator"), finite.steps), model, reward,
                           tree_reduction_driver(finite), finite.ce(), "transformed", barrier, space.theta,
                           space.omega, jm))
    return out


def _reflected_reward(reward: RewardSpec, barrier: LagladPath) -> RewardSpec:
    """Reward of the reflected problem: the obstacle before ``tau`` and
    ``max(X_tau, obstacle_tau)`` at ``tau``.  Only the value at ``tau`` enters
    the solve; the rest is the obstacle the lift carries over."""
    X = reward.payoff(barrier.grid, barrier.shape[0])
    k = np.arange(barrier.grid.size)[None, :] == reward.tau
    top = np.maximum(X.at, barrier.at)
    payoff = LagladPath(barrier.grid, barrier.pre, np.where(k, top, barrier.at), np.where(k, top, barrier.post))
    return RewardSpec(payoff, reward.R, reward.tau)


def _paths_like(grid: TimeGrid, arrays: dict, intensity: float):
    W, N = np.asarray(arrays["W"], float), np.asarray(arrays["N"], float)
    jumped = N > 0
    first = np.where(jumped.any(axis=1), jumped.argmax(axis=1), grid.beyond)
    return BrownianPoissonPaths(grid, W, N, first, intensity, ())


def solution_from_arrays(arrays: dict, grid: TimeGrid, prefix: str = "", barrier: LagladPath | None = None) -> SolutionBundle:
    Y = LagladPath(grid, arrays[prefix + "Y_pre"], arrays[prefix + "Y_at"], arrays[prefix + "Y_post"])
    U = arrays.get(prefix + "U")
    L = None
    if prefix + "l_r" in arrays:
        L = ReflectionBundle(np.asarray(arrays[prefix + "l_r"]), np.asarray(arrays[prefix + "l_g"]), barrier)
    return SolutionBundle(Y, np.asarray(arrays[prefix + "Z"]), None if U is None else np.asarray(U), L)
