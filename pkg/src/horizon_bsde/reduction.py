"""Reduction of a BSDE up to a random time to a BSDE in the reference filtration, and the lift back.

User-level generators are :class:`GeneratorSpec` instances read as follows:

* ``f_r(k, y_minus, y, z)`` is the rate against every component of ``D^r``:
  against the continuous increments on ``(t_{k-1}, t_k]`` it is evaluated at
  the value after ``t_{k-1}``, against a jump of ``D^r`` at ``t_k`` at the
  value ``y_k`` itself (optional evaluation, ``z`` passed as zeros);
* ``f_g(k, y, y_plus)`` is the rate against the right jump of ``D^g`` at ``t_k``.

The F-level problem carries the recovery adjustment
``R - Y - (F(R) - F(Y)) dD^r`` integrated against the hazard process
``Gamma``.  It is solved either directly (drift against ``[M, M]`` kept in
the generator, used for continuous filtrations) or after the linear change
of variables ``Ybar = G Y`` that removes that drift (exact on trees).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import DriverSpec, GeneratorSpec, SolutionBundle, step1_laglad_solve
from .laglad import LagladPath, safe_divide
from .random_time import ModelError, RandomTimeModel, _check_theta, detect_eta_and_truncate
from .rbsde import ReflectionBundle, rstep1_laglad_solve


@dataclass(frozen=True, eq=False)
class RewardSpec:
    """Pre-default payoff ``X``, recovery ``R`` and the terminal node ``tau``.

    ``X`` and ``R`` are F-adapted laglad paths of shape ``(n, K+1)``; either
    may be omitted (zero).
    """

    X: LagladPath | None
    R: LagladPath | None
    tau: int

    def payoff(self, grid, n: int) -> LagladPath:
        return self.X if self.X is not None else LagladPath.constant(grid, 0.0, (n,))

    def recovery(self, grid, n: int) -> LagladPath:
        return self.R if self.R is not None else LagladPath.constant(grid, 0.0, (n,))

    @property
    def bound(self) -> float:
        vals = [np.max(np.abs(p.at)) for p in (self.X, self.R) if p is not None]
        return float(max(vals, default=0.0))

    def take(self, index) -> "RewardSpec":
        pick = lambda p: None if p is None else p[np.asarray(index)]
        return RewardSpec(pick(self.X), pick(self.R), self.tau)


def reduce_reward(reward: RewardSpec) -> LagladPath:
    """``X(tau) = R 1_[0, tau] + X_tau 1_(tau, inf)``."""
    ref = reward.X if reward.X is not None else reward.R
    if ref is None:
        raise ValueError("reward needs X or R")
    grid = ref.grid
    n = ref.shape[0]
    X, R = reward.payoff(grid, n), reward.recovery(grid, n)
    k = np.arange(grid.size)
    x_tau = X.at[:, reward.tau][:, None]
    return LagladPath(grid, np.where(k > reward.tau, x_tau, R.pre), np.where(k > reward.tau, x_tau, R.at),
                      np.where(k >= reward.tau, x_tau, R.post))


def reward_at_horizon(reward: RewardSpec, theta) -> np.ndarray:
    """``Xhat_{tau ^ theta}``: ``X_tau`` if ``tau < theta``, else ``R_theta``."""
    ref = reward.X if reward.X is not None else reward.R
    grid, n = ref.grid, ref.shape[0]
    X, R = reward.payoff(grid, n), reward.recovery(grid, n)
    theta = np.asarray(theta)
    rows = np.arange(n)
    r_theta = R.at[rows, np.minimum(theta, grid.steps)]
    return np.where(reward.tau < theta, X.at[:, reward.tau], r_theta)


# ---------------------------------------------------------------------------
# generator pieces


def _components(val, q: int) -> np.ndarray:
    val = np.asarray(val, float)
    return val[None] if val.ndim == 1 else val


def _eval_jump_rate(gen: GeneratorSpec, k: int, y: np.ndarray, dr_k: np.ndarray) -> np.ndarray:
    """``F^r(k, y) . dD^r_k`` at a jump of ``D^r`` (optional evaluation)."""
    if gen.f_r is None or not np.any(dr_k != 0):
        return np.zeros_like(y)
    zero_z = np.zeros((y.shape[0], 0))
    return (_components(gen.f_r(k, y, y, zero_z), dr_k.shape[0]) * dr_k).sum(axis=0)


def correction_weight(model: RandomTimeModel, kind: str = "hazard") -> np.ndarray:
    """Weight of ``F(R) - F(Y)`` at the jumps of ``A^o``.

    ``hazard`` gives ``dGamma = dA^o / Gtilde``, which makes the reduced
    equation hold exactly; ``azema`` gives ``dA^o / G``, the weight of the
    recovery correction written against ``G``.
    """
    dA = model.Ao.left_jump
    if kind == "hazard":
        return model.Gamma.left_jump
    if kind == "azema":
        if np.any((model.G.at <= 0) & (dA > 0)):
            raise ModelError("G vanishes where A^o jumps")
        return safe_divide(dA, model.G.at)
    raise ValueError("kind is 'hazard' or 'azema'")


def effective_generator(gen: GeneratorSpec, model: RandomTimeModel, R: LagladPath,
                        kind: str = "hazard") -> GeneratorSpec:
    """``F(y) + (F(R) - F(y)) w`` with ``w`` from :func:`correction_weight`.

    Evaluated against jumps of ``D^r``; where ``A^o`` does not jump the
    generator is unchanged.
    """
    w = correction_weight(model, kind)
    if gen.f_r is None:
        return gen

    def f_r(k, y_minus, y, z):
        base = _components(gen.f_r(k, y_minus, y, z), 1)
        rec = _components(gen.f_r(k, R.at[:, k], R.at[:, k], z), 1)
        return base + (rec - base) * w[:, k]

    return GeneratorSpec(f_r=f_r, f_g=gen.f_g, h=gen.h, lipschitz=gen.lipschitz, bound=gen.bound,
                         h_reads_left_limit=gen.h_reads_left_limit)


def compute_U(Y: LagladPath, gen: GeneratorSpec, R: LagladPath, driver: DriverSpec) -> np.ndarray:
    """``U = R - Y - (F(R) - F(Y)) dD^r`` node-wise (``F`` free of ``u``)."""
    U = R.at - Y.at
    if gen.f_r is None:
        return U
    out = U.copy()
    for k in range(1, Y.grid.size):
        dr = driver.dr_jump[:, :, k]
        out[:, k] -= _eval_jump_rate(gen, k, R.at[:, k], dr) - _eval_jump_rate(gen, k, Y.at[:, k], dr)
    return out


def compute_U_transformed(Ybar: LagladPath, gen: GeneratorSpec, model: RandomTimeModel, R: LagladPath,
                          driver: DriverSpec) -> np.ndarray:
    """``Ubar = R - Ybar/G - Gtilde^{-1} (Fbar(G R) - Fbar(Ybar)) dD^r`` with ``Fbar = Gtilde F(./G)``."""
    G = model.G.at
    Y_at = safe_divide(Ybar.at, G, fill=0.0)
    Y_at = np.where(G > 0, Y_at, R.at)
    out = R.at - Y_at
    if gen.f_r is None:
        return out
    for k in range(1, Ybar.grid.size):
        dr = driver.dr_jump[:, :, k]
        gt = model.Gtilde.at[:, k]
        fbar_R = gt * _eval_jump_rate(gen, k, R.at[:, k], dr)
        fbar_Y = gt * _eval_jump_rate(gen, k, Y_at[:, k], dr)
        out[:, k] -= safe_divide(fbar_R - fbar_Y, gt)
    return out


# ---------------------------------------------------------------------------
# reduced systems


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """An F-level problem ready for the engine plus what is needed to map back.

    ``generator``/``driver``/``terminal``/``barrier`` describe the engine
    problem; ``user_generator``/``user_driver`` the original ones;
    ``route`` is ``transformed`` (``Ybar = G Y``) or ``direct``.
    """

    generator: GeneratorSpec
    driver: DriverSpec
    terminal: np.ndarray
    barrier: LagladPath | None
    route: str
    model: RandomTimeModel
    reward: RewardSpec
    user_generator: GeneratorSpec
    user_driver: DriverSpec
    meta: dict = field(default_factory=dict)

    def adjustment(self, Y: LagladPath) -> np.ndarray:
        """``R - Y - (F(R) - F(Y)) dD^r``, the integrand against ``Gamma``."""
        R = self.reward.recovery(self.model.grid, self.model.n_paths)
        return compute_U(Y, self.user_generator, R, self.user_driver)


def _check_driver(model: RandomTimeModel, driver: DriverSpec, tau: int) -> None:
    if not driver.grid.same_as(model.grid) or driver.n_paths != model.n_paths:
        raise ModelError("driver and model disagree on grid or paths")
    _, _, class_k = detect_eta_and_truncate(model, tau)
    if not class_k:
        raise ModelError("Gtilde vanishes where G first hits zero (not of class K); no reduction exists")


def _gamma_split(model: RandomTimeModel) -> tuple[np.ndarray, np.ndarray]:
    return model.Gamma.continuous_increment, model.Gamma.left_jump


def build_transformed_system(gen: GeneratorSpec, model: RandomTimeModel, reward: RewardSpec,
                             driver: DriverSpec, barrier: LagladPath | None = None) -> ReducedSystem:
    """Change of variables ``Ybar = G Y``, ``Zbar = G_- Z + Ybar_- nu / G_-``.

    The engine problem has terminal ``G_tau X_tau``, barrier ``G X``, the
    continuous components of ``D^r`` plus ``Gamma^c`` as drift components
    and, at jumps of ``D^r`` or ``Gamma``, the jump map

        h(y) = G F(y/G) dD^r - dA^o (R - F(R) dD^r).
    """
    _check_driver(model, driver, reward.tau)
    grid, n = model.grid, model.n_paths
    R = reward.recovery(grid, n)
    X = reward.payoff(grid, n)
    G, nu = model.G, model.nu
    dGc, dGj = _gamma_split(model)
    dA = model.Ao.left_jump
    q = driver.dc.shape[0]
    g_left = G.pre  # G_{k-1} on (t_{k-1}, t_k]

    def f_r(k, y_minus, y, z):
        gl = g_left[:, k]
        comps = []
        if q:
            y_user = safe_divide(y, gl)
            z_user = safe_divide(z - (y_user[:, None] * nu[:, :, k].T), gl[:, None])
            base = np.zeros((q, n)) if gen.f_r is None else _components(gen.f_r(k, y_user, y_user, z_user), q)
            comps.append(G.post[:, k - 1] * base)
        comps.append(-(G.post[:, k - 1] * R.post[:, k - 1])[None])
        return np.concatenate(comps)

    def h(k, y_minus, y):
        g = G.at[:, k]
        dr = driver.dr_jump[:, :, k]
        y_user = safe_divide(y, g)
        return (g * _eval_jump_rate(gen, k, y_user, dr)
                - dA[:, k] * (R.at[:, k] - _eval_jump_rate(gen, k, R.at[:, k], dr)))

    def f_g(k, y, y_plus):
        g = G.at[:, k]
        return g * gen.f_g(k, safe_divide(y, g), safe_divide(y_plus, g))

    dc = np.concatenate([driver.dc, dGc[None]])
    jump_nodes = driver.jump_nodes | (dGj != 0) | (dA != 0)
    eng_driver = DriverSpec(grid, driver.dM, dc, jump_nodes, None, driver.dg_plus, bracket=driver.bracket,
                             point_component=driver.point_component)
    lip = dict(gen.lipschitz)
    eng_gen = GeneratorSpec(f_r=f_r, f_g=None if gen.f_g is None else f_g, h=h, lipschitz=lip, bound=gen.bound)
    terminal = G.at[:, reward.tau] * X.at[:, reward.tau]
    bar_barrier = None if barrier is None else G * barrier
    return ReducedSystem(eng_gen, eng_driver, terminal, bar_barrier, "transformed", model, reward, gen, driver)


def build_direct_system(gen: GeneratorSpec, model: RandomTimeModel, reward: RewardSpec,
                        driver: DriverSpec, barrier: LagladPath | None = None) -> ReducedSystem:
    """The untransformed F-level problem.

    Drift components: the continuous parts of ``D^r`` (rate ``F``),
    ``d<M>`` (rate ``-z nu / G_-``) and ``Gamma^c`` (rate ``-(R - y)``).  At
    jumps: ``h(y) = F(y) dD^r - (R - y - (F(R) - F(y)) dD^r) dGamma``.  The
    bracket against ``M`` is taken predictable, so this route needs
    ``M`` without jumps at the default jump times.
    """
    _check_driver(model, driver, reward.tau)
    grid, n = model.grid, model.n_paths
    R = reward.recovery(grid, n)
    X = reward.payoff(grid, n)
    dGc, dGj = _gamma_split(model)
    d = model.dims
    rates = np.asarray(model.bracket_rates or (1.0,) * d, float)
    dt = grid.increments
    q = driver.dc.shape[0]
    nu_over_g = safe_divide(model.nu, model.G.pre[None])

    def f_r(k, y_minus, y, z):
        comps = []
        if q:
            base = np.zeros((q, n)) if gen.f_r is None else _components(gen.f_r(k, y, y, z), q)
            comps.append(base)
        comps.append(-(z * nu_over_g[:, :, k].T).T)
        comps.append(-(R.post[:, k - 1] - y)[None])
        return np.concatenate(comps)

    def h(k, y_minus, y):
        dr = driver.dr_jump[:, :, k]
        fy = _eval_jump_rate(gen, k, y, dr)
        fr = _eval_jump_rate(gen, k, R.at[:, k], dr)
        return fy - (R.at[:, k] - y - (fr - fy)) * dGj[:, k]

    bracket = np.broadcast_to(rates[:, None, None] * dt, (d, n, grid.size))
    dc = np.concatenate([driver.dc, bracket, dGc[None]])
    jump_nodes = driver.jump_nodes | (dGj != 0)
    eng_driver = DriverSpec(grid, driver.dM, dc, jump_nodes, None, driver.dg_plus, bracket=driver.bracket,
                             point_component=driver.point_component)
    eng_gen = GeneratorSpec(f_r=f_r, f_g=gen.f_g, h=h, lipschitz=dict(gen.lipschitz), bound=gen.bound)
    terminal = X.at[:, reward.tau].copy()
    return ReducedSystem(eng_gen, eng_driver, terminal, barrier, "direct", model, reward, gen, driver)


def invert_transformed(system: ReducedSystem, bar: SolutionBundle) -> SolutionBundle:
    """Map ``(Ybar, Zbar, Lbar)`` back: ``Y = Ybar/G``,
    ``Z_k = (Zbar_k - nu_k Ybar_{k-}/G_{k-1}) / G_{k-1}`` with ``Ybar_{k-}`` the
    one-step conditional mean, ``dL^r = dLbar^r / G_-`` and ``dL^g = dLbar^g / G``."""
    model, reward = system.model, system.reward
    grid, n = model.grid, model.n_paths
    X = reward.payoff(grid, n)
    R = reward.recovery(grid, n)
    G = model.G
    K = reward.tau

    def back(vals, g, fill):
        return np.where(g > 0, safe_divide(vals, g), fill)

    fill_at = np.where(np.arange(grid.size) >= K, X.at[:, K][:, None], R.at)
    at = back(bar.Y.at, G.at, fill_at)
    post = back(bar.Y.post, G.post, fill_at)
    pre = np.concatenate([at[:, :1], post[:, :-1]], axis=1)
    Y = LagladPath(grid, pre, at, post)
    gl = G.pre
    ybar_minus = bar.y_before_jump
    Z = safe_divide(bar.Z - (model.nu * safe_divide(ybar_minus, gl)[None]).transpose(1, 2, 0),
                    gl[:, :, None])
    L = None
    if bar.L is not None:
        L = ReflectionBundle(safe_divide(bar.L.l_r_increments, gl), safe_divide(bar.L.l_g_increments, G.at),
                             system.meta.get("barrier"))
    U = compute_U(Y, system.user_generator, R, system.user_driver)
    return SolutionBundle(Y=Y, Z=Z, U=U, L=L, y_before_jump=back(ybar_minus, gl, 0.0),
                          diagnostics={**bar.diagnostics, "route": "transformed", "Ybar": bar.Y})


def solve_reduced_F_bsde(system: ReducedSystem, ce, **opts) -> SolutionBundle:
    """Solve the reduced problem with the jump-adapted engine and return ``(Y, Z, U[, L])``."""
    K = system.reward.tau
    if system.barrier is None:
        raw = step1_laglad_solve(system.generator, system.driver, system.terminal, ce, tau=K, **opts)
    else:
        raw = rstep1_laglad_solve(system.generator, system.driver, system.barrier, system.terminal, ce,
                                  tau=K, **opts)
    if system.route == "transformed":
        return invert_transformed(system, raw)
    R = system.reward.recovery(system.model.grid, system.model.n_paths)
    U = compute_U(raw.Y, system.user_generator, R, system.user_driver)
    return SolutionBundle(Y=raw.Y, Z=raw.Z, U=U, L=raw.L, y_before_jump=raw.y_before_jump,
                          diagnostics={**raw.diagnostics, "route": "direct"})


def reduce_and_solve(gen: GeneratorSpec, model: RandomTimeModel, reward: RewardSpec, driver: DriverSpec,
                     ce=None, barrier: LagladPath | None = None, route: str = "transformed",
                     **opts) -> SolutionBundle:
    build = {"transformed": build_transformed_system, "direct": build_direct_system}[route]
    system = build(gen, model, reward, driver, barrier)
    if barrier is not None:
        system.meta["barrier"] = barrier
    return solve_reduced_F_bsde(system, ce or model.ce(), **opts)


# ---------------------------------------------------------------------------
# lift and reduction of solutions


def lift_solution(F_sol: SolutionBundle, model: RandomTimeModel, theta, reward: RewardSpec) -> SolutionBundle:
    """G-level solution from an F-level one.

    Before ``theta`` the lift equals ``Y``; at ``theta <= tau`` it jumps to
    ``R_theta`` and stays there.  ``Z`` and the reflection are stopped at
    ``theta``; ``U`` is kept up to ``theta``.
    """
    grid = model.grid
    theta = _check_theta(theta, grid)
    n = theta.size
    if F_sol.Y.shape[0] != n:
        raise ModelError("one default node per path is required")
    R = reward.recovery(grid, n)
    tau = reward.tau
    k = np.arange(grid.size)[None, :]
    th = theta[:, None]
    defaults = th <= tau
    r_theta = R.at[np.arange(n), np.minimum(theta, grid.steps)][:, None]
    Y = F_sol.Y
    before = k < th
    at = np.where(before | ~defaults, Y.at, r_theta)
    post = np.where(before | ~defaults, Y.post, r_theta)
    pre = np.where((k <= th) | ~defaults, Y.pre, r_theta)
    live = k <= np.minimum(th, tau)
    Z = np.where(live[:, :, None], F_sol.Z, 0.0)
    U = None if F_sol.U is None else np.where(live, F_sol.U, 0.0)
    L = None
    if F_sol.L is not None:
        X = reward.payoff(grid, n)
        barrier = LagladPath(grid, np.where((k <= th) | ~defaults, X.pre, r_theta),
                             np.where(before | ~defaults, X.at, r_theta),
                             np.where(before | ~defaults, X.post, r_theta))
        L = ReflectionBundle(np.where(live, F_sol.L.l_r_increments, 0.0),
                             np.where(live & (k < th), F_sol.L.l_g_increments, 0.0), barrier)
    return SolutionBundle(Y=LagladPath(grid, pre, at, post), Z=Z, U=U, L=L,
                          diagnostics={"theta": theta, "tau": tau})


def reduce_solution(G_sol: SolutionBundle, space, reward: RewardSpec) -> SolutionBundle:
    """F-level triple from a G-level solution on an enlarged finite space.

    ``Y_k(omega)`` is read from a joint scenario that is still alive at ``k``;
    ``Z`` likewise from alive scenarios (it is predictable), ``U`` is taken as is.
    """
    omega, theta = space.omega, space.theta
    n_f = int(omega.max()) + 1
    size = G_sol.Y.at.shape[1]
    at = np.zeros((n_f, size))
    post = np.zeros((n_f, size))
    Z = np.zeros((n_f, size, G_sol.Z.shape[2]))
    U = np.zeros((n_f, size))
    for i in range(n_f):
        rows = np.flatnonzero(omega == i)
        for k in range(size):
            alive = rows[theta[rows] > k]
            src = alive[0] if alive.size else None
            if src is not None:
                at[i, k] = G_sol.Y.at[src, k]
                post[i, k] = G_sol.Y.post[src, k]
            else:
                at[i, k] = post[i, k] = np.nan
            alive_z = rows[theta[rows] >= k]
            if alive_z.size and k:
                Z[i, k] = G_sol.Z[alive_z[0], k]
            if G_sol.U is not None and alive_z.size:
                U[i, k] = G_sol.U[alive_z[0], k]
    grid = G_sol.Y.grid
    pre = np.concatenate([at[:, :1], post[:, :-1]], axis=1)
    return SolutionBundle(Y=LagladPath(grid, pre, at, post), Z=Z, U=U)
