"""Backward solvers for BSDEs with a laglad driver.

Sign convention (used everywhere in the package): a solution satisfies

    y_t = xi - int_(t,T] f dD^c - sum_{t<S<=T} h(S, y_{S-}, y_S)
             - int_[t,T) f^g dD^g_+ - int_(t,T] z dM  (+ l_T - l_t when reflected)

so ``f`` is the forward rate of change of ``y`` against the continuous
driver, ``h`` the forward left jump at a driver jump time and ``f^g`` the
forward right jump per unit of ``D^g_+``.

Discretisation.  Node ``k`` closes the interval ``(t_{k-1}, t_k]``.  One
backward step at ``k``:

1. at a listed left-jump node the jump is removed,
   ``xi_k = y_k - h(k, c_k, y_k)`` with ``c_k = E[xi_k | F_{k-1}]``
   (a fixed point when ``h`` reads the left limit);
2. ``z_k = E[xi_k dM_k | F_{k-1}] / E[dM_k^2 | F_{k-1}]`` per component;
3. implicit Euler for the continuous driver:
   ``y_{(k-1)+} = c_k - f(k, c_k, y_{(k-1)+}, z_k) dD^c_k``;
4. the right jump at ``k-1``: ``y_{k-1} = y_{(k-1)+} - f^g(k-1, y_{k-1}, y_{(k-1)+}) dD^g_+``.

The jump-adapted method splits the horizon at the jump times and solves a
continuous-driver problem on each piece.  Pieces are processed node by node
for all paths at once, so the regression at each node sees every path and
the piece a path is in is known from its past.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import brentq

from .laglad import LagladPath, TimeGrid, safe_divide


class ContractionError(RuntimeError):
    """An implicit equation failed the contraction check or did not converge."""


class DriverError(ValueError):
    """Inconsistent driver description."""


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Generator callables, all vectorised over paths.

    f_r(k, y_minus, y, z) -> array (q, n) or (n,): rate against the
        continuous driver components on ``(t_{k-1}, t_k]``;
    f_g(k, y, y_plus) -> (n,): rate against the right jump of ``D^g`` at ``k``;
    h(k, y_minus, y) -> (n,): left jump at a listed driver jump node ``k``.

    ``lipschitz`` may hold the keys ``y``, ``z``, ``h_y_minus`` and ``g_y``;
    declared constants drive the contraction prechecks.  ``h_reads_left_limit``
    must be set when ``h`` depends on ``y_minus``; this is only allowed at
    predictable jump times.
    """

    f_r: Callable | None = None
    f_g: Callable | None = None
    h: Callable | None = None
    lipschitz: Mapping[str, float] = field(default_factory=dict)
    bound: float | None = None
    h_reads_left_limit: bool = False

    def __post_init__(self):
        for key, val in self.lipschitz.items():
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"Lipschitz constant {key!r} must be finite and non-negative")


@dataclass(frozen=True, eq=False)
class DriverSpec:
    """Increments of the driver and of the driving martingales.

    dM:        (d, n, K+1) martingale increments on ``(t_{k-1}, t_k]``;
    dc:        (q, n, K+1) increments of the continuous driver components;
    jump_nodes:(n, K+1) bool, nodes where ``D^r`` jumps (``h`` acts there);
    dr_jump:   (q, n, K+1) jump sizes of ``D^r`` at those nodes (used by the
               reduction and by residual checks);
    dg_plus:   (n, K+1) right-jump sizes of ``D^g`` (the jump of ``D^g_+``);
    predictable_jumps: the listed left-jump times are predictable;
    bracket:   optional (d, n, K+1) conditional variances ``E[dM^2 | F_{k-1}]``
               when they are known (e.g. ``dt`` for a Brownian component);
               otherwise they are estimated with the conditional expectation;
    point_component: index of a component that is a compensated counting
               process ``N - int intensity dt`` (``bracket`` then holds the
               compensator increments).  Its ``z`` and the conditional mean
               are estimated by regressing separately on paths with and
               without a count in the step, which removes the Bernoulli noise
               of the plain product regression.
    """

    grid: TimeGrid
    dM: np.ndarray
    dc: np.ndarray | None = None
    jump_nodes: np.ndarray | None = None
    dr_jump: np.ndarray | None = None
    dg_plus: np.ndarray | None = None
    predictable_jumps: bool = False
    bracket: np.ndarray | None = None
    point_component: int | None = None

    def __post_init__(self):
        dM = np.asarray(self.dM, float)
        if dM.ndim == 2:
            dM = dM[None]
        d, n, size = dM.shape
        if size != self.grid.size:
            raise DriverError("driver arrays must run over the grid nodes")
        dc = np.zeros((0, n, size)) if self.dc is None else np.asarray(self.dc, float)
        if dc.ndim == 2:
            dc = dc[None]
        dc = np.broadcast_to(dc, (dc.shape[0], n, size))
        jn = np.zeros((n, size), bool) if self.jump_nodes is None else np.broadcast_to(
            np.asarray(self.jump_nodes, bool), (n, size))
        if jn[:, 0].any():
            raise DriverError("left jumps at node 0 are not allowed")
        dr = np.broadcast_to(0.0, (max(dc.shape[0], 1), n, size)) if self.dr_jump is None else np.asarray(self.dr_jump, float)
        if dr.ndim == 2:
            dr = dr[None]
        dr = np.broadcast_to(dr, (dr.shape[0], n, size))
        if np.any((np.abs(dr).sum(axis=0) > 0) & ~jn):
            raise DriverError("D^r jumps outside the listed jump nodes")
        dg = np.broadcast_to(0.0, (n, size)) if self.dg_plus is None else np.broadcast_to(
            np.asarray(self.dg_plus, float), (n, size))
        for name, val in (("dM", dM), ("dc", dc), ("jump_nodes", jn), ("dr_jump", dr), ("dg_plus", dg)):
            object.__setattr__(self, name, np.asarray(val))
        if self.bracket is not None:
            object.__setattr__(self, "bracket", np.broadcast_to(np.asarray(self.bracket, float), (d, n, size)))
        if self.point_component is not None and (self.bracket is None or not 0 <= self.point_component < d):
            raise DriverError("point_component needs a bracket and a valid component index")

    @property
    def n_paths(self) -> int:
        return self.dM.shape[1]

    @property
    def dims(self) -> int:
        return self.dM.shape[0]

    def jump_times(self) -> list[np.ndarray]:
        """Per path, the sorted left-jump node indices ``S_1 < ... < S_p``."""
        return [np.flatnonzero(row) for row in self.jump_nodes]

    def right_jump_times(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in (self.dg_plus != 0)]

    @property
    def D_r(self) -> LagladPath:
        cont = np.cumsum(self.dc, axis=-1)
        if cont.shape[0] != self.dr_jump.shape[0]:
            cont = np.zeros(self.dr_jump.shape) + cont.sum(axis=0)
        return LagladPath.from_parts(self.grid, continuous=cont, left_jumps=self.dr_jump)

    @property
    def D_g(self) -> LagladPath:
        return LagladPath.from_parts(self.grid, right_jumps=self.dg_plus)

    def take(self, index) -> "DriverSpec":
        index = np.asarray(index)
        return DriverSpec(self.grid, self.dM[:, index], self.dc[:, index], self.jump_nodes[index],
                          self.dr_jump[:, index], self.dg_plus[index], self.predictable_jumps,
                          None if self.bracket is None else self.bracket[:, index], self.point_component)


@dataclass(frozen=True, eq=False)
class SolutionBundle:
    """Solution on the grid.

    Y: laglad path per scenario; Z: (n, K+1, d), ``Z[:, k]`` acts on
    ``(t_{k-1}, t_k]``; U: optional (n, K+1) integrand against the default
    martingale; L: optional reflection bundle; y_before_jump: ``E[xi_k|F_{k-1}]``,
    the discrete left limit used by the jump links.
    """

    Y: LagladPath
    Z: np.ndarray
    U: np.ndarray | None = None
    L: object | None = None
    y_before_jump: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y.at[:, 0]))

    def take(self, index) -> "SolutionBundle":
        """Re-index the paths (e.g. onto an enlarged scenario space)."""
        index = np.asarray(index)
        pick = lambda a: None if a is None else np.asarray(a)[index]
        return SolutionBundle(self.Y[index], self.Z[index], pick(self.U),
                              None if self.L is None else self.L.take(index), pick(self.y_before_jump),
                              dict(self.diagnostics))


# ---------------------------------------------------------------------------
# scalar helpers


def _fixed_point(update: Callable[[np.ndarray], np.ndarray], start: np.ndarray, tol: float,
                 max_iter: int, where: str) -> np.ndarray:
    y = start
    for _ in range(max_iter):
        nxt = update(y)
        if not np.all(np.isfinite(nxt)):
            raise ContractionError(f"fixed point diverged at {where}")
        if np.max(np.abs(nxt - y), initial=0.0) <= tol * (1.0 + np.max(np.abs(nxt), initial=0.0)):
            return nxt
        y = nxt
    raise ContractionError(f"fixed point did not converge at {where}")


def _drift(gen: GeneratorSpec, k: int, y_minus, y, z, dc_k) -> np.ndarray:
    if gen.f_r is None or dc_k.shape[0] == 0:
        return np.zeros_like(y)
    val = np.asarray(gen.f_r(k, y_minus, y, z), float)
    if val.ndim == 1:
        val = val[None]
    if val.shape[0] != dc_k.shape[0]:
        raise DriverError("f_r returns a different number of components than dc")
    return (val * dc_k).sum(axis=0)


def _stratified(ce, k: int, xi: np.ndarray, c: np.ndarray, driver: DriverSpec):
    """Conditional mean and counting-process ``z`` from the two strata
    "count in the step" / "no count".  Falls back to ``c`` (and NaN for ``z``)
    where a stratum is empty."""
    j = driver.point_component
    comp = driver.bracket[j, :, k]
    hit = driver.dM[j, :, k] + comp > 0.5
    with_count = ce(k - 1, xi, fit_mask=hit)
    without = ce(k - 1, xi, fit_mask=~hit)
    ok = np.isfinite(with_count) & np.isfinite(without)
    q = -np.expm1(-comp)
    mixed = np.where(ok, q * with_count + (1.0 - q) * np.where(ok, without, 0.0), c)
    z = np.where(ok, (1.0 - q) * (with_count - without), np.nan)
    return mixed, z


@dataclass
class _Sweep:
    at: np.ndarray
    post: np.ndarray
    Z: np.ndarray
    cond_mean: np.ndarray
    xi: np.ndarray
    l_r: np.ndarray
    l_g: np.ndarray
    link_residual: float
    right_link_residual: float


def backward_sweep(gen: GeneratorSpec, driver: DriverSpec, terminal, ce, barrier: LagladPath | None = None,
                   tau: int | None = None, tol: float = 1e-13, max_iter: int = 200) -> _Sweep:
    """Node-synchronous backward recursion shared by all solvers."""
    grid = driver.grid
    K = grid.steps if tau is None else int(tau)
    n, d = driver.n_paths, driver.dims
    size = grid.size
    at = np.zeros((n, size))
    post = np.zeros((n, size))
    Z = np.zeros((n, size, d))
    cm = np.zeros((n, size))
    xi_store = np.zeros((n, size))
    l_r = np.zeros((n, size))
    l_g = np.zeros((n, size))
    term = np.broadcast_to(np.asarray(terminal, float), (n,)).copy()
    if barrier is not None and np.any(term < barrier.at[:, K] - 1e-12):
        raise ValueError("terminal value lies below the barrier")
    at[:, K] = post[:, K] = term
    at[:, K + 1:] = post[:, K + 1:] = term[:, None]
    use_h = gen.h is not None
    if use_h and gen.h_reads_left_limit and not driver.predictable_jumps:
        raise DriverError("h reads the left limit but the jump times are not flagged predictable")
    lip = gen.lipschitz
    if use_h and gen.h_reads_left_limit and lip.get("h_y_minus", 0.0) >= 1.0:
        raise ContractionError("jump link is not a contraction in the left limit")
    link_res = 0.0
    right_res = 0.0
    for k in range(K, 0, -1):
        y_k = at[:, k]
        jump = driver.jump_nodes[:, k] if use_h else np.zeros(n, bool)
        floor = None if barrier is None else barrier.pre[:, k]

        def remove_jump(c):
            left = c if floor is None else np.maximum(floor, c)
            return np.where(jump, y_k - gen.h(k, left, y_k), y_k)

        if jump.any():
            if gen.h_reads_left_limit:
                c = _fixed_point(lambda c: ce(k - 1, remove_jump(c)), ce(k - 1, y_k), tol, max_iter,
                                 f"jump link, node {k}")
                xi = remove_jump(c)
                link_res = max(link_res, float(np.max(np.abs(ce(k - 1, xi) - c))))
            else:
                xi = remove_jump(y_k)
        else:
            xi = y_k
        c = ce(k - 1, xi)
        z_point = None
        if driver.point_component is not None:
            c, z_point = _stratified(ce, k, xi, c, driver)
        # centring xi removes most of the in-sample bias of a regression estimate
        dev = (xi - c)[:, None] * driver.dM[:, :, k].T
        if d and driver.bracket is not None:
            z = safe_divide(ce(k - 1, dev), driver.bracket[:, :, k].T)
        elif d:
            cols = np.column_stack([dev, driver.dM[:, :, k].T ** 2])
            proj = ce(k - 1, cols)
            z = safe_divide(proj[:, :d], proj[:, d:])
        else:
            z = np.zeros((n, 0))
        if z_point is not None:
            j = driver.point_component
            z[:, j] = np.where(np.isfinite(z_point), z_point, z[:, j])
        dc_k = driver.dc[:, :, k]
        if gen.f_r is not None and dc_k.size and np.any(dc_k != 0):
            step = dc_k.sum(axis=0).max()
            if "y" in lip and lip["y"] * step >= 1.0:
                raise ContractionError(f"implicit step not contractive at node {k}")
            y_hat = _fixed_point(lambda y: c - _drift(gen, k, c, y, z, dc_k), c, tol, max_iter,
                                 f"implicit step, node {k}")
        else:
            y_hat = c
        if floor is not None:
            y_new = np.maximum(floor, y_hat)
            l_r[:, k] = y_new - y_hat
        else:
            y_new = y_hat
        post[:, k - 1] = y_new
        cm[:, k] = c
        Z[:, k] = z
        xi_store[:, k] = xi
        # right jump at k-1
        dg = driver.dg_plus[:, k - 1]
        cap = None if barrier is None else barrier.at[:, k - 1]
        if gen.f_g is not None and np.any(dg != 0):
            if "g_y" in lip and lip["g_y"] * np.abs(dg).max() >= 1.0:
                raise ContractionError(f"right-jump link not contractive at node {k - 1}")

            def right(v):
                raw = y_new - gen.f_g(k - 1, v, y_new) * dg
                return raw if cap is None else np.maximum(cap, raw)

            v = _fixed_point(right, y_new, tol, max_iter, f"right-jump link, node {k - 1}")
            raw = y_new - gen.f_g(k - 1, v, y_new) * dg
            right_res = max(right_res, float(np.max(np.abs(right(v) - v))))
            if cap is not None:
                l_g[:, k - 1] = np.maximum(cap - raw, 0.0)
        else:
            v = y_new if cap is None else np.maximum(cap, y_new)
            if cap is not None:
                l_g[:, k - 1] = v - y_new
        at[:, k - 1] = v
    return _Sweep(at, post, Z, cm, xi_store, l_r, l_g, link_res, right_res)


def _bundle(sweep: _Sweep, grid: TimeGrid, **diag) -> SolutionBundle:
    pre = np.concatenate([sweep.at[:, :1], sweep.post[:, :-1]], axis=1)
    Y = LagladPath(grid, pre, sweep.at, sweep.post)
    diag.setdefault("link_residual", sweep.link_residual)
    diag.setdefault("right_link_residual", sweep.right_link_residual)
    return SolutionBundle(Y=Y, Z=sweep.Z, y_before_jump=sweep.cond_mean,
                          diagnostics={**diag, "xi": sweep.xi})


def solve_continuous_driver(gen: GeneratorSpec, driver: DriverSpec, terminal, ce,
                            tau: int | None = None, **opts) -> SolutionBundle:
    """Implicit backward Euler for a driver without jumps."""
    if driver.jump_nodes.any() or np.any(driver.dg_plus[:, : (tau or driver.grid.steps)] != 0):
        raise DriverError("continuous-driver solver called with a jumping driver")
    plain = GeneratorSpec(f_r=gen.f_r, lipschitz=gen.lipschitz, bound=gen.bound)
    return _bundle(backward_sweep(plain, driver, terminal, ce, tau=tau, **opts), driver.grid)


def step2_cadlag_solve(gen: GeneratorSpec, driver: DriverSpec, terminal, ce,
                       tau: int | None = None, **opts) -> SolutionBundle:
    """Cadlag driver with left jumps at the listed nodes, resolved by the jump map ``h``.

    On each piece between consecutive jump times the continuous-driver step
    is used; across a jump the pre-jump terminal solves
    ``xi = y_S - h(S, E[xi | F_{S-}], y_S)``.  With ``h`` absent this is the
    continuous solver.
    """
    K = tau or driver.grid.steps
    if np.any(driver.dg_plus[:, :K] != 0):
        raise DriverError("step 2 handles cadlag drivers only; use step1_laglad_solve")
    if gen.h is None:
        return solve_continuous_driver(gen, driver, terminal, ce, tau=tau, **opts)
    return _bundle(backward_sweep(GeneratorSpec(gen.f_r, None, gen.h, gen.lipschitz, gen.bound,
                                                gen.h_reads_left_limit),
                                  driver, terminal, ce, tau=tau, **opts), driver.grid)


def step1_laglad_solve(gen: GeneratorSpec, driver: DriverSpec, terminal, ce,
                       tau: int | None = None, **opts) -> SolutionBundle:
    """Laglad driver: pieces between right-jump times are cadlag problems,
    linked by ``y_{S+} - y_S = f^g(y_S, y_{S+}) dD^g_+``."""
    K = tau or driver.grid.steps
    if not np.any(driver.dg_plus[:, :K] != 0):
        return step2_cadlag_solve(gen, driver, terminal, ce, tau=tau, **opts)
    if gen.f_g is None:
        # right jumps of D^g carry no rate: the problem is cadlag
        return step2_cadlag_solve(gen, replace(driver, dg_plus=None), terminal, ce, tau=tau, **opts)
    return _bundle(backward_sweep(gen, driver, terminal, ce, tau=tau, **opts), driver.grid)


# ---------------------------------------------------------------------------
# exact oracle on finite trees


def _bracket_root(fn: Callable[[float], float], x0: float, where: str) -> float:
    f0 = fn(x0)
    if f0 == 0.0:
        return x0
    step = max(1.0, abs(x0))
    for _ in range(200):
        lo, hi = x0 - step, x0 + step
        flo, fhi = fn(lo), fn(hi)
        if np.sign(flo) != np.sign(f0):
            return brentq(fn, lo, x0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        if np.sign(fhi) != np.sign(f0):
            return brentq(fn, x0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        step *= 2.0
    raise ContractionError(f"no root bracketed at {where}")


def solve_tree_exact(finite, gen: GeneratorSpec, driver: DriverSpec, terminal,
                     barrier: LagladPath | None = None, tau: int | None = None) -> SolutionBundle:
    """Brute-force recursion over the cells of a finite tree.

    Conditional expectations are explicit weighted sums over the scenarios of
    a cell; every implicit scalar equation is solved by bracketing and
    ``brentq``.  Shares no code with the path solvers.
    """
    grid = driver.grid
    K = grid.steps if tau is None else int(tau)
    probs = np.asarray(finite.probabilities, float)
    labels = np.asarray(finite.labels)
    n = probs.size
    d = driver.dims
    at = np.zeros((n, grid.size))
    post = np.zeros((n, grid.size))
    Z = np.zeros((n, grid.size, d))
    cm = np.zeros((n, grid.size))
    l_r = np.zeros((n, grid.size))
    l_g = np.zeros((n, grid.size))
    term = np.broadcast_to(np.asarray(terminal, float), (n,))
    at[:, K] = post[:, K] = term

    def call_scalar(fn, i, *args):
        full = [np.full(n, a) if np.ndim(a) == 0 else a for a in args]
        return np.asarray(fn(*full), float)[..., i]

    for k in range(K, 0, -1):
        for cell in np.unique(labels[k - 1]):
            idx = [int(i) for i in np.flatnonzero(labels[k - 1] == cell)]
            w = probs[idx] / probs[idx].sum()
            i0 = idx[0]
            y_child = {i: at[i, k] for i in idx}
            floor = None if barrier is None else float(barrier.pre[i0, k])

            def xi_of(c):
                left = c if floor is None else max(floor, c)
                out = []
                for i in idx:
                    if gen.h is not None and driver.jump_nodes[i, k]:
                        out.append(y_child[i] - float(call_scalar(lambda a, b, kk=k: gen.h(kk, a, b), i,
                                                                  left, at[:, k])))
                    else:
                        out.append(y_child[i])
                return np.array(out)

            if gen.h is not None and gen.h_reads_left_limit:
                c = _bracket_root(lambda c: c - float(w @ xi_of(c)), float(w @ xi_of(0.0)), f"node {k}")
            else:
                c = float(w @ xi_of(0.0))
            xi = xi_of(c)
            z = np.zeros(d)
            for j in range(d):
                dm = driver.dM[j, idx, k]
                den = float(w @ dm ** 2)
                z[j] = float(w @ (xi * dm)) / den if den > 0 else 0.0
            dc = driver.dc[:, i0, k]
            if gen.f_r is not None and dc.size and np.any(dc != 0):
                zfull = np.tile(z, (n, 1))

                def eq(y):
                    val = np.asarray(gen.f_r(k, np.full(n, c), np.full(n, y), zfull), float)
                    val = val[None] if val.ndim == 1 else val
                    return y + float(val[:, i0] @ dc) - c

                y_hat = _bracket_root(eq, c, f"implicit step at node {k}")
            else:
                y_hat = c
            y_new = y_hat if floor is None else max(floor, y_hat)
            dg = driver.dg_plus[i0, k - 1]
            cap = None if barrier is None else float(barrier.at[i0, k - 1])
            if gen.f_g is not None and dg != 0:
                def target(v):
                    return y_new - float(call_scalar(lambda a, b, kk=k - 1: gen.f_g(kk, a, b), i0, v, y_new)) * dg

                v = _bracket_root(lambda v: v - (target(v) if cap is None else max(cap, target(v))), y_new,
                                  f"right jump at node {k - 1}")
                raw = target(v)
            else:
                raw = y_new
                v = y_new if cap is None else max(cap, y_new)
            for i in idx:
                post[i, k - 1] = y_new
                at[i, k - 1] = v
                Z[i, k] = z
                cm[i, k] = c
                l_r[i, k] = y_new - y_hat
                l_g[i, k - 1] = v - raw
    sweep = _Sweep(at, post, Z, cm, np.zeros_like(at), l_r, l_g, 0.0, 0.0)
    bundle = _bundle(sweep, grid, oracle="tree")
    bundle.diagnostics["l_r"] = l_r
    bundle.diagnostics["l_g"] = l_g
    return bundle


def solve_linear_closed_form(a: float, b_const: float, cond_terminal, grid: TimeGrid) -> np.ndarray:
    """Closed form of the classical linear BSDE
    ``y_t = xi + int_t^T (a y_s + b) ds - int_t^T z dW``.

    In this package's sign convention that is the generator
    ``f(y) = -(a y + b)``.  ``cond_terminal`` holds ``E[xi | F_t]`` on the
    grid (shape ``(..., K+1)``, or a scalar for deterministic ``xi``).
    """
    rem = grid.horizon - grid.nodes
    growth = np.exp(a * rem)
    shift = b_const * rem if a == 0 else (b_const / a) * (growth - 1.0)
    return growth * np.asarray(cond_terminal, float) + shift
