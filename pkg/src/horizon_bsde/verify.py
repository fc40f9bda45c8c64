"""Residual checks, martingale tests and identity suites.

Every check returns a :class:`ResidualReport`.  Residuals compare both sides
of a defining equation node by node with the integral conventions of
:mod:`horizon_bsde.laglad`: regular increments on ``(t_{k-1}, t_k]`` and
right jumps on ``[t_k, t_{k+1})``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bsde import DriverSpec, GeneratorSpec, SolutionBundle, _bracket_root
from .conditional import PartitionCE, polynomial_features
from .laglad import LagladPath, decompose_laglad, dot_path, quadratic_covariation, safe_divide, star_path
from .random_time import (FiniteFiltration, ModelError, RandomTimeModel, _check_theta,
                          build_default_martingales, build_finite_model, deflate_martingale,
                          enlarge_model)
from .rbsde import ReflectionBundle, skorokhod_audit
from .reduction import RewardSpec, compute_U, reward_at_horizon


@dataclass
class ResidualReport:
    """Outcome of one check.

    ``per_path`` is the largest absolute residual along each path, ``mean``
    and ``se`` the weighted ensemble mean and its standard error per node,
    ``value`` the statistic compared with ``tolerance``.
    """

    name: str
    value: float
    tolerance: float
    passed: bool
    per_path: np.ndarray | None = None
    mean: np.ndarray | None = None
    se: np.ndarray | None = None
    worst_node: int | None = None
    slope: float | None = None
    details: dict = field(default_factory=dict)

    def __str__(self) -> str:
        where = "" if self.worst_node is None or self.passed else f" (node {self.worst_node})"
        slope = "" if self.slope is None else f" slope={self.slope:.3f}"
        return (f"{self.name}: {'PASS' if self.passed else 'FAIL'} value={self.value:.3e} "
                f"tol={self.tolerance:.1e}{slope}{where}")

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer, np.bool_)):
                return v.item()
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return {"schema": "residual-report/1", "name": self.name, "value": clean(self.value),
                "tolerance": clean(self.tolerance), "passed": bool(self.passed),
                "worst_node": clean(self.worst_node), "slope": clean(self.slope), "mean": clean(self.mean),
                "se": clean(self.se), "details": clean(self.details)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _weights(n: int, weights) -> np.ndarray:
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float)
    return w / w.sum()


def _summarise(name: str, resid: np.ndarray, valid: np.ndarray, weights, tolerance: float,
               statistic: str = "max", **details) -> ResidualReport:
    """``statistic`` is ``max`` (largest absolute residual on any path) or
    ``mean`` (largest absolute ensemble-mean residual over nodes)."""
    r = np.where(valid, resid, 0.0)
    w = _weights(r.shape[0], weights)
    per_path = np.abs(r).max(axis=1)
    mass = w @ valid
    mean = safe_divide(w @ r, mass)
    var = safe_divide(w @ (r - mean) ** 2, mass)
    eff_n = safe_divide(mass ** 2, w ** 2 @ valid)
    se = np.sqrt(safe_divide(var, eff_n))
    if statistic == "max":
        by_node = np.abs(r).max(axis=0)
    elif statistic == "mean":
        by_node = np.abs(mean)
    else:
        raise ValueError("statistic is 'max' or 'mean'")
    value = float(by_node.max(initial=0.0))
    return ResidualReport(name, value, tolerance, bool(value <= tolerance), per_path, mean, se,
                          int(np.argmax(by_node)), details=details)


# ---------------------------------------------------------------------------
# defining-equation residuals


def _regular_rates(gen: GeneratorSpec, driver: DriverSpec, Y: LagladPath, Z: np.ndarray) -> np.ndarray:
    """Per-node ``F^r dD^r``: Euler at the left point for the continuous part,
    at-value evaluation against jumps."""
    n, size = Y.at.shape
    out = np.zeros((n, size))
    if gen.f_r is None:
        return out
    zero_z = np.zeros((n, 0))
    for k in range(1, size):
        dc = driver.dc[:, :, k]
        if dc.size and np.any(dc != 0):
            y = Y.post[:, k - 1]
            val = np.asarray(gen.f_r(k, y, y, Z[:, k]), float)
            out[:, k] += ((val[None] if val.ndim == 1 else val) * dc).sum(axis=0)
        dr = driver.dr_jump[:, :, k]
        if np.any(dr != 0):
            y = Y.at[:, k]
            val = np.asarray(gen.f_r(k, y, y, zero_z), float)
            out[:, k] += ((val[None] if val.ndim == 1 else val) * dr).sum(axis=0)
    return out


def _right_rates(gen: GeneratorSpec, driver: DriverSpec, Y: LagladPath) -> np.ndarray:
    n, size = Y.at.shape
    out = np.zeros((n, size))
    if gen.f_g is None:
        return out
    for k in range(size):
        dg = driver.dg_plus[:, k]
        if np.any(dg != 0):
            out[:, k] = gen.f_g(k, Y.at[:, k], Y.post[:, k]) * dg
    return out


def _backward_residual(Y: LagladPath, terminal: np.ndarray, stop: np.ndarray, reg: np.ndarray,
                       right: np.ndarray):
    """Residual of ``Y_t = xi - sum_(t, stop] reg - sum_[t, stop) right`` at
    the values and right limits; ``reg``/``right`` already masked to the window."""
    suffix_reg = np.cumsum(reg[:, ::-1], axis=1)[:, ::-1]
    tail_reg = np.concatenate([suffix_reg[:, 1:], np.zeros((reg.shape[0], 1))], axis=1)
    tail_right = np.cumsum(right[:, ::-1], axis=1)[:, ::-1]
    rhs_at = terminal[:, None] - tail_reg - tail_right
    rhs_post = rhs_at + right
    k = np.arange(Y.at.shape[1])[None, :]
    res_at = np.where(k <= stop[:, None], Y.at - rhs_at, 0.0)
    res_post = np.where(k < stop[:, None], Y.post - rhs_post, 0.0)
    return res_at, res_post


def residual_g_bsde(bundle: SolutionBundle, gen: GeneratorSpec, driver: DriverSpec, model: RandomTimeModel,
                    theta, reward: RewardSpec, tolerance: float = 1e-10, statistic: str = "max",
                    variant: str | None = None, name: str = "G-BSDE residual") -> ResidualReport:
    """Both sides of the G-equation on ``[0, tau ^ theta]`` per path.

    ``Z`` integrates the deflated martingale ``M - Gtilde^{-1}.[M, m]``
    (``variant="predictable"`` uses ``G_-^{-1} nu d<M>``; the default picks
    ``optional`` on finite trees and ``predictable`` otherwise) and ``U`` the
    default martingale ``N^{o,G}``.  A reflection bundle, when present, enters
    with ``+ L``.
    """
    if theta is None:
        raise ModelError("residual of the G-equation needs theta")
    grid = model.grid
    theta = _check_theta(theta, grid)
    tau = reward.tau
    stop = np.minimum(theta, tau)
    k = np.arange(grid.size)[None, :]
    in_reg = (k >= 1) & (k <= stop[:, None])
    in_right = k < stop[:, None]
    variant = variant or ("optional" if model.finite is not None else "predictable")
    Mt = deflate_martingale(model.M, model, stop=stop, variant=variant)
    dMt = Mt.regular_increment
    No, _ = build_default_martingales(model, theta)
    dN = No.regular_increment
    Y = bundle.Y
    reg = _regular_rates(gen, driver, Y, bundle.Z)
    reg = reg + np.einsum("nkd,dnk->nk", bundle.Z, dMt)
    if bundle.U is not None:
        reg = reg + bundle.U * dN
    right = _right_rates(gen, driver, Y)
    if bundle.L is not None:
        reg = reg - bundle.L.l_r_increments
        right = right - bundle.L.l_g_increments
    terminal = reward_at_horizon(reward, theta)
    res_at, res_post = _backward_residual(Y, terminal, stop, np.where(in_reg, reg, 0.0),
                                          np.where(in_right, right, 0.0))
    resid = np.where(np.abs(res_at) >= np.abs(res_post), res_at, res_post)
    valid = k <= stop[:, None]
    return _summarise(name, resid, valid, model.weights, tolerance, statistic)


def residual_g_rbsde(bundle: SolutionBundle, gen: GeneratorSpec, driver: DriverSpec, model: RandomTimeModel,
                     theta, reward: RewardSpec, tolerance: float = 1e-10, statistic: str = "max",
                     variant: str | None = None) -> ResidualReport:
    """G-equation residual plus dominance over ``Xhat`` and the Skorokhod sums of ``L^theta``."""
    rep = residual_g_bsde(bundle, gen, driver, model, theta, reward, tolerance, statistic, variant,
                          name="G-RBSDE residual")
    if bundle.L is None:
        return rep
    audit = skorokhod_audit(bundle.Y, bundle.L, model.weights, eps_c=tolerance, eps_b=tolerance)
    rep.details["skorokhod"] = {"regular_sum": audit.regular_sum, "right_sum": audit.right_sum,
                                "max_violation": audit.max_violation, "passed": audit.passed}
    rep.passed = rep.passed and audit.passed
    if not audit.passed and rep.worst_node is None:
        rep.worst_node = audit.worst_node
    elif not audit.passed:
        rep.worst_node = audit.worst_node
    return rep


def residual_f_bsde(bundle: SolutionBundle, gen: GeneratorSpec, driver: DriverSpec, model: RandomTimeModel,
                    reward: RewardSpec, tolerance: float = 1e-10, statistic: str = "max",
                    variant: str | None = None) -> ResidualReport:
    """Residual of the reduced F-equation on ``[0, tau ^ eta]``:

        Y_t = X_tau - int F dD^r - int F^g dD^g_+ - int Z dMtilde
              + int (R - Y - (F(R) - F(Y)) dD^r) dGamma  (+ L_tau - L_t).

    ``eta`` is the first zero of ``G``.  When it comes before ``tau`` the
    hazard jumps by one there, the value ``Y_eta`` drops out of the equation
    and the check runs up to ``eta`` with the solution's own ``Y_eta`` as
    terminal value.
    """
    grid = model.grid
    n = model.n_paths
    tau = reward.tau
    eta = model.eta if model.eta is not None else np.full(n, grid.beyond)
    stop = np.minimum(tau, eta)
    k = np.arange(grid.size)[None, :]
    variant = variant or ("optional" if model.finite is not None else "predictable")
    Mt = deflate_martingale(model.M, model, stop=stop, variant=variant)
    Y = bundle.Y
    R = reward.recovery(grid, n)
    reg = _regular_rates(gen, driver, Y, bundle.Z)
    reg = reg + np.einsum("nkd,dnk->nk", bundle.Z, Mt.regular_increment)
    adj = compute_U(Y, gen, R, driver)
    cont_adj = np.zeros_like(adj)
    cont_adj[:, 1:] = R.post[:, :-1] - Y.post[:, :-1]
    reg = reg - adj * model.Gamma.left_jump - cont_adj * model.Gamma.continuous_increment
    right = _right_rates(gen, driver, Y)
    if bundle.L is not None:
        reg = reg - bundle.L.l_r_increments
        right = right - bundle.L.l_g_increments
    X = reward.payoff(grid, n)
    terminal = np.where(stop < tau, Y.at[np.arange(n), stop], X.at[:, tau])
    window = k <= stop[:, None]
    res_at, res_post = _backward_residual(Y, terminal, stop, np.where((k >= 1) & window, reg, 0.0),
                                          np.where(k < stop[:, None], right, 0.0))
    resid = np.where(np.abs(res_at) >= np.abs(res_post), res_at, res_post)
    return _summarise("F-BSDE residual", resid, window, model.weights, tolerance, statistic,
                      truncated_paths=int(np.sum(stop < tau)))


# ---------------------------------------------------------------------------
# exact G-level oracle on the enlarged tree


def solve_g_tree_exact(finite: FiniteFiltration, gen: GeneratorSpec, driver: DriverSpec, reward: RewardSpec,
                       barrier: LagladPath | None = None, consistency_tol: float = 1e-9):
    """Solve the G-equation by enumeration on the joint (scenario, default node) space.

    On each alive atom the one-step equation is linear in the unknowns
    ``(Yhat_{(k-1)+}, Zhat, Uhat per F-child)`` and is solved by least squares;
    a non-zero residual means the driving martingales do not span the
    one-step increments and raises.  ``D^r`` must be a pure jump driver.
    Returns ``(space, joint_model, bundle)`` with the bundle on joint scenarios.
    """
    if np.any(driver.dc != 0):
        raise ModelError("the enlarged-tree oracle needs a pure jump D^r")
    model = build_finite_model(finite)
    space, jm = enlarge_model(model)
    jd = driver.take(space.omega)
    jr = reward.take(space.omega)
    grid = finite.grid
    K = reward.tau
    n = space.size
    theta = space.theta
    stop = np.minimum(theta, K)
    No, _ = build_default_martingales(jm, theta)
    dN = No.regular_increment
    Mt = deflate_martingale(jm.M, jm, stop=stop, variant="optional")
    dMt = Mt.regular_increment
    d = dMt.shape[0]
    terminal = reward_at_horizon(jr, theta)
    at = np.zeros((n, grid.size))
    post = np.zeros((n, grid.size))
    for j in range(n):
        at[j, stop[j]:] = post[j, stop[j]:] = terminal[j]
    Z = np.zeros((n, grid.size, d))
    U = np.zeros((n, grid.size))
    l_r = np.zeros((n, grid.size))
    l_g = np.zeros((n, grid.size))
    Xb = None if barrier is None else barrier[space.omega]
    Rj = jr.recovery(grid, n)
    if Xb is not None:
        # barrier of the G-problem: X before theta, R_theta from theta on
        k_ = np.arange(grid.size)[None, :]
        th = theta[:, None]
        r_th = Rj.at[np.arange(n), np.minimum(theta, grid.steps)][:, None]
        dead_pre = (k_ > th) & (th <= K)
        dead = (k_ >= th) & (th <= K)
        Xb = LagladPath(grid, np.where(dead_pre, r_th, Xb.pre), np.where(dead, r_th, Xb.at),
                        np.where(dead, r_th, Xb.post))
    f_labels = finite.labels[:, space.omega]
    zero_z = np.zeros((n, 0))
    for k in range(K, 0, -1):
        alive_prev = theta > k - 1
        for atom in np.unique(space.labels[k - 1][alive_prev]):
            idx = np.flatnonzero((space.labels[k - 1] == atom) & alive_prev)
            w = space.prob[idx]
            children = f_labels[k, idx]
            cells = np.unique(children)
            lhs = at[idx, k].copy()
            dr = jd.dr_jump[:, idx, k]
            if gen.f_r is not None and np.any(dr != 0):
                full = np.zeros(n)
                full[idx] = at[idx, k]
                val = np.asarray(gen.f_r(k, full, full, zero_z), float)
                val = val[None] if val.ndim == 1 else val
                lhs = lhs - (val[:, idx] * dr).sum(axis=0)
            cols = [np.ones(idx.size)] + [dMt[c, idx, k] for c in range(d)]
            cols += [np.where(children == c, dN[idx, k], 0.0) for c in cells]
            A = np.column_stack(cols)
            sw = np.sqrt(w / w.sum())
            coef, *_ = np.linalg.lstsq(A * sw[:, None], lhs * sw, rcond=None)
            miss = np.max(np.abs(A @ coef - lhs))
            if miss > consistency_tol * (1.0 + np.max(np.abs(lhs))):
                raise ModelError(f"one-step G-equation has no exact solution at node {k} "
                                 f"(mismatch {miss:.2e}); the tree is not complete")
            a_hat = coef[0]
            a = a_hat if Xb is None else max(float(Xb.pre[idx[0], k]), a_hat)
            i0 = idx[0]
            dg = jd.dg_plus[i0, k - 1]
            cap = None if Xb is None else float(Xb.at[i0, k - 1])
            if gen.f_g is not None and dg != 0:
                def target(v):
                    full_v = np.full(n, v)
                    full_a = np.full(n, a)
                    return a - float(np.asarray(gen.f_g(k - 1, full_v, full_a))[i0]) * dg

                v = _bracket_root(lambda v: v - (target(v) if cap is None else max(cap, target(v))), a,
                                  f"right jump at node {k - 1}")
                raw = target(v)
            else:
                raw = a
                v = a if cap is None else max(cap, a)
            post[idx, k - 1] = a
            at[idx, k - 1] = v
            Z[idx, k] = coef[1:1 + d]
            for c, u in zip(cells, coef[1 + d:]):
                U[idx[children == c], k] = u
            l_r[idx, k] = a - a_hat
            l_g[idx, k - 1] = v - raw
    pre = np.concatenate([at[:, :1], post[:, :-1]], axis=1)
    L = None
    if Xb is not None:
        L = ReflectionBundle(l_r, l_g, Xb)
    bundle = SolutionBundle(Y=LagladPath(grid, pre, at, post), Z=Z, U=U, L=L, diagnostics={"oracle": "G-tree"})
    return space, jm, bundle


# ---------------------------------------------------------------------------
# survival identities


def survival_identities(model: RandomTimeModel, tolerance: float | None = None) -> ResidualReport:
    """Node-wise checks linking ``G``, ``Gtilde``, ``m`` and ``A^o``:

    ``G = m - A^o``, ``Gtilde - G = dA^o``, ``Gtilde - G_- = dm``,
    ``Gtilde >= G``, ``Gtilde_+ = G`` and, when ``A^p`` and ``n`` are known,
    ``G = n - A^p``.
    """
    tol = tolerance if tolerance is not None else (1e-12 if model.finite is not None else 5 * model.grid.increments.max())
    G, Gt, m, Ao = model.G, model.Gtilde, model.m, model.Ao
    checks = {
        "G = m - A^o": G.at - (m.at - Ao.at),
        "Gtilde - G = dA^o": (Gt.at - G.at) - Ao.left_jump,
        "Gtilde - G_- = dm": (Gt.at - G.pre) - m.left_jump,
        "Gtilde >= G": np.minimum(Gt.at - G.at, 0.0),
        "Gtilde_+ = G": Gt.post - G.at,
    }
    checks["Gtilde - G_- = dm"][:, 0] = 0.0
    if model.Ap is not None and model.n_martingale is not None:
        checks["G = n - A^p"] = G.at - (model.n_martingale.at - model.Ap.at)
    worst = {name: float(np.abs(v).max()) for name, v in checks.items()}
    stacked = np.max(np.stack([np.abs(v) for v in checks.values()]), axis=0)
    rep = _summarise("survival identities", stacked, np.ones_like(stacked, bool), model.weights, tol,
                     identities=worst)
    return rep


identity_suite_lemma21 = survival_identities


# ---------------------------------------------------------------------------
# appendix identities


def _inverse(path: LagladPath) -> LagladPath:
    return LagladPath(path.grid, safe_divide(1.0, path.pre), safe_divide(1.0, path.at), safe_divide(1.0, path.post))


def _deflated(X: LagladPath, model: RandomTimeModel) -> LagladPath:
    """``X - Gtilde^{-1} . [X, m]``."""
    cov = quadratic_covariation(X, model.m)
    return X - dot_path(_inverse(model.Gtilde), cov, "optional")


def inverse_survival_residual(model: RandomTimeModel) -> np.ndarray:
    """``G^{-1} - (G_0^{-1} - G_-^{-2} . mtilde + G^{-1} . Gamma)`` at the node values."""
    if np.any(model.G.at <= 0):
        raise ModelError("G must stay positive for the inverse-survival identity")
    inv = _inverse(model.G)
    m_t = _deflated(model.m, model)
    sq = inv * inv
    rhs = inv.at[:, :1] - dot_path(sq, m_t, "predictable").at + dot_path(inv, model.Gamma, "optional").at
    return inv.at - rhs


def deflated_value_residual(model: RandomTimeModel, K: LagladPath, R: LagladPath, C: LagladPath) -> np.ndarray:
    """Residual of the dynamics of ``Y = G^{-1}(K - R . A^o + C)`` in terms of
    ``Gamma``, ``mtilde`` and ``Ktilde = K - Gtilde^{-1} . [K, m]``.

    Returns the larger of the value and right-limit residuals per node.
    """
    if np.any(model.G.at <= 0):
        raise ModelError("G must stay positive")
    grid = model.grid
    Q = K - dot_path(R, model.Ao, "optional") + C
    invG = _inverse(model.G)
    Y = Q * invG
    parts = decompose_laglad(C)
    Cr, Cg = parts.regular, parts.caglad_jumps
    m_t = _deflated(model.m, model)
    K_t = _deflated(K, model)
    y0 = Y.at[:, :1]
    rhs = (y0 + LagladPath.constant(grid, 0.0, Y.shape)
           - dot_path(R - Y, model.Gamma, "optional")
           - dot_path(Y * invG, m_t, "predictable")
           + dot_path(invG, K_t, "predictable")
           + dot_path(_inverse(model.Gtilde), Cr, "optional")
           + star_path(invG, Cg))
    res_at = Y.at - rhs.at
    res_post = Y.post - rhs.post
    return np.where(np.abs(res_at) >= np.abs(res_post), res_at, res_post)


def optional_product_residual(X: LagladPath, Y: LagladPath) -> np.ndarray:
    """``XY - (X_0 Y_0 + X_- . Y^r + X * Y^g_+ + Y_- . X^r + Y * X^g_+ + [X, Y])``.

    Exact for finite-variation pairs that are piecewise constant between nodes.
    """
    px, py = decompose_laglad(X), decompose_laglad(Y)
    rhs = (X.at[..., :1] * Y.at[..., :1]
           + dot_path(X, py.regular, "predictable") + star_path(X, py.caglad_jumps)
           + dot_path(Y, px.regular, "predictable") + star_path(Y, px.caglad_jumps)
           + quadratic_covariation(X, Y))
    prod = X * Y
    res_at = prod.at - rhs.at
    res_post = prod.post - rhs.post
    return np.where(np.abs(res_at) >= np.abs(res_post), res_at, res_post)


def refinement_slope(steps: np.ndarray, errors: np.ndarray) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dt)``."""
    dt = 1.0 / np.asarray(steps, float)
    err = np.asarray(errors, float)
    if err.size < 3:
        raise ValueError("a slope needs at least three refinement levels")
    return float(np.polyfit(np.log(dt), np.log(err), 1)[0])


def appendix_identity_checks(model: RandomTimeModel, K: LagladPath | None = None, R: LagladPath | None = None,
                             C: LagladPath | None = None, pairs=(), tolerance: float = 1e-10) -> ResidualReport:
    """Run the inverse-survival identity, the deflated-value dynamics and the
    optional product rule on ``pairs``; the report value is the largest residual."""
    grid, n = model.grid, model.n_paths
    zero = LagladPath.constant(grid, 0.0, (n,))
    one = LagladPath.constant(grid, 1.0, (n,))
    res1 = inverse_survival_residual(model)
    res2 = deflated_value_residual(model, K if K is not None else one, R if R is not None else zero,
                                   C if C is not None else zero)
    res3 = [float(np.abs(optional_product_residual(x, y)).max()) for x, y in pairs]
    stacked = np.maximum(np.abs(res1), np.abs(res2))
    return _summarise("appendix identities", stacked, np.ones_like(stacked, bool), model.weights, tolerance,
                      inverse_survival=float(np.abs(res1).max()), deflated_value=float(np.abs(res2).max()),
                      product_rule=max(res3, default=0.0))


# ---------------------------------------------------------------------------
# martingale tests


def martingale_test(process: LagladPath, mode: str = "mc", checkpoints=None, labels=None, weights=None,
                    state: np.ndarray | None = None, alive: np.ndarray | None = None, degree: int = 1,
                    z_threshold: float = 3.0, tolerance: float = 1e-12, name: str = "martingale test",
                    min_paths: int = 1000) -> ResidualReport:
    """Test ``E[X_{t_j} - X_{t_{j-1}} | info at t_{j-1}] = 0`` between checkpoints.

    ``exact`` mode uses the partitions ``labels`` (``(K+1, n)``) and
    ``weights``; the value is the largest conditional mean.  ``mc`` mode
    regresses each block increment on a polynomial basis in ``state`` at the
    block start (multiplied by the ``alive`` indicator when given) and
    reports the largest robust z-score of the coefficients.
    """
    values = process.at
    if values.ndim == 3:
        reports = [martingale_test(process[c], mode, checkpoints, labels, weights, state, alive, degree,
                                   z_threshold, tolerance, f"{name}[{c}]", min_paths)
                   for c in range(values.shape[0])]
        worst = max(reports, key=lambda r: r.value / r.tolerance)
        worst.name = name
        worst.passed = all(r.passed for r in reports)
        return worst
    n, size = values.shape
    cps = np.arange(size) if checkpoints is None else np.asarray(checkpoints)
    if cps[0] != 0:
        cps = np.concatenate([[0], cps])
    if mode == "exact":
        if labels is None:
            raise ValueError("exact mode needs the partitions of the filtration")
        ce = PartitionCE(np.asarray(labels), _weights(n, weights))
        drifts = np.zeros(cps.size)
        for j in range(1, cps.size):
            inc = values[:, cps[j]] - values[:, cps[j - 1]]
            drifts[j] = np.max(np.abs(ce(cps[j - 1], inc)))
        value = float(drifts.max())
        return ResidualReport(name, value, tolerance, bool(value <= tolerance), mean=drifts,
                              worst_node=int(cps[np.argmax(drifts)]))
    if mode != "mc":
        raise ValueError("mode is 'mc' or 'exact'")
    if n < min_paths:
        raise ValueError(f"mc martingale test needs at least {min_paths} paths")
    zs = np.zeros(cps.size)
    for j in range(1, cps.size):
        k0 = cps[j - 1]
        inc = values[:, cps[j]] - values[:, k0]
        if state is None:
            basis = np.ones((n, 1))
        else:
            s = np.asarray(state)[:, k0]
            s = s[:, None] if s.ndim == 1 else s
            sd = s.std(axis=0)
            s = (s[:, sd > 0] - s[:, sd > 0].mean(axis=0)) / sd[sd > 0]
            basis = polynomial_features(s, degree) if s.shape[1] else np.ones((n, 1))
        if alive is not None:
            a = np.asarray(alive)[:, k0].astype(float)
            basis = basis * a[:, None]
            keep = a > 0
            basis, inc_fit = basis[keep], inc[keep]
        else:
            inc_fit = inc
        if not inc_fit.size:
            continue
        coef, *_ = np.linalg.lstsq(basis, inc_fit, rcond=None)
        resid = inc_fit - basis @ coef
        bread = np.linalg.pinv(basis.T @ basis)
        meat = (basis * resid[:, None] ** 2).T @ basis
        cov = bread @ meat @ bread
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        z = np.divide(np.abs(coef), se, out=np.where(np.abs(coef) > 1e-14, np.inf, 0.0), where=se > 0)
        zs[j] = z.max(initial=0.0)
    value = float(zs.max())
    return ResidualReport(name, value, z_threshold, bool(value <= z_threshold), mean=zs,
                          worst_node=int(cps[np.argmax(zs)]))
