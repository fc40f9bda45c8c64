"""Reflected BSDEs with a laglad driver and a lower barrier.

The reflection is a discrete max-projection after each backward step.  Two
increasing processes are produced: ``l_r`` pushes at the left end of each
interval ``(t_{k-1}, t_k]`` (the regular part) and ``l_g`` at right jumps.
Increments are stored per node: ``l_r_increments[:, k]`` belongs to
``(t_{k-1}, t_k]`` and ``l_g_increments[:, k]`` is the right jump at ``t_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import (DriverError, DriverSpec, GeneratorSpec, SolutionBundle, _bundle,
                   backward_sweep, solve_tree_exact)
from .laglad import LagladPath


@dataclass(frozen=True, eq=False)
class ReflectionBundle:
    l_r_increments: np.ndarray
    l_g_increments: np.ndarray
    barrier: LagladPath

    @property
    def l_r(self) -> LagladPath:
        return LagladPath.cadlag(self.barrier.grid, np.cumsum(self.l_r_increments, axis=1), increasing=True)

    @property
    def l_g(self) -> LagladPath:
        """Right-jump process; its cadlag version is ``l_g.post``."""
        return LagladPath.from_parts(self.barrier.grid, right_jumps=self.l_g_increments)

    @property
    def total(self) -> LagladPath:
        return self.l_r + self.l_g

    def take(self, index) -> "ReflectionBundle":
        index = np.asarray(index)
        return ReflectionBundle(self.l_r_increments[index], self.l_g_increments[index],
                                None if self.barrier is None else self.barrier[index])


def _as_barrier(barrier, driver: DriverSpec) -> LagladPath:
    if isinstance(barrier, LagladPath):
        if not barrier.grid.same_as(driver.grid):
            raise DriverError("barrier lives on a different grid")
        return barrier
    vals = np.broadcast_to(np.asarray(barrier, float), (driver.n_paths, driver.grid.size))
    return LagladPath.cadlag(driver.grid, vals)


def _reflected(gen, driver, barrier, terminal, ce, tau, opts, **diag) -> SolutionBundle:
    X = _as_barrier(barrier, driver)
    sweep = backward_sweep(gen, driver, terminal, ce, barrier=X, tau=tau, **opts)
    out = _bundle(sweep, driver.grid, **diag)
    refl = ReflectionBundle(sweep.l_r, sweep.l_g, X)
    return SolutionBundle(out.Y, out.Z, None, refl, out.y_before_jump, out.diagnostics)


def solve_reflected_continuous(gen: GeneratorSpec, driver: DriverSpec, barrier, terminal, ce,
                               tau: int | None = None, **opts) -> SolutionBundle:
    """Discretely reflected implicit Euler for a jump-free driver."""
    if driver.jump_nodes.any() or np.any(driver.dg_plus != 0):
        raise DriverError("continuous-driver solver called with a jumping driver")
    plain = GeneratorSpec(f_r=gen.f_r, lipschitz=gen.lipschitz, bound=gen.bound)
    return _reflected(plain, driver, barrier, terminal, ce, tau, opts)


def rstep2_cadlag_solve(gen: GeneratorSpec, driver: DriverSpec, barrier, terminal, ce,
                        tau: int | None = None, **opts) -> SolutionBundle:
    """Reflected cadlag driver.  At a listed jump ``S`` the left-limit law is
    ``v_{S-} = X_{S-} v E[v_S | F_{S-}]`` and ``h`` reads that reflected left limit."""
    if np.any(driver.dg_plus != 0):
        raise DriverError("rstep2 handles cadlag drivers only; use rstep1_laglad_solve")
    g = GeneratorSpec(gen.f_r, None, gen.h, gen.lipschitz, gen.bound, gen.h_reads_left_limit)
    return _reflected(g, driver, barrier, terminal, ce, tau, opts)


def rstep1_laglad_solve(gen: GeneratorSpec, driver: DriverSpec, barrier, terminal, ce,
                        tau: int | None = None, **opts) -> SolutionBundle:
    """Reflected laglad driver: ``v = X v (v_+ - f^g(v, v_+) dD^g_+)`` at right jumps."""
    return _reflected(gen, driver, barrier, terminal, ce, tau, opts)


def solve_reflected_tree_exact(finite, gen: GeneratorSpec, driver: DriverSpec, barrier, terminal,
                               tau: int | None = None) -> SolutionBundle:
    X = _as_barrier(barrier, driver)
    out = solve_tree_exact(finite, gen, driver, terminal, barrier=X, tau=tau)
    refl = ReflectionBundle(out.diagnostics["l_r"], out.diagnostics["l_g"], X)
    return SolutionBundle(out.Y, out.Z, None, refl, out.y_before_jump, out.diagnostics)


@dataclass(frozen=True)
class SkorokhodReport:
    regular_sum: float
    right_sum: float
    max_violation: float
    increasing: bool
    passed: bool
    worst_node: int | None

    def __str__(self) -> str:
        state = "PASS" if self.passed else f"FAIL at node {self.worst_node}"
        return (f"skorokhod {state}: regular={self.regular_sum:.3e} right={self.right_sum:.3e} "
                f"violation={self.max_violation:.3e} increasing={self.increasing}")


def skorokhod_audit(Y: LagladPath, reflection: ReflectionBundle, weights=None,
                    eps_c: float | None = None, eps_b: float | None = None) -> SkorokhodReport:
    """Complementarity, dominance and monotonicity of a reflected solution.

    Sums are path averages (weighted when ``weights`` is given) of
    ``sum_k (y_{k-} - X_{k-}) dl^r_k`` and ``sum_k (y_k - X_k) dl^g_k``.
    Default tolerances are ``1e-8`` times the scale of ``y``.
    """
    X = reflection.barrier
    dlr = reflection.l_r_increments
    dlg = reflection.l_g_increments
    n = dlr.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float) / np.sum(weights)
    scale = 1.0 + float(np.max(np.abs(Y.at)))
    eps_c = 1e-8 * scale if eps_c is None else eps_c
    eps_b = 1e-8 * scale if eps_b is None else eps_b
    gap_r = (Y.pre - X.pre) * dlr
    gap_g = (Y.at - X.at) * dlg
    per_node = w @ (np.abs(gap_r) + np.abs(gap_g))
    violation = np.maximum(X.at - Y.at, X.pre - Y.pre).max(initial=0.0)
    increasing = bool(np.all(dlr >= -eps_b) and np.all(dlg >= -eps_b))
    sr, sg = float(w @ gap_r.sum(axis=1)), float(w @ gap_g.sum(axis=1))
    passed = abs(sr) <= eps_c and abs(sg) <= eps_c and violation <= eps_b and increasing
    worst = None
    if not passed:
        dom = np.maximum(X.at - Y.at, X.pre - Y.pre).max(axis=0)
        worst = int(np.argmax(per_node + np.maximum(dom, 0.0)))
    return SkorokhodReport(sr, sg, float(max(violation, 0.0)), increasing, bool(passed), worst)
