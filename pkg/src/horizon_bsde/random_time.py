"""Random-time models: the F-level survival bundle of a random time.

Three backends build a :class:`RandomTimeModel`:

* ``cox``: a hazard process drives a thinning sampler; the survival
  supermartingale is of finite variation and ``m = 1``.
* ``example132``: the one-dimensional Brownian/Poisson model in which
  ``J`` solves ``dJ = -lambda J dt + (b/sigma) J (1 - J) dW``.
* ``finite-oracle``: an explicit finite scenario tree with a prescribed
  conditional law of the random time, where every projection is a finite sum.

Arrays are indexed ``[path, node]``; martingale-valued objects with several
components carry a leading component axis.  Integrands such as ``nu`` are
stored at the right end of the interval they act on (``nu[..., k]`` acts on
``(t_{k-1}, t_k]``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .conditional import PartitionCE, RegressionCE
from .laglad import (
    LagladPath,
    TimeGrid,
    dot_path,
    indicator_from,
    quadratic_covariation,
    safe_divide,
)

BACKENDS = ("cox", "example132", "finite-oracle")


class ModelError(ValueError):
    """Invalid input to a random-time model builder."""


@dataclass(frozen=True, eq=False)
class RandomTimeModel:
    backend: str
    grid: TimeGrid
    G: LagladPath
    Gtilde: LagladPath
    m: LagladPath
    Ao: LagladPath
    Gamma: LagladPath
    nu: np.ndarray
    M: LagladPath
    weights: np.ndarray
    Ap: LagladPath | None = None
    n_martingale: LagladPath | None = None
    state: Mapping[str, np.ndarray] = field(default_factory=dict)
    finite: "FiniteFiltration | None" = None
    theta_sampler: Callable[[np.random.Generator], np.ndarray] | None = None
    eta: np.ndarray | None = None
    bracket_rates: tuple[float, ...] = ()
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ModelError(f"unknown backend {self.backend!r}")

    @property
    def n_paths(self) -> int:
        return self.G.shape[0]

    @property
    def dims(self) -> int:
        return self.M.shape[0]

    @property
    def dM(self) -> np.ndarray:
        return self.M.regular_increment

    def ce(self, degree: int = 2):
        """Default conditional-expectation estimator for this backend."""
        if self.finite is not None and self.meta.get("scenario_labels") is not None:
            return PartitionCE(np.asarray(self.meta["scenario_labels"]), self.weights)
        cols = [np.asarray(v, float) for v in self.state.values()]
        return RegressionCE(np.stack(cols, axis=-1), degree=degree)

    def take(self, index, weights=None) -> "RandomTimeModel":
        """Re-index every per-path array (used to move onto the enlarged space)."""
        index = np.asarray(index)
        pick = lambda p: None if p is None else p[index]
        labels = self.meta.get("scenario_labels")
        meta = dict(self.meta)
        if labels is not None:
            meta["scenario_labels"] = np.asarray(labels)[:, index]
        w = self.weights[index] if weights is None else np.asarray(weights, float)
        return replace(
            self,
            G=pick(self.G), Gtilde=pick(self.Gtilde), m=pick(self.m), Ao=pick(self.Ao),
            Gamma=pick(self.Gamma), nu=self.nu[:, index], M=self.M[:, index], weights=w,
            Ap=pick(self.Ap), n_martingale=pick(self.n_martingale),
            state={k: np.asarray(v)[index] for k, v in self.state.items()},
            eta=None if self.eta is None else self.eta[index], theta_sampler=None, meta=meta,
        )


# ---------------------------------------------------------------------------
# finite scenario trees


def _labels_from_cells(cells, n: int) -> np.ndarray:
    lab = np.full(n, -1, dtype=int)
    for j, cell in enumerate(cells):
        for i in cell:
            if lab[i] != -1:
                raise ModelError("scenario listed in two cells of one partition")
            lab[i] = j
    if np.any(lab < 0):
        raise ModelError("partition does not cover every scenario")
    return lab


def _compact(labels: np.ndarray) -> np.ndarray:
    return np.unique(labels, return_inverse=True)[1].reshape(labels.shape)


@dataclass(frozen=True, eq=False)
class FiniteFiltration:
    """A finite filtered probability space with a random time on it.

    ``labels[k, i]`` is the cell of scenario ``i`` at node ``k``.
    ``increments[c, i, k]`` is the increment of martingale component ``c`` on
    ``(t_{k-1}, t_k]`` (zero at ``k = 0``).  ``theta_law[i, j]`` is the
    probability that the random time equals ``t_j`` (``j <= K``) or lies
    beyond the horizon (``j = K+1``) given the full scenario ``i``.
    """

    times: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray
    increments: np.ndarray
    theta_law: np.ndarray
    name: str = ""
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, float)
        probs = np.asarray(self.probabilities, float)
        labels = _compact(np.asarray(self.labels, int))
        inc = np.asarray(self.increments, float)
        law = np.asarray(self.theta_law, float)
        K = times.size - 1
        n = probs.size
        if K > 6:
            raise ModelError("finite trees are limited to K <= 6 steps")
        if labels.shape != (K + 1, n):
            raise ModelError("need one partition per node")
        if inc.ndim == 2:
            inc = inc[None]
        if inc.shape[1:] != (n, K + 1):
            raise ModelError("increments must have shape (components, scenarios, nodes)")
        if law.shape != (n, K + 2):
            raise ModelError("theta law needs K+2 columns per scenario")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ModelError("scenario probabilities must be non-negative and sum to 1")
        if np.any(law < -1e-15) or np.any(np.abs(law.sum(axis=1) - 1.0) > 1e-12):
            raise ModelError("theta law mass must equal 1 for every scenario")
        if np.any(law[:, 0] != 0.0):
            raise ModelError("the random time may not charge t_0")
        for k in range(K):
            for cell in np.unique(labels[k + 1]):
                parents = np.unique(labels[k, labels[k + 1] == cell])
                if parents.size != 1:
                    raise ModelError(f"partition at node {k + 1} does not refine node {k}")
        for k in range(K + 1):
            for c in range(inc.shape[0]):
                for cell in np.unique(labels[k]):
                    vals = inc[c, labels[k] == cell, k]
                    if np.ptp(vals) > 1e-12:
                        raise ModelError(f"increment {c} not measurable at node {k}")
        ce = PartitionCE(labels, probs)
        for k in range(1, K + 1):
            drift = ce(k - 1, inc[:, :, k].T)
            if np.max(np.abs(drift)) > 1e-12:
                raise ModelError(f"increments at node {k} are not martingale increments")
        if np.any(inc[:, :, 0] != 0):
            raise ModelError("increments at node 0 must vanish")
        for name, val in (("times", times), ("probabilities", probs), ("labels", labels),
                          ("increments", inc), ("theta_law", law)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def n_scenarios(self) -> int:
        return self.probabilities.size

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.times)

    def ce(self) -> PartitionCE:
        return PartitionCE(self.labels, self.probabilities)

    def is_complete(self) -> bool:
        """Every one-step martingale increment is spanned by the driving increments."""
        for k in range(1, self.steps + 1):
            for cell in np.unique(self.labels[k - 1]):
                idx = np.flatnonzero((self.labels[k - 1] == cell) & (self.probabilities > 0))
                children, first = np.unique(self.labels[k, idx], return_index=True)
                rows = idx[first]
                basis = np.column_stack([np.ones(rows.size), self.increments[:, rows, k].T])
                if np.linalg.matrix_rank(basis) < children.size:
                    return False
        return True

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        cells = []
        for k in range(self.steps + 1):
            cells.append([np.flatnonzero(self.labels[k] == c).tolist()
                          for c in range(self.labels[k].max() + 1)])
        return {
            "schema": "finite-filtration/1",
            "name": self.name,
            "times": self.times.tolist(),
            "probabilities": self.probabilities.tolist(),
            "partitions": cells,
            "increments": self.increments.transpose(0, 2, 1).tolist(),
            "theta_law": self.theta_law.tolist(),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FiniteFiltration":
        if data.get("schema", "finite-filtration/1") != "finite-filtration/1":
            raise ModelError(f"unsupported schema {data.get('schema')!r}")
        probs = np.asarray(data["probabilities"], float)
        n = probs.size
        labels = np.stack([_labels_from_cells(c, n) for c in data["partitions"]])
        inc = np.asarray(data["increments"], float)
        if inc.ndim == 2:
            inc = inc[None]
        return cls(np.asarray(data["times"], float), probs, labels, inc.transpose(0, 2, 1),
                   np.asarray(data["theta_law"], float), data.get("name", ""), dict(data.get("meta", {})))

    @classmethod
    def load(cls, path) -> "FiniteFiltration":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def binomial(cls, steps: int, theta_law, horizon: float = 1.0, up: float = 1.0,
                 down: float = -1.0, up_prob: float | None = None, name: str = "") -> "FiniteFiltration":
        """Recombination-free binomial tree with moves ``up``/``down``.

        ``up_prob`` defaults to the martingale probability ``-down/(up-down)``.
        Scenario ``i`` follows the bits of ``i`` from the most significant one,
        a set bit meaning an up move.
        """
        q = -down / (up - down) if up_prob is None else up_prob
        if abs(q * up + (1 - q) * down) > 1e-12:
            raise ModelError("up_prob does not make the moves martingale increments")
        n = 2 ** steps
        bits = (np.arange(n)[:, None] >> np.arange(steps - 1, -1, -1)[None, :]) & 1
        probs = np.prod(np.where(bits == 1, q, 1 - q), axis=1)
        labels = np.zeros((steps + 1, n), dtype=int)
        inc = np.zeros((1, n, steps + 1))
        for k in range(1, steps + 1):
            labels[k] = np.arange(n) >> (steps - k)
            inc[0, :, k] = np.where(bits[:, k - 1] == 1, up, down)
        law = np.asarray(theta_law(bits) if callable(theta_law) else theta_law, float)
        law = np.broadcast_to(law, (n, steps + 2))
        return cls(np.linspace(0, horizon, steps + 1), probs, labels, inc, law, name)

    @classmethod
    def product_tree(cls, steps: int, moves, move_probs, theta_law, horizon: float = 1.0,
                     name: str = "") -> "FiniteFiltration":
        """Tree with the same one-step branching at every node.

        ``moves`` is ``(b, d)``: branch ``j`` adds ``moves[j]`` to the
        ``d`` martingale components and has probability ``move_probs[j]``.
        Scenario ``i`` reads its branches as the base-``b`` digits of ``i``;
        ``theta_law`` receives the ``(n, steps)`` branch indices.
        """
        moves = np.asarray(moves, float)
        if moves.ndim == 1:
            moves = moves[:, None]
        q = np.asarray(move_probs, float)
        b = q.size
        if moves.shape[0] != b:
            raise ModelError("one move per branch probability")
        n = b ** steps
        digits = (np.arange(n)[:, None] // b ** np.arange(steps - 1, -1, -1)[None, :]) % b
        probs = np.prod(q[digits], axis=1)
        labels = np.zeros((steps + 1, n), dtype=int)
        inc = np.zeros((moves.shape[1], n, steps + 1))
        for k in range(1, steps + 1):
            labels[k] = np.arange(n) // b ** (steps - k)
            inc[:, :, k] = moves[digits[:, k - 1]].T
        law = np.asarray(theta_law(digits) if callable(theta_law) else theta_law, float)
        law = np.broadcast_to(law, (n, steps + 2))
        return cls(np.linspace(0, horizon, steps + 1), probs, labels, inc, law, name)


def bundled_names() -> list[str]:
    """Names of the finite trees shipped in ``horizon_bsde/data``."""
    from importlib.resources import files

    return sorted(p.name[:-5] for p in files("horizon_bsde").joinpath("data").iterdir()
                  if p.name.endswith(".json"))


def load_bundled(name: str) -> FiniteFiltration:
    from importlib.resources import files

    path = files("horizon_bsde").joinpath("data", f"{name}.json")
    if not path.is_file():
        raise ModelError(f"no bundled tree named {name!r}; have {bundled_names()}")
    return FiniteFiltration.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True, eq=False)
class EnlargedSpace:
    """Joint scenarios (F-scenario, value of the random time) of a finite tree.

    ``labels[k, s]`` identifies the atom of the progressively enlarged
    filtration at node ``k``: the F-cell plus the default node if it already
    happened, or an 'alive' flag otherwise.
    """

    omega: np.ndarray
    theta: np.ndarray
    prob: np.ndarray
    labels: np.ndarray
    alive_labels: np.ndarray

    @property
    def size(self) -> int:
        return self.omega.size

    def ce(self) -> PartitionCE:
        return PartitionCE(self.labels, self.prob)


def enlarged_space(finite: FiniteFiltration) -> EnlargedSpace:
    K = finite.steps
    omega, theta, prob = [], [], []
    for i in range(finite.n_scenarios):
        for j in range(K + 2):
            mass = finite.probabilities[i] * finite.theta_law[i, j]
            if mass > 0:
                omega.append(i)
                theta.append(j)
                prob.append(mass)
    omega = np.array(omega)
    theta = np.array(theta)
    prob = np.array(prob)
    f_lab = finite.labels[:, omega]
    k = np.arange(K + 1)[:, None]
    status = np.where(theta[None, :] <= k, theta[None, :], -1)
    width = K + 3
    labels = _compact(f_lab * width + (status + 1))
    alive = _compact(f_lab * 2 + (theta[None, :] > k))
    return EnlargedSpace(omega, theta, prob, labels, alive)


def build_finite_model(finite: FiniteFiltration) -> RandomTimeModel:
    """Exact survival bundle of a finite tree by summation over atoms."""
    grid = finite.grid
    K = finite.steps
    ce = finite.ce()
    law = finite.theta_law
    tail_after = np.cumsum(law[:, ::-1], axis=1)[:, ::-1]  # P(theta >= t_j | scenario)
    strict = tail_after[:, 1:]  # P(theta > t_j)
    G = np.column_stack([ce(k, strict[:, k]) for k in range(K + 1)])
    Gt = np.column_stack([ce(k, tail_after[:, k]) for k in range(K + 1)])
    dAo = np.column_stack([ce(k, law[:, k]) for k in range(K + 1)])
    dAp = np.zeros_like(dAo)
    for k in range(1, K + 1):
        dAp[:, k] = ce(k - 1, law[:, k])
    Ao = np.cumsum(dAo, axis=1)
    Ap = np.cumsum(dAp, axis=1)
    m = np.column_stack([ce(k, Ao[:, K] + G[:, K]) for k in range(K + 1)])
    n_mart = np.column_stack([ce(k, Ap[:, K] + G[:, K]) for k in range(K + 1)])
    dGamma = safe_divide(dAo, Gt)
    dGamma[:, 0] = 0.0
    pre_G = np.concatenate([G[:, :1], G[:, :-1]], axis=1)

    d = finite.increments.shape[0]
    dM = finite.increments
    dm = np.diff(m, axis=1, prepend=m[:, :1])
    nu = np.zeros((d, finite.n_scenarios, K + 1))
    for k in range(1, K + 1):
        for c in range(d):
            num = ce(k - 1, dm[:, k] * dM[c, :, k])
            den = ce(k - 1, dM[c, :, k] ** 2)
            nu[c, :, k] = safe_divide(num, den)

    def sampler(rng: np.random.Generator) -> np.ndarray:
        u = rng.random(finite.n_scenarios)[:, None]
        return (u > np.cumsum(law, axis=1)).sum(axis=1)

    eta = _first_zero(G, grid)
    return RandomTimeModel(
        backend="finite-oracle",
        grid=grid,
        G=LagladPath.cadlag(grid, G),
        Gtilde=LagladPath(grid, pre_G, Gt, G),
        m=LagladPath.cadlag(grid, m),
        Ao=LagladPath.cadlag(grid, Ao, increasing=True),
        Gamma=LagladPath.cadlag(grid, np.cumsum(dGamma, axis=1), increasing=True),
        nu=nu,
        M=LagladPath.cadlag(grid, np.cumsum(dM, axis=2)),
        weights=finite.probabilities.copy(),
        Ap=LagladPath.cadlag(grid, Ap, increasing=True),
        n_martingale=LagladPath.cadlag(grid, n_mart),
        finite=finite,
        theta_sampler=sampler,
        eta=eta,
        meta={"scenario_labels": finite.labels},
    )


def enlarge_model(model: RandomTimeModel) -> tuple[EnlargedSpace, RandomTimeModel]:
    """Move a finite-oracle model onto its enlarged scenario space."""
    if model.finite is None:
        raise ModelError("only finite-oracle models can be enlarged")
    space = enlarged_space(model.finite)
    moved = model.take(space.omega, weights=space.prob)
    return space, moved


# ---------------------------------------------------------------------------
# cox backend


def _first_zero(G: np.ndarray, grid: TimeGrid) -> np.ndarray:
    zero = G <= 0.0
    return np.where(zero.any(axis=1), zero.argmax(axis=1), grid.beyond)


def build_cox_model(hazard: LagladPath, M: LagladPath, state: Mapping[str, np.ndarray] | None = None,
                    bracket_rates: tuple[float, ...] = (1.0,)) -> RandomTimeModel:
    """Survival bundle of a Cox time with hazard ``Lambda`` (``m = 1``).

    ``hazard`` carries the continuous part of ``Lambda`` between nodes and its
    jumps as left jumps.  ``M`` holds the driving martingales with a leading
    component axis.
    """
    grid = hazard.grid
    if np.any(np.abs(hazard.at[..., 0]) > 0) or np.any(np.abs(hazard.pre[..., 0]) > 0):
        raise ModelError("hazard must start at 0")
    jumps = hazard.left_jump
    cont = hazard.continuous_increment
    if np.any(cont < -1e-15) or np.any(jumps < -1e-15) or np.any(hazard.right_jump != 0):
        raise ModelError("hazard must be increasing with left jumps only")
    if np.any(jumps > 1.0 + 1e-15):
        raise ModelError("hazard jumps must not exceed 1")
    log_pre = -np.cumsum(cont, axis=-1)
    surv = np.cumprod(1.0 - jumps, axis=-1)
    surv_before = np.concatenate([np.ones_like(surv[..., :1]), surv[..., :-1]], axis=-1)
    g_pre = np.exp(log_pre) * surv_before
    g_at = np.exp(log_pre) * surv
    n = hazard.shape[0]
    G = LagladPath(grid, g_pre, g_at, g_at)
    Gt = LagladPath(grid, g_pre, g_pre, g_at)
    Ao = LagladPath(grid, 1.0 - g_pre, 1.0 - g_at, 1.0 - g_at, increasing=True)
    Ap = dot_path(G.with_measurability("predictable"), hazard)
    d = M.shape[0]
    rng_state = {k: np.asarray(v, float) for k, v in (state or {}).items()}
    if not rng_state:
        rng_state = {f"M{c}": M.at[c] for c in range(d)}

    def sampler(rng: np.random.Generator) -> np.ndarray:
        prob = 1.0 - safe_divide(g_at[:, 1:], g_at[:, :-1], fill=0.0)
        hit = rng.random(prob.shape) < prob
        first = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, grid.beyond)
        return first

    return RandomTimeModel(
        backend="cox", grid=grid, G=G, Gtilde=Gt, m=LagladPath.constant(grid, 1.0, (n,)),
        Ao=Ao, Gamma=hazard, nu=np.zeros((d, n, grid.size)), M=M, weights=np.full(n, 1.0 / n),
        Ap=Ap, state=rng_state, theta_sampler=sampler, eta=_first_zero(g_at, grid),
        bracket_rates=tuple(bracket_rates),
    )


# ---------------------------------------------------------------------------
# Brownian / Poisson simulation and the default-after-first-jump backend


@dataclass(frozen=True, eq=False)
class BrownianPoissonPaths:
    grid: TimeGrid
    W: np.ndarray
    N: np.ndarray
    first_jump: np.ndarray
    intensity: float
    seeds: tuple[str, ...]

    def __len__(self) -> int:
        return self.W.shape[0]


def simulate_brownian_poisson(grid: TimeGrid, n_paths: int, intensity: float, seed: int,
                              chunk: int = 4096, threads: int = 1) -> BrownianPoissonPaths:
    """Brownian increments and Poisson counts on ``grid``.

    Paths are generated in fixed chunks, each with its own seed derived from
    ``(seed, chunk index)``, so results do not depend on ``threads``.
    """
    dt = np.diff(grid.nodes)
    n_chunks = -(-n_paths // chunk)

    def one(c: int):
        size = min(chunk, n_paths - c * chunk)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), c]))
        dw = rng.standard_normal((size, dt.size)) * np.sqrt(dt)
        dn = rng.poisson(intensity * dt, size=(size, dt.size)) if intensity > 0 else np.zeros((size, dt.size))
        return dw, dn

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(n_chunks)))
    else:
        parts = [one(c) for c in range(n_chunks)]
    dw = np.concatenate([p[0] for p in parts])
    dn = np.concatenate([p[1] for p in parts]).astype(float)
    W = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dw, axis=1)], axis=1)
    N = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dn, axis=1)], axis=1)
    jumped = N > 0
    first = np.where(jumped.any(axis=1), jumped.argmax(axis=1), grid.beyond)
    seeds = tuple(f"{seed}:{i // chunk}:{i % chunk}" for i in range(n_paths))
    return BrownianPoissonPaths(grid, W, N, first, float(intensity), seeds)


def simulate_J(grid: TimeGrid, W: np.ndarray, lam: float, b: float, sigma: float,
               scheme: str = "euler") -> np.ndarray:
    """Discretise ``dJ = -lambda J dt + (b/sigma) J (1 - J) dW``, ``J_0 = 1``.

    ``euler`` is the plain Euler step; with it the discrete survival process,
    ``m`` and ``A^o`` of :func:`build_example132` satisfy ``G = m - A^o``
    exactly.  ``log-euler`` works with ``J = Q exp(-lambda t)`` and stays
    positive on any grid
    (up to floating-point underflow for extreme ``b/sigma``).
    """
    ratio = b / sigma
    dt = np.diff(grid.nodes)
    dw = np.diff(W, axis=1)
    J = np.ones_like(W)
    if scheme == "euler":
        for k in range(1, grid.size):
            j = J[:, k - 1]
            J[:, k] = j * (1.0 - lam * dt[k - 1]) + ratio * j * (1.0 - j) * dw[:, k - 1]
        return J
    if scheme != "log-euler":
        raise ValueError("scheme is 'euler' or 'log-euler'")
    logq = np.zeros(W.shape[0])
    for k in range(1, grid.size):
        a = ratio * (1.0 - J[:, k - 1])
        logq = logq + a * dw[:, k - 1] - 0.5 * a * a * dt[k - 1]
        J[:, k] = np.exp(logq - lam * grid.nodes[k])
    return J


def build_example132(lam: float, b: float, sigma: float, p: float, W: np.ndarray,
                     first_jump: np.ndarray, grid: TimeGrid, N: np.ndarray | None = None,
                     intensity: float = 0.0, scheme: str = "euler") -> RandomTimeModel:
    """F-level bundle of the Brownian/Poisson example.

    ``first_jump`` holds the node index of the first Poisson jump per path
    (``grid.beyond`` when it happens after the horizon).  The process ``m`` is
    the Euler sum of its stochastic integral; with the Euler scheme for ``J``
    the identity ``G = m - A^o`` then holds exactly on the grid.
    """
    if not (lam >= 0 and sigma > 0 and 0.0 <= p <= 1.0 and np.isfinite(b)):
        raise ModelError("need lambda >= 0, sigma > 0, 0 <= p <= 1")
    W = np.asarray(W, float)
    n = W.shape[0]
    J = simulate_J(grid, W, lam, b, sigma, scheme)
    bad = ~np.all(J > 0, axis=1)
    if bad.any():
        raise ModelError(f"{int(bad.sum())} paths with non-positive J; refine the grid")
    k = np.arange(grid.size)[None, :]
    T1 = np.asarray(first_jump)[:, None]
    jumped = k >= T1
    jumped_before = k > T1
    at_jump = (k == T1).astype(float)
    G = J * (1.0 - (1.0 - p) * jumped)
    Gt = J * (1.0 - (1.0 - p) * jumped_before)
    G_prev = np.concatenate([G[:, :1], G[:, :-1]], axis=1)
    J_prev = np.concatenate([J[:, :1], J[:, :-1]], axis=1)
    ratio = b / sigma
    dW = np.diff(W, axis=1, prepend=W[:, :1])
    nu_w = ratio * G_prev * (1.0 - J_prev)
    nu_w[:, 0] = 0.0
    m = 1.0 + np.cumsum(nu_w * dW, axis=1)
    dt = grid.increments[None, :]
    Ao = LagladPath.from_parts(grid, continuous=np.cumsum(lam * G_prev * dt, axis=1),
                               left_jumps=(1.0 - p) * J * at_jump, increasing=True)
    Gamma = LagladPath.from_parts(grid, continuous=np.broadcast_to(lam * grid.nodes, (n, grid.size)),
                                  left_jumps=(1.0 - p) * at_jump, increasing=True)
    comps = [W]
    nu = [nu_w]
    rates = [1.0]
    if N is not None:
        comps.append(np.asarray(N, float) - intensity * grid.nodes[None, :])
        nu.append(np.zeros_like(nu_w))
        rates.append(float(intensity))
    state = {"J": J}
    return RandomTimeModel(
        backend="example132", grid=grid,
        G=LagladPath.cadlag(grid, G),
        Gtilde=LagladPath(grid, G_prev, Gt, G),
        m=LagladPath.cadlag(grid, m),
        Ao=Ao, Gamma=Gamma, nu=np.stack(nu),
        M=LagladPath.cadlag(grid, np.stack(comps)),
        weights=np.full(n, 1.0 / n), state=state, eta=_first_zero(G, grid),
        bracket_rates=tuple(rates),
        meta={"lambda": lam, "b": b, "sigma": sigma, "p": p, "first_jump": np.asarray(first_jump),
              "J": J, "intensity": intensity},
    )


def cox_theta_for_example132(model: RandomTimeModel, rng: np.random.Generator) -> np.ndarray:
    """Stand-in default times for the ``example132`` backend: thinning with the
    one-step conditional default probabilities ``dGamma``.

    The lift and residual checks are pathwise and accept any node-valued
    time; this sampler only keeps the fraction of defaulted paths realistic.
    """
    inc = model.Gamma.regular_increment[:, 1:]
    prob = np.clip(np.where(model.Gamma.left_jump[:, 1:] > 0, model.Gamma.left_jump[:, 1:],
                            1.0 - np.exp(-inc)), 0.0, 1.0)
    hit = rng.random(prob.shape) < prob
    return np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, model.grid.beyond)


# ---------------------------------------------------------------------------
# derived objects


def deflate_martingale(M: LagladPath, model: RandomTimeModel, stop=None,
                       variant: str = "optional") -> LagladPath:
    """``M - Gtilde^{-1} . [M, m]`` (or the predictable-bracket variant
    ``M - G_-^{-1} nu d<M>`` for continuous-filtration backends).

    ``stop`` (node per path) limits the window on which ``Gtilde > 0`` is
    required; by default the whole grid.  Where ``Gtilde`` first hits zero
    (times outside class K) the optional variant adds the predictable
    projection of ``dM`` there, which keeps the stopped process a
    G-martingale; the term vanishes while ``Gtilde > 0``.
    """
    grid = model.grid
    k = np.arange(grid.size)
    window = np.ones(model.G.at.shape, bool) if stop is None else (
        k[None, :] <= np.asarray(stop)[:, None])
    if variant == "optional":
        cov = quadratic_covariation(M, model.m)
        active = (np.abs(cov.left_jump) > 0) & window
        if np.any((model.Gtilde.at <= 0) & active):
            raise ModelError("Gtilde vanishes inside the window; truncate first")
        inv = LagladPath.continuous(grid, safe_divide(1.0, model.Gtilde.at))
        out = M - dot_path(inv, cov, "optional")
        # first zero of Gtilde: add the predictable projection of the jump of M there
        first = (model.Gtilde.at <= 0) & (model.G.pre > 0)
        first[:, 0] = False
        if first.any():
            ce = model.ce()
            dM = M.regular_increment
            flat = dM.reshape(-1, *dM.shape[-2:])
            corr = np.zeros_like(flat)
            for c in range(flat.shape[0]):
                for j in np.flatnonzero(first.any(axis=0)):
                    corr[c, :, j] = ce(j - 1, flat[c, :, j] * first[:, j])
            out = out + LagladPath.cadlag(grid, np.cumsum(corr, axis=-1).reshape(dM.shape))
        return out
    if variant == "predictable":
        rates = np.asarray(model.bracket_rates or (1.0,) * M.shape[0])
        dt = grid.increments
        drift = safe_divide(model.nu, model.G.pre[None]) * rates[:, None, None] * dt
        if np.any((model.G.pre <= 0) & window):
            raise ModelError("G vanishes inside the window; truncate first")
        return M - LagladPath.continuous(grid, np.cumsum(drift, axis=-1))
    raise ValueError("variant is 'optional' or 'predictable'")


def detect_eta_and_truncate(model: RandomTimeModel, tau: int):
    """First zero ``eta`` of ``G`` per path, ``tau' = tau ^ eta`` and the class-K flag."""
    grid = model.grid
    eta = _first_zero(model.G.at, grid)
    tau_prime = np.minimum(np.asarray(tau), eta)
    hit = eta <= grid.steps
    gt_eta = model.Gtilde.at[np.flatnonzero(hit), eta[hit]]
    flag = bool(np.all(gt_eta > 0))
    return eta, tau_prime, flag


def _check_theta(theta, grid: TimeGrid) -> np.ndarray:
    arr = np.asarray(theta)
    if not np.issubdtype(arr.dtype, np.integer):
        if np.any(arr != np.round(arr)):
            raise ModelError("theta must be given as grid node indices")
        arr = arr.astype(int)
    if np.any(arr < 1) or np.any(arr > grid.beyond):
        raise ModelError("theta index outside 1..K or beyond")
    return arr


def build_default_martingales(model: RandomTimeModel, theta):
    """``N^{o,G} = A - 1_(0,theta] . Gamma`` and ``N^{p,G} = A - 1_(0,theta] G_-^{-1} . A^p``."""
    grid = model.grid
    theta = _check_theta(theta, grid)
    A = indicator_from(grid, theta)
    No = A - model.Gamma.stopped(theta) + model.Gamma.at[:, :1]
    Np = None
    if model.Ap is not None:
        inv = LagladPath.continuous(grid, safe_divide(1.0, model.G.pre)).with_measurability("predictable")
        comp = dot_path(inv, model.Ap)
        Np = A - comp.stopped(theta)
    return No, Np
